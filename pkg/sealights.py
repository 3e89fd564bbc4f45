#!/usr/bin/env python
import os
import socket
import sys
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from pathlib import Path

import click
from tqdm import tqdm

import modules.bench as bench
import modules.helpers as helpers
import modules.keystore as keystore
import modules.protocol as protocol
import modules.simulator as simulator
import modules.sizemodel as sizemodel
import modules.sol_config as sol_config
import modules.trustgraph as trustgraph
from modules.errors import InvalidConfig, OoBRejected, SolError
from modules.model import TrustConfig, TrustLevel, key_id

__version__ = "0.3"

_DEBUG = False


def _error(message: str):
    click.echo(click.style(f"ERROR: {message}", fg="red", bold=True), err=True)


def _heading(message: str):
    click.echo(click.style(f"\n{message}\n", fg="white", bold=True))


def _default_outdir() -> str:
    return os.environ.get(sol_config.ENV_OUTDIR, ".")


def _default_home() -> str:
    return os.environ.get(sol_config.ENV_HOME, os.path.join(".", ".sealights"))


def _split_address(text: str):
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise click.BadParameter(f"expected HOST:PORT, got {text!r}")


@click.version_option(version=__version__, prog_name="sealights")
@click.group()
@click.option("--debug", is_flag=True, default=False, help="Dump exception tracebacks")
def cli(debug):
    """
    Sea of Lights: decentralized device authentication through a web of trust

    For help with a specific command type:

    sealights.py [COMMAND] --help

    """
    global _DEBUG
    _DEBUG = debug


@cli.command()
@click.option("--scenario", type=click.Path(exists=True, dir_okay=False), help="Scenario file (YAML)")
@click.option("--nodes", type=int, help="Number of devices")
@click.option("--duration", type=int, help="Simulated seconds")
@click.option("--width", type=float, help="World width in meters")
@click.option("--height", type=float, help="World height in meters")
@click.option("--range", "tx_range", type=float, help="Transmission range in meters")
@click.option("--interval", type=float, help="Sync interval in seconds")
@click.option("--seed", type=int, help="Random seed")
@click.option("--seeds", help="Seed batch such as 1..5 or 1,3,7 (one CSV per seed)")
@click.option("--degree", type=int, help="maxdegree")
@click.option("--numknown", type=int, help="numknown")
@click.option("--algo", type=click.Choice(sol_config.ALGORITHMS), help="Signature algorithm")
@click.option("--crypto-mode", type=click.Choice(sol_config.CRYPTO_MODES), help="Real or SizeModel crypto")
@click.option("--subkeys", type=int, help="Sub-keys each device registers at start")
@click.option("--out", default=_default_outdir, show_default="$SEALIGHTS_OUTDIR or .", help="Output directory")
@click.option("--quiet", is_flag=True, default=False, help="No progress bars")
def sim(scenario, nodes, duration, width, height, tx_range, interval, seed, seeds, degree, numknown, algo,
        crypto_mode, subkeys, out, quiet):
    """Run a mobility simulation and export its metrics as CSV"""
    config = simulator.load_scenario(scenario) if scenario else simulator.SimConfig()
    config = config.with_overrides(
        trust={"maxdegree": degree, "numknown": numknown, "signaturealgorithm": algo},
        num_nodes=nodes,
        duration_s=duration,
        width_m=width,
        height_m=height,
        tx_range_m=tx_range,
        sync_interval_s=interval,
        seed=seed,
        crypto_mode=crypto_mode,
        subkeys_per_node=subkeys,
    )
    if seeds:
        try:
            seed_list = helpers.parse_seed_range(seeds)
        except ValueError:
            raise click.BadParameter(f"cannot parse seed list {seeds!r}", param_hint="--seeds")
        if not seed_list:
            raise click.BadParameter("empty seed list", param_hint="--seeds")
        logs = simulator.run_batch(config, seed_list, quiet=quiet)
    else:
        logs = {config.seed: _run_single(config, quiet)}
    for run_seed, log in sorted(logs.items()):
        name = f"metrics_{config.trust.signaturealgorithm}_deg{config.trust.maxdegree}_seed{run_seed}.csv"
        path = simulator.export_metrics(log, Path(out) / name)
        click.echo(f"seed={run_seed} {simulator.summary(log)} -> {path}")


def _run_single(config, quiet):
    simulation = simulator.Simulation(config)
    steps = int(round(config.duration_s / config.step_s)) + 1
    if quiet:
        return simulation.run()
    with tqdm(total=steps, desc="Simulating", unit="step", leave=False) as bar:
        return simulation.run(progress=lambda _: bar.update(1))


@cli.command(name="bench")
@click.option("--algo", "algos", multiple=True, type=click.Choice(sol_config.ALGORITHMS),
              help="Algorithm to benchmark (repeatable, default all)")
@click.option("--reps", type=int, default=sol_config.BENCH_REPETITIONS, show_default=True, help="Repetitions")
@click.option("--out", type=click.Path(dir_okay=False), help="Also write the report as CSV")
@click.option("--quiet", is_flag=True, default=False, help="No progress bars")
def bench_cmd(algos, reps, out, quiet):
    """Time key generation, signing and verification"""
    if reps < 1:
        raise click.BadParameter("must be at least 1", param_hint="--reps")
    reports = [bench.run_bench(algo, reps, quiet=quiet) for algo in (algos or sol_config.ALGORITHMS)]
    _heading(f"Signature benchmark ({reps} repetitions)")
    click.echo(f"{'algorithm':<12}{'keygen ms':>12}{'sign ms':>12}{'verify ms':>12}{'valid ok':>10}{'invalid rej':>13}")
    for r in reports:
        click.echo(
            f"{r.algorithm:<12}{r.keygen_ms:>12.3f}{r.sign_ms:>12.4f}{r.verify_ms:>12.4f}"
            f"{r.valid_verified:>10}{r.invalid_rejected:>13}"
        )
    if out:
        click.echo(f"\nExporting benchmark into file {bench.export_bench(reports, out)}")
    if not all(r.correct for r in reports):
        _error("signature verification gave wrong verdicts")
        sys.exit(2)


@cli.command()
@click.option("--out", type=click.Path(dir_okay=False), help="Calibration file to write")
@click.option("--samples", type=int, default=50, show_default=True, help="Signatures measured per algorithm")
def calibrate(out, samples):
    """Measure key and signature lengths for SizeModel runs"""
    calibration = bench.measure_calibration(samples)
    path = sizemodel.save_calibration(calibration, out or sizemodel.default_calibration_path())
    for algorithm, sizes in sorted(calibration.sizes.items()):
        click.echo(f"  {algorithm}: public key {sizes.public_key_bytes} bytes, signature {sizes.signature_bytes} bytes")
    click.echo(f"\nCalibration written to {path}")


@cli.group()
def repo():
    """Inspect a persisted trust repository"""


@repo.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
def show(directory):
    """List subjects with trust level, depth, issuers and sub-keys"""
    repository = trustgraph.load(directory)
    assessment = repository.assessment()

    def order(fp):
        return (-assessment.level_of(fp), assessment.depth.get(fp, 99), fp)

    _heading(f"Repository of {repository.owner_fp.hex}")
    for fp in sorted(repository.records, key=order):
        record = repository.records[fp]
        level = assessment.level_of(fp)
        depth = assessment.depth.get(fp)
        colour = {TrustLevel.ULTIMATE: "green", TrustLevel.TRUSTED: "cyan", TrustLevel.KNOWN: "blue"}.get(level)
        click.echo(
            f"{fp.hex}  keyid {key_id(record.subject_key).hex}  "
            + click.style(f"{level.label:<8}", fg=colour)
            + f"  depth {depth if depth is not None else '-'}"
        )
        issuers = ", ".join(i.short() for i in sorted(record.certificates))
        click.echo(f"    certified by: {issuers or '-'}")
        for sub in trustgraph.subkeys_for(repository, fp, assessment):
            click.echo(f"    sub-key {sub.subkey_fp.short()} [{sub.app_tag}] issued at {sub.issued_at}")


@repo.command()
@click.argument("directory", type=click.Path(exists=True, file_okay=False))
def verify(directory):
    """Re-check every stored signature"""
    results = trustgraph.verify_repository(directory)
    failed = 0
    for path, ok, reason in results:
        if ok:
            click.echo(f"PASS {path}")
        else:
            failed += 1
            click.echo(click.style(f"FAIL {path}: {reason}", fg="red"))
    click.echo(f"\n{len(results) - failed} passed, {failed} failed")
    if failed:
        sys.exit(2)


@cli.command()
@click.option("--listen", metavar="HOST:PORT", help="Wait for the peer on this address")
@click.option("--connect", metavar="HOST:PORT", help="Connect to a listening peer")
@click.option("--loopback", "peer_home", type=click.Path(file_okay=False),
              help="Run both devices in this process; the peer lives in this directory")
@click.option("--home", default=_default_home, show_default="$SEALIGHTS_HOME or ./.sealights",
              type=click.Path(file_okay=False), help="Keystore and repository directory")
@click.option("--pin", prompt=True, hide_input=True, envvar="SEALIGHTS_PIN", help="Keystore PIN")
@click.option("--algo", type=click.Choice(sol_config.ALGORITHMS), default=sol_config.ECDSA_P256,
              show_default=True, help="Algorithm for a newly created device key")
@click.option("--no-color", is_flag=True, default=False, help="Plain fingerprints")
@click.option("--confirm", is_flag=True, default=False,
              help="With --loopback, ask the operator to compare the fingerprints")
@click.option("--timeout", type=float, default=120.0, show_default=True, help="Seconds to wait for the peer")
def demo(listen, connect, peer_home, home, pin, algo, no_color, confirm, timeout):
    """Handshake, register a sub-key and sync with a second device"""
    if sum(bool(x) for x in (listen, connect, peer_home)) != 1:
        raise click.UsageError("give exactly one of --listen, --connect or --loopback")
    config = TrustConfig(signaturealgorithm=algo)
    now = int(time.time())
    node = protocol.load_node(home, pin, config)
    click.echo(f"This device: {protocol.render_fingerprint(node.fp, not no_color)}")

    if peer_home:
        peer = protocol.load_node(peer_home, pin, config)
        left, right = socket.socketpair()
        oob = protocol.HonestComparator()
        local_oob = protocol.PromptComparator(color=not no_color) if confirm else oob
        with ThreadPoolExecutor(max_workers=2) as pool:
            mine = pool.submit(
                protocol.run_peer, node, protocol.TcpChannel(left), True, local_oob, now,
                _demo_subkey(node, algo), peer.fp,
            )
            theirs = pool.submit(
                protocol.run_peer, peer, protocol.TcpChannel(right), False, oob, now,
                _demo_subkey(peer, algo), node.fp,
            )
            done, _ = wait([mine, theirs], return_when=FIRST_EXCEPTION)
            if any(f.exception() for f in done):
                # unblock the side still waiting for a frame
                left.close()
                right.close()
            outcome, peer_outcome = mine.result(), theirs.result()
        left.close()
        right.close()
        _finish_demo(peer, peer_home, peer_outcome)
    else:
        if listen:
            host, port = _split_address(listen)
            click.echo(f"Waiting for the peer on {host}:{port} ..")
            channel = protocol.TcpChannel.accept(host, port, timeout)
        else:
            host, port = _split_address(connect)
            channel = protocol.TcpChannel.connect(host, port, timeout)
        try:
            outcome = protocol.run_peer(
                node, channel, bool(connect), protocol.PromptComparator(color=not no_color), now,
                _demo_subkey(node, algo),
            )
        finally:
            channel.close()
    _finish_demo(node, home, outcome)


def _demo_subkey(node, algo):
    own = node.repo.records[node.fp].subkeys.values()
    if any(s.app_tag == sol_config.DEMO_SUBKEY_APP_TAG for s in own):
        return None
    return keystore.generate_keypair(algo).public, sol_config.DEMO_SUBKEY_APP_TAG


def _finish_demo(node, home, outcome):
    trustgraph.persist(node.repo, Path(home) / "repository")
    level, depth = trustgraph.trust_of(node.repo, outcome.peer_fp)
    subkeys = trustgraph.subkeys_for(node.repo, outcome.peer_fp)
    click.echo(f"[{node.name}] peer {outcome.peer_fp.short()} is {level.label} (depth {depth})")
    click.echo(
        f"[{node.name}] sync merged {outcome.sync.items_merged} new items, "
        f"answered with {outcome.answered_records} records; "
        f"{outcome.bytes_sent} bytes sent, {outcome.bytes_received} received"
    )
    for sub in subkeys:
        click.echo(f"[{node.name}] peer sub-key {sub.subkey_fp.short()} [{sub.app_tag}]")


def main(argv=None) -> int:
    """Run the CLI and map failures to exit codes (1 usage, 2 runtime)."""
    try:
        code = cli.main(args=argv, prog_name="sealights.py", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        _error("aborted")
        return 2
    except InvalidConfig as e:
        if _DEBUG:
            raise
        _error(str(e))
        return 1
    except OoBRejected as e:
        if _DEBUG:
            raise
        _error(f"{e}; no certificates persisted")
        return 2
    except (SolError, OSError) as e:
        if _DEBUG:
            raise
        _error(str(e))
        return 2
    return code if isinstance(code, int) else 0


if __name__ == "__main__":
    sys.exit(main())
