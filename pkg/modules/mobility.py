"""Random-waypoint motion and proximity contact detection."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence, Set, Tuple

import numpy as np

Position = Tuple[float, float]


@dataclass(frozen=True)
class World:
    width_m: float
    height_m: float
    speed_min_mps: float
    speed_max_mps: float

    def random_point(self, rng: np.random.Generator) -> Position:
        return (float(rng.uniform(0.0, self.width_m)), float(rng.uniform(0.0, self.height_m)))

    def random_speed(self, rng: np.random.Generator) -> float:
        if self.speed_min_mps == self.speed_max_mps:
            return float(self.speed_min_mps)
        return float(rng.uniform(self.speed_min_mps, self.speed_max_mps))

    def contains(self, p: Position) -> bool:
        return 0.0 <= p[0] <= self.width_m and 0.0 <= p[1] <= self.height_m


@dataclass
class MotionState:
    position: Position
    waypoint: Position
    speed: float


def place(world: World, rng: np.random.Generator) -> MotionState:
    """Uniform start position with a first waypoint and speed."""
    position = world.random_point(rng)
    return MotionState(position, world.random_point(rng), world.random_speed(rng))


def rwp_step(state: MotionState, dt: float, rng: np.random.Generator, world: World) -> MotionState:
    """Advance one node by `dt` seconds. Arrival at the waypoint ends the
    step there and draws the next waypoint and speed (no pause)."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    (x, y), (wx, wy) = state.position, state.waypoint
    dx, dy = wx - x, wy - y
    distance = math.hypot(dx, dy)
    reach = state.speed * dt
    if distance <= reach:
        return MotionState((wx, wy), world.random_point(rng), world.random_speed(rng))
    ratio = reach / distance
    return MotionState((x + dx * ratio, y + dy * ratio), state.waypoint, state.speed)


def _cell(p: Position, size: float) -> Tuple[int, int]:
    return int(p[0] // size), int(p[1] // size)


def contacts(positions: Sequence[Position], tx_range_m: float) -> Set[Tuple[int, int]]:
    """Index pairs (i < j) whose distance is at most `tx_range_m`.

    Nodes are bucketed into a uniform grid of cell size `tx_range_m`; only the
    3x3 block of cells around a node can hold its neighbours."""
    pairs: Set[Tuple[int, int]] = set()
    if len(positions) < 2:
        return pairs
    limit = tx_range_m * tx_range_m
    if tx_range_m <= 0:
        return {
            (i, j)
            for i in range(len(positions))
            for j in range(i + 1, len(positions))
            if positions[i] == positions[j]
        }
    grid: Dict[Tuple[int, int], List[int]] = defaultdict(list)
    for index, p in enumerate(positions):
        grid[_cell(p, tx_range_m)].append(index)
    for (cx, cy), members in grid.items():
        for ox in (-1, 0, 1):
            for oy in (-1, 0, 1):
                neighbours = grid.get((cx + ox, cy + oy))
                if not neighbours:
                    continue
                for i in members:
                    xi, yi = positions[i]
                    for j in neighbours:
                        if j <= i:
                            continue
                        xj, yj = positions[j]
                        if (xi - xj) ** 2 + (yi - yj) ** 2 <= limit:
                            pairs.add((i, j))
    return pairs
