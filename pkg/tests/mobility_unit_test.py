import unittest, sys, os, math

import numpy as np

# Get the parent directory
parent_dir = os.path.dirname(os.path.dirname(os.path.realpath(__file__)))

# Add the parent directory to sys.path
sys.path.append(parent_dir)

from modules.mobility import *


def brute_force_contacts(positions, tx_range):
    return {
        (i, j)
        for i in range(len(positions))
        for j in range(i + 1, len(positions))
        if math.dist(positions[i], positions[j]) <= tx_range
    }


class TestRandomWaypoint(unittest.TestCase):
    def setUp(self):
        self.world = World(100.0, 100.0, 0.5, 1.5)
        self.rng = np.random.default_rng(1)

    def test_zero_speed_stands_still(self):
        world = World(100.0, 100.0, 0.0, 0.0)
        state = place(world, self.rng)
        for _ in range(50):
            moved = rwp_step(state, 1.0, self.rng, world)
            self.assertEqual(moved.position, state.position)
            state = moved

    def test_displacement_bounded_by_speed(self):
        state = place(self.world, self.rng)
        for _ in range(2000):
            moved = rwp_step(state, 1.0, self.rng, self.world)
            self.assertLessEqual(math.dist(state.position, moved.position), state.speed * 1.0 + 1e-9)
            self.assertTrue(self.world.contains(moved.position))
            self.assertGreaterEqual(moved.speed, 0.5)
            self.assertLessEqual(moved.speed, 1.5)
            state = moved

    def test_arrival_snaps_to_waypoint(self):
        state = MotionState((10.0, 10.0), (10.5, 10.0), 1.0)
        moved = rwp_step(state, 1.0, self.rng, self.world)
        self.assertEqual(moved.position, (10.5, 10.0))
        self.assertTrue(self.world.contains(moved.waypoint))

    def test_step_must_be_positive(self):
        with self.assertRaises(ValueError):
            rwp_step(place(self.world, self.rng), 0, self.rng, self.world)

    def test_same_seed_same_track(self):
        tracks = []
        for _ in range(2):
            rng = np.random.default_rng(9)
            state = place(self.world, rng)
            for _ in range(100):
                state = rwp_step(state, 1.0, rng, self.world)
            tracks.append(state)
        self.assertEqual(tracks[0], tracks[1])

    def test_density_concentrates_in_centre(self):
        world = World(100.0, 100.0, 1.0, 2.0)
        rng = np.random.default_rng(3)
        states = [place(world, rng) for _ in range(300)]
        central = samples = 0
        for step in range(1500):
            states = [rwp_step(s, 1.0, rng, world) for s in states]
            if step >= 1000:
                samples += len(states)
                central += sum(1 for s in states if 25 <= s.position[0] <= 75 and 25 <= s.position[1] <= 75)
        # the central square covers a quarter of the area
        self.assertGreater(central / samples, 0.3)


class TestContacts(unittest.TestCase):
    def test_matches_brute_force(self):
        rng = np.random.default_rng(5)
        for tx_range in (1.0, 7.5, 10.0, 40.0):
            positions = [(float(x), float(y)) for x, y in rng.uniform(0, 200, size=(200, 2))]
            self.assertEqual(contacts(positions, tx_range), brute_force_contacts(positions, tx_range))

    def test_grid_aligned_positions(self):
        positions = [(float(x), float(y)) for x in range(0, 50, 5) for y in range(0, 50, 5)]
        self.assertEqual(contacts(positions, 5.0), brute_force_contacts(positions, 5.0))

    def test_range_is_inclusive(self):
        self.assertEqual(contacts([(0.0, 0.0), (10.0, 0.0)], 10.0), {(0, 1)})
        self.assertEqual(contacts([(0.0, 0.0), (10.0001, 0.0)], 10.0), set())

    def test_pairs_are_ordered(self):
        pairs = contacts([(5.0, 5.0), (0.0, 0.0), (1.0, 1.0)], 10.0)
        self.assertEqual(pairs, {(0, 1), (0, 2), (1, 2)})

    def test_empty_and_single(self):
        self.assertEqual(contacts([], 10.0), set())
        self.assertEqual(contacts([(1.0, 1.0)], 10.0), set())


if __name__ == "__main__":
    unittest.main()
