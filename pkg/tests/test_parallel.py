"""Simulated-rank machinery: decomposition validity, message protocol,
distribution transparency, reduction avoidance, and the two baselines."""

import numpy as np
import pytest

from treeparticles.grid import ParticleBlock, Spacetree, build_uniform_tree
from treeparticles.movers import MoverError, PidtMover, PitMover
from treeparticles.parallel import (
    BaselineHarness,
    HarnessFault,
    check_coloring,
    decompose,
    make_harness,
    run_parallel_step,
    sfc_cut_sort,
    sieve_sort,
)
from treeparticles.particles import SamplingConfig, sample_scenario_particles


def sample(dim=2, n=3000, seed=0, vscale=1.0):
    blk = sample_scenario_particles(
        SamplingConfig(dim=dim, density=n), np.random.default_rng(seed)
    )
    blk.v *= vscale
    return blk


def run_harness(mover, ranks, block, dim=2, levels=2, steps=10, dt=0.02, **kw):
    tree = build_uniform_tree(dim, levels)
    h = make_harness(tree, ranks, mover, **kw)
    h.seed(block.copy())
    h.settle()
    for _ in range(steps):
        stats, msgs = h.step(dt)
    return h, stats, msgs


class TestDecompose:
    def test_single_rank(self):
        tree = build_uniform_tree(2, 2)
        col = decompose(tree, 1)
        assert set(col.col.values()) == {0}
        assert col.master_of == {}

    def test_three_way_example(self):
        tree = build_uniform_tree(2, 2)
        col = decompose(tree, 3)
        sizes = {r: 0 for r in range(3)}
        for cell in tree.leaves():
            sizes[col.col[cell.id]] += 1
        assert sizes == {0: 27, 1: 27, 2: 27}
        assert col.master_of == {1: 0, 2: 0}
        assert check_coloring(tree, col)

    @pytest.mark.parametrize("ranks", [2, 3, 4, 5, 9, 27])
    def test_fuzz_validity(self, ranks):
        rng = np.random.default_rng(ranks)
        tree = build_uniform_tree(2, 1)
        for cell in list(tree.leaves()):
            if rng.random() < 0.6:
                tree.refine(cell.id)
        col = decompose(tree, ranks)
        assert check_coloring(tree, col)

    def test_too_many_ranks_rejected(self):
        tree = Spacetree(dim=2)
        with pytest.raises(HarnessFault):
            decompose(tree, 2)

    def test_broken_coloring_detected(self):
        tree = build_uniform_tree(2, 2)
        col = decompose(tree, 3)
        # splitting a rank's leaf run breaks contiguity
        moved = [cid for cid, r in col.col.items() if r == 1 and cid[0] == 2][0]
        col.col[moved] = 2
        tree.cells[moved].rank = 2
        assert not check_coloring(tree, col)


class TestDistributionTransparency:
    @pytest.mark.parametrize("mover", ["pit", "pidt", "rapidt"])
    def test_state_bitwise_identical_across_rank_counts(self, mover):
        block = sample()
        ref = None
        for ranks in (1, 4, 9):
            h, _, _ = run_harness(mover, ranks, block, dt=0.3, verify=True)
            g = h.gather_particles()
            if ref is None:
                ref = g
            else:
                assert np.array_equal(ref.x, g.x)
                assert np.array_equal(ref.v, g.v)

    def test_linkedcell_across_rank_counts(self):
        block = sample(vscale=0.1)
        ref = None
        for ranks in (1, 4, 9):
            h, _, _ = run_harness("linkedcell", ranks, block, dt=0.5)
            g = h.gather_particles()
            if ref is None:
                ref = g
            else:
                assert np.array_equal(ref.x, g.x)
                assert np.array_equal(ref.v, g.v)

    def test_settled_placement_identical(self):
        block = sample(seed=5)
        snaps = []
        for ranks in (1, 4):
            h, _, _ = run_harness("pidt", ranks, block, dt=0.3)
            h.settle()
            snaps.append(h.placement_snapshot())
        assert snaps[0] == snaps[1]

    def test_single_rank_sends_nothing(self):
        block = sample(seed=6)
        h, _, msgs = run_harness("pidt", 1, block)
        assert sum(msgs.envelopes.values()) == 0

    def test_async_delivery_order_independent(self):
        block = sample(seed=7)
        h_ref, _, _ = run_harness("pidt", 4, block, dt=0.3)
        ref = h_ref.gather_particles()
        h_shuf, _, _ = run_harness(
            "pidt", 4, block, dt=0.3, shuffle_async=np.random.default_rng(99)
        )
        out = h_shuf.gather_particles()
        assert np.array_equal(ref.x, out.x) and np.array_equal(ref.v, out.v)

    def test_no_replication_invariant(self):
        block = sample(seed=8)
        h, _, _ = run_harness("pidt", 9, block, dt=0.5)
        g = h.gather_particles()  # raises on duplicates
        assert len(g) == len(block)


class TestMessages:
    def test_pidt_capped_velocities_no_lift_payloads(self):
        block = sample(seed=9, vscale=0.05)
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 4, "pidt")
        deployed = sum(
            len(roots) for r, roots in h.coloring.local_roots.items() if r != 0
        )
        h.seed(block.copy())
        h.settle()
        boundary_seen = 0
        for _ in range(10):
            _, msgs = h.step(0.02)
            assert msgs.envelopes["particleLift"] == 0
            assert msgs.envelopes["startup"] == deployed
            assert msgs.envelopes["reduction"] == deployed
            boundary_seen += msgs.envelopes["boundaryParticles"]
        assert boundary_seen > 0  # crossers at rank boundaries do exchange

    def test_message_trace_dump(self, tmp_path):
        block = sample(seed=10)
        h, _, _ = run_harness("pit", 4, block, steps=3, dt=0.3)
        path = tmp_path / "trace.txt"
        h.dump_message_trace(path)
        lines = path.read_text().strip().split("\n")
        assert lines
        step, phase, kind, src, dst, count = lines[0].split()
        assert kind in ("startup", "particleDrop", "reduction", "particleLift",
                        "boundaryParticles", "notification")

    def test_run_parallel_step_entry_point(self):
        block = sample(seed=11)
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 4, "pit")
        deployed = sum(
            len(roots) for r, roots in h.coloring.local_roots.items() if r != 0
        )
        h.seed(block.copy())
        stats, msgs = run_parallel_step(h, h.mover, 0.05)
        assert msgs.envelopes["startup"] == deployed


class TestReductionAvoidance:
    def build(self, vscale=0.01, ranks=9):
        block = sample(seed=12, vscale=vscale)
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, ranks, "rapidt", verify=True)
        h.seed(block.copy())
        h.settle()  # primes the velocity bounds
        return h

    def test_slow_particles_skip_every_reduction(self):
        h = self.build()
        for _ in range(5):
            _, msgs = h.step(0.01)
            assert msgs.envelopes["reduction"] == 0
            assert msgs.envelopes["particleLift"] == 0
            assert msgs.envelopes["notification"] == 8
        assert all(v is False for v in h.reduction_skip_map.values())

    def test_fast_particle_reenables_its_channel(self):
        # dt large enough that the fast particle could actually lift out:
        # 2 * 3.0 * 0.1 = 0.6 exceeds the deployed cell width 1/3
        h = self.build()
        h.step(0.1)
        fast = ParticleBlock(
            np.array([999999]), np.array([[0.5, 0.5]]), np.array([[3.0, 2.0]])
        )
        h.seed(fast)
        h.step(0.1)  # bound report catches the newcomer at wrap-up
        _, msgs = h.step(0.1)
        assert msgs.envelopes["reduction"] >= 1
        expected = {w for w, e in h.reduction_skip_map.items() if e}
        assert expected  # its owner's channel is live again

    def test_rapidt_dominated_by_pidt(self):
        block = sample(seed=13)
        for dt in (0.01, 0.2):
            tree = build_uniform_tree(2, 2)
            hp = make_harness(tree, 9, "pidt")
            hp.seed(block.copy()); hp.settle()
            tree2 = build_uniform_tree(2, 2)
            hr = make_harness(tree2, 9, "rapidt")
            hr.seed(block.copy()); hr.settle()
            for _ in range(5):
                _, mp = hp.step(dt)
                _, mr = hr.step(dt)
                assert mr.envelopes["particleLift"] <= mp.envelopes["particleLift"]
                assert mr.envelopes["reduction"] <= mp.envelopes["reduction"]

    def test_mirror_inconsistency_faults(self):
        h = self.build()
        h.step(0.01)
        cid = next(iter(h.pending_vmax_worker))
        h.pending_vmax_worker[cid] = 42.0
        with pytest.raises(HarnessFault):
            h.step(0.01)

    def test_stale_bound_hard_error(self):
        block = ParticleBlock(
            np.array([1]), np.array([[0.5, 0.15]]), np.array([[3.0, 2.0]])
        )
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 9, "rapidt")
        h.seed(block)
        h.settle()
        for cid in list(h.pending_vmax_master):
            h.pending_vmax_master[cid] = 0.0
            h.pending_vmax_worker[cid] = 0.0
        with pytest.raises(MoverError):
            h.step(0.3)


class TestBaselines:
    def serial_pit_reference(self, block, steps, dt):
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 1, "pit")
        h.seed(block.copy())
        h.settle()
        for _ in range(steps):
            h.step(dt)
        return h

    @pytest.mark.parametrize("mode", ["sfc", "sieve"])
    def test_matches_serial_pit(self, mode):
        block = sample(seed=14)
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 4, mode)
        h.seed(block.copy())
        h.settle()
        for _ in range(10):
            h.step(0.3)
        ref = self.serial_pit_reference(block, 10, 0.3)
        g, gr = h.gather_particles(), ref.gather_particles()
        assert np.array_equal(g.x, gr.x) and np.array_equal(g.v, gr.v)
        h.settle(); ref.settle()
        assert h.placement_snapshot() == ref.placement_snapshot()

    def test_sfc_notification_floor(self):
        # no escapees: every ordered pair still gets an explicit notification
        block = sample(seed=15, vscale=0.0)
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 4, "sfc")
        h.seed(block.copy())
        h.settle()
        _, msgs = h.step(0.1)
        assert msgs.envelopes["notification"] == 12
        assert msgs.envelopes["boundaryParticles"] == 0

    def test_sfc_tunneler_single_direct_message(self):
        # one fast particle crossing several rank domains: one direct send
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 4, "sfc")
        blk = ParticleBlock(
            np.array([0]), np.array([[0.05, 0.05]]), np.array([[0.85, 0.0]])
        )
        h.seed(blk)
        h.settle()
        _, msgs = h.step(1.0)
        assert msgs.envelopes["boundaryParticles"] == 1
        assert msgs.payload["boundaryParticles"] == 1

    def test_sieve_protocol_floor_and_carry(self):
        # empty run: each origin's buffer still makes numRanks-1 hops
        block = sample(seed=16, vscale=0.0)
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 4, "sieve")
        h.seed(block.copy())
        h.settle()
        _, msgs = h.step(0.1)
        assert msgs.envelopes["sievePayload"] == 4 * 3
        assert msgs.payload["sievePayload"] == 0

    def test_sieve_carries_to_cyclic_predecessor(self):
        tree = build_uniform_tree(2, 2)
        col = decompose(tree, 4)
        # place one particle in rank 1's domain moving into rank 0's domain
        root1 = col.local_roots[1][0]
        cell = tree.cells[root1]
        x0 = cell.lo + 0.01
        blk = ParticleBlock(np.array([0]), np.array([x0]), np.array([[-0.5, -0.5]]))
        h = BaselineHarness(tree, col, "sieve")
        h.seed(blk)
        h.settle()
        _, msgs = h.step(0.5)
        carried = [m for m in h.message_log
                   if m.kind == "sievePayload" and m.count > 0]
        assert len(carried) == 3  # full ring minus the origin hop

    def test_wrong_entry_point_rejected(self):
        tree = build_uniform_tree(2, 2)
        h = make_harness(tree, 4, "sfc")
        with pytest.raises(HarnessFault):
            sieve_sort(h, 0.1)
        h2 = make_harness(build_uniform_tree(2, 2), 4, "sieve")
        with pytest.raises(HarnessFault):
            sfc_cut_sort(h2, 0.1)
