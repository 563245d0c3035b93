"""Scheduler tests, including equivalence against an independent
brute-force first-fit oracle that works directly on slot-state copies."""

import random

import pytest
from hypothesis import given, settings, strategies as st

from pilotkit.core import FREE, build_node_list
from pilotkit.scheduler import (
    NoFit,
    Placement,
    Scheduler,
    SlotMap,
    TagRegistry,
    UnknownPlacement,
    allocate_continuous,
    allocate_tagged,
    release_slots,
)

from conftest import task


# --- independent oracle -------------------------------------------------
# Re-derives first-fit placement by scanning raw slot states; shares no
# code or caching with the production allocator.

def oracle_allocate(cores, gpus, mpi, node_states):
    """node_states: list of (core_list, gpu_list); mutated on success.
    Returns [(node, core_idx_list, gpu_idx_list)] or None."""
    def free(states, n):
        idx = [i for i, s in enumerate(states) if s == 0]
        return idx[:n] if len(idx) >= n else None

    if not mpi:
        for ni, (cs, gs) in enumerate(node_states):
            ci = free(cs, cores)
            gi = free(gs, gpus)
            if ci is not None and gi is not None:
                for i in ci:
                    cs[i] = 1
                for i in gi:
                    gs[i] = 1
                return [(ni, ci, gi)]
        return None
    total_free_c = sum(s == 0 for cs, _ in node_states for s in cs)
    total_free_g = sum(s == 0 for _, gs in node_states for s in gs)
    if total_free_c < cores or total_free_g < gpus:
        return None
    plan = []
    rem_c, rem_g = cores, gpus
    for ni, (cs, gs) in enumerate(node_states):
        if rem_c == 0:
            break
        ci = [i for i, s in enumerate(cs) if s == 0][:rem_c]
        if not ci:
            continue
        gi = [i for i, s in enumerate(gs) if s == 0][:rem_g]
        plan.append((ni, ci, gi))
        rem_c -= len(ci)
        rem_g -= len(gi)
    if rem_c or rem_g:
        return None
    for ni, ci, gi in plan:
        for i in ci:
            node_states[ni][0][i] = 1
        for i in gi:
            node_states[ni][1][i] = 1
    return plan


def snapshot(sm):
    return [(list(n.core_states), list(n.gpu_states)) for n in sm.node_list.nodes]


def placement_as_plan(p):
    return [(a.node_index, list(a.core_indices), list(a.gpu_indices))
            for a in p.assignments]


# --- examples -----------------------------------------------------------

class TestContinuous:
    def test_mpi_spans_two_nodes_first_fit(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=2, cores=4)))
        p = allocate_continuous(task("t", cores=6, mpi=True), sm)
        assert placement_as_plan(p) == [(0, [0, 1, 2, 3], []), (1, [0, 1], [])]

    def test_nofit_when_partially_busy(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=1, cores=4)))
        allocate_continuous(task("busy", cores=2), sm)
        with pytest.raises(NoFit):
            allocate_continuous(task("t", cores=4), sm)

    def test_non_mpi_single_assignment(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=3, cores=4, gpus=1)))
        p = allocate_continuous(task("t", cores=2, gpus=1), sm)
        assert len(p.assignments) == 1

    def test_gpu_on_same_node_as_cores(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=2, cores=4, gpus=2)))
        p = allocate_continuous(task("t", cores=3, gpus=2, mpi=True), sm)
        core_nodes = {a.node_index for a in p.assignments if a.core_indices}
        gpu_nodes = {a.node_index for a in p.assignments if a.gpu_indices}
        assert gpu_nodes <= core_nodes

    def test_lowest_index_tie_break(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=2, cores=4)))
        p1 = allocate_continuous(task("a", cores=1), sm)
        p2 = allocate_continuous(task("b", cores=1), sm)
        assert p1.assignments[0].node_index == 0
        assert p2.assignments[0].core_indices == (1,)


class TestTagged:
    def test_first_use_binds_then_reuses(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=2, cores=4)))
        tags = TagRegistry()
        p1 = allocate_tagged(task("a", cores=2, tag="A"), sm, tags)
        assert p1.assignments[0].node_index == 0
        p2 = allocate_tagged(task("b", cores=2, tag="A"), sm, tags)
        assert p2.assignments[0].node_index == 0
        assert p2.assignments[0].core_indices == (2, 3)

    def test_pinned_nofit_despite_free_capacity(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=2, cores=4)))
        tags = TagRegistry()
        allocate_tagged(task("a", cores=4, tag="A"), sm, tags)
        with pytest.raises(NoFit):
            allocate_tagged(task("b", cores=1, tag="A"), sm, tags)
        assert sm.free_cores[1] == 4

    def test_distinct_tags_get_distinct_nodes(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=2, cores=4)))
        tags = TagRegistry()
        pa = allocate_tagged(task("a", cores=4, tag="A"), sm, tags)
        pb = allocate_tagged(task("b", cores=4, tag="B"), sm, tags)
        assert set(pa.node_indices).isdisjoint(pb.node_indices)


class TestRelease:
    def test_allocate_release_restores_state(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=2, cores=4, gpus=1)))
        before = snapshot(sm)
        p = allocate_continuous(task("t", cores=3, gpus=1), sm)
        release_slots(p, sm)
        assert snapshot(sm) == before
        assert sm.busy == {}

    def test_double_release(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot()))
        p = allocate_continuous(task("t"), sm)
        release_slots(p, sm)
        with pytest.raises(UnknownPlacement):
            release_slots(p, sm)

    def test_conservation(self, sim_pilot):
        sm = SlotMap(build_node_list(sim_pilot(nodes=3, cores=4, gpus=2)))
        rng = random.Random(0)
        placements = []
        for i in range(30):
            if placements and rng.random() < 0.4:
                release_slots(placements.pop(rng.randrange(len(placements))), sm)
            else:
                try:
                    placements.append(allocate_continuous(
                        task(f"t{i}", cores=rng.randint(1, 4),
                             gpus=rng.randint(0, 2)), sm))
                except NoFit:
                    pass
            busy = sum(1 for n in sm.node_list.nodes
                       for s in n.core_states + n.gpu_states if s != FREE)
            assert busy == sm.busy_slot_count()


class TestSchedulerLoop:
    def test_32_tasks_on_8_cores_runs_in_4_generations(self, sim_pilot):
        sched = Scheduler(SlotMap(build_node_list(sim_pilot(nodes=2, cores=4))))
        for i in range(32):
            sched.submit(task(f"t{i}"))
        generations = 0
        while sched.waiting or sched.slot_map.busy:
            placed = sched.rescan()
            if placed:
                generations += 1
                assert len(placed) <= 8
            for _, p in placed:
                pass
            for p in list(sched.slot_map.busy.values()):
                sched.complete(p)
        assert generations == 4

    def test_exact_fit_zero_wait(self, sim_pilot):
        sched = Scheduler(SlotMap(build_node_list(sim_pilot(nodes=1, cores=4))))
        sched.submit(task("t", cores=4))
        assert len(sched.rescan()) == 1
        assert sched.waiting_count() == 0

    def test_fifo_rescan_places_later_smaller_tasks(self, sim_pilot):
        sched = Scheduler(SlotMap(build_node_list(sim_pilot(nodes=1, cores=4))))
        sched.submit(task("big", cores=4))
        sched.submit(task("small", cores=1))
        placed = sched.rescan()
        assert [td.uid for td, _ in placed] == ["big"]
        sched.submit(task("tiny", cores=0 + 1))
        assert sched.rescan() == []
        sched.complete(sched.slot_map.busy["big"])
        placed = sched.rescan()
        assert [td.uid for td, _ in placed] == ["small", "tiny"]

    def test_determinism(self, sim_pilot):
        def run():
            sched = Scheduler(SlotMap(build_node_list(sim_pilot(nodes=2, cores=4))))
            rng = random.Random(7)
            seq = []
            for i in range(40):
                sched.submit(task(f"t{i}", cores=rng.randint(1, 4)))
            while sched.waiting or sched.slot_map.busy:
                for td, p in sched.rescan():
                    seq.append((td.uid, p.serialize()))
                busy = sorted(sched.slot_map.busy.values(), key=lambda p: p.task_uid)
                if busy:
                    sched.complete(busy[0])
            return seq
        assert run() == run()


# --- oracle equivalence -------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.data())
def test_oracle_equivalence_randomized(data):
    nodes = data.draw(st.integers(1, 6))
    cores = data.draw(st.integers(1, 8))
    gpus = data.draw(st.integers(0, 2))
    n_tasks = data.draw(st.integers(1, 20))
    from pilotkit.core import Fabric, PilotDescription
    pd = PilotDescription(uid="p", fabric=Fabric.SIMULATED, nodes=nodes,
                          cores_per_node=cores, gpus_per_node=gpus)
    sm = SlotMap(build_node_list(pd))
    mirror = snapshot(sm)
    for i in range(n_tasks):
        mpi = data.draw(st.booleans())
        c = data.draw(st.integers(1, cores if not mpi else nodes * cores))
        g = data.draw(st.integers(0, gpus if not mpi else nodes * gpus))
        td = task(f"t{i}", cores=c, gpus=g, mpi=mpi)
        expected = oracle_allocate(c, g, mpi, mirror)
        try:
            got = placement_as_plan(allocate_continuous(td, sm))
        except NoFit:
            got = None
        assert got == expected
    assert snapshot(sm) == mirror
