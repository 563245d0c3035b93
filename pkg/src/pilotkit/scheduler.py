"""Slot scheduler: first-fit placement of tasks onto free core/GPU slots.

Two policies: continuous (first fit over nodes in index order) and tagged
(first use of a tag binds it to the nodes picked by continuous allocation;
later uses are pinned to exactly those nodes). Ties always break toward the
lowest node index, then the lowest slot index.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .core import BUSY, FREE, NodeList, PilotkitError, TaskDescription


class UnknownPlacement(PilotkitError):
    pass


class NoFit(Exception):
    """Not an error state: the task goes to the waiting list."""


@dataclass(frozen=True)
class NodeAssignment:
    node_index: int
    core_indices: tuple[int, ...]
    gpu_indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class Placement:
    task_uid: str
    assignments: tuple[NodeAssignment, ...]
    dvm_id: int | None = None

    @property
    def node_indices(self) -> tuple[int, ...]:
        return tuple(a.node_index for a in self.assignments)

    @property
    def total_cores(self) -> int:
        return sum(len(a.core_indices) for a in self.assignments)

    @property
    def total_gpus(self) -> int:
        return sum(len(a.gpu_indices) for a in self.assignments)

    def serialize(self) -> str:
        """Compact text form used in trace event details."""
        parts = []
        for a in self.assignments:
            cores = ",".join(str(i) for i in a.core_indices)
            gpus = ",".join(str(i) for i in a.gpu_indices)
            parts.append(f"{a.node_index}:{cores}:{gpus}")
        return ";".join(parts)

    @classmethod
    def deserialize(cls, task_uid: str, text: str, dvm_id: int | None = None) -> "Placement":
        assignments = []
        for part in text.split(";"):
            node_s, cores_s, gpus_s = part.split(":")
            assignments.append(NodeAssignment(
                node_index=int(node_s),
                core_indices=tuple(int(i) for i in cores_s.split(",") if i),
                gpu_indices=tuple(int(i) for i in gpus_s.split(",") if i),
            ))
        return cls(task_uid=task_uid, assignments=tuple(assignments), dvm_id=dvm_id)


class SlotMap:
    """Occupancy table over a NodeList plus the busy-placement ledger."""

    def __init__(self, node_list: NodeList):
        self.node_list = node_list
        self.busy: dict[str, Placement] = {}
        self.free_cores = [n.free_cores for n in node_list.nodes]
        self.free_gpus = [n.free_gpus for n in node_list.nodes]
        self.total_free_cores = sum(self.free_cores)
        self.total_free_gpus = sum(self.free_gpus)
        self.total_cores = self.total_free_cores
        self.total_gpus = self.total_free_gpus

    def apply(self, placement: Placement):
        if placement.task_uid in self.busy:
            raise PilotkitError(f"task {placement.task_uid!r} already placed")
        for a in placement.assignments:
            node = self.node_list.nodes[a.node_index]
            for c in a.core_indices:
                assert node.core_states[c] == FREE
                node.core_states[c] = BUSY
            for g in a.gpu_indices:
                assert node.gpu_states[g] == FREE
                node.gpu_states[g] = BUSY
            self.free_cores[a.node_index] -= len(a.core_indices)
            self.free_gpus[a.node_index] -= len(a.gpu_indices)
            self.total_free_cores -= len(a.core_indices)
            self.total_free_gpus -= len(a.gpu_indices)
        self.busy[placement.task_uid] = placement

    def release(self, placement: Placement):
        if placement.task_uid not in self.busy:
            raise UnknownPlacement(f"task {placement.task_uid!r} is not busy")
        for a in placement.assignments:
            node = self.node_list.nodes[a.node_index]
            for c in a.core_indices:
                node.core_states[c] = FREE
            for g in a.gpu_indices:
                node.gpu_states[g] = FREE
            self.free_cores[a.node_index] += len(a.core_indices)
            self.free_gpus[a.node_index] += len(a.gpu_indices)
            self.total_free_cores += len(a.core_indices)
            self.total_free_gpus += len(a.gpu_indices)
        del self.busy[placement.task_uid]

    def busy_slot_count(self) -> int:
        return sum(p.total_cores + p.total_gpus for p in self.busy.values())


def _free_indices(states: list[int], count: int) -> tuple[int, ...]:
    if count == 0:
        return ()
    out = []
    for i, s in enumerate(states):
        if s == FREE:
            out.append(i)
            if len(out) == count:
                break
    return tuple(out)


def allocate_continuous(td: TaskDescription, sm: SlotMap,
                        node_subset: list[int] | None = None) -> Placement:
    """First-fit placement; raises NoFit when no capacity is available.

    Non-MPI tasks take the first node (lowest index) with enough free cores
    and GPUs. MPI tasks greedily take free capacity from nodes in index
    order; a node contributes GPUs only if it also contributes cores.
    """
    indices = node_subset if node_subset is not None else range(len(sm.node_list.nodes))
    c_need, g_need = td.cores_per_task, td.gpus_per_task
    if not td.uses_mpi:
        for i in indices:
            if sm.free_cores[i] >= c_need and sm.free_gpus[i] >= g_need:
                node = sm.node_list.nodes[i]
                placement = Placement(
                    task_uid=td.uid,
                    assignments=(NodeAssignment(
                        node_index=i,
                        core_indices=_free_indices(node.core_states, c_need),
                        gpu_indices=_free_indices(node.gpu_states, g_need),
                    ),),
                )
                sm.apply(placement)
                return placement
        raise NoFit(td.uid)
    # MPI: greedy span over nodes in index order.
    if sm.total_free_cores < c_need or sm.total_free_gpus < g_need:
        raise NoFit(td.uid)
    assignments = []
    remaining_c, remaining_g = c_need, g_need
    for i in indices:
        if remaining_c == 0:
            break
        take_c = min(sm.free_cores[i], remaining_c)
        if take_c == 0:
            continue
        take_g = min(sm.free_gpus[i], remaining_g)
        node = sm.node_list.nodes[i]
        assignments.append(NodeAssignment(
            node_index=i,
            core_indices=_free_indices(node.core_states, take_c),
            gpu_indices=_free_indices(node.gpu_states, take_g),
        ))
        remaining_c -= take_c
        remaining_g -= take_g
    if remaining_c > 0 or remaining_g > 0:
        raise NoFit(td.uid)
    placement = Placement(task_uid=td.uid, assignments=tuple(assignments))
    sm.apply(placement)
    return placement


class TagRegistry:
    """Tag → node-index binding; first use of a tag binds it."""

    def __init__(self):
        self.bindings: dict[str, tuple[int, ...]] = {}


def allocate_tagged(td: TaskDescription, sm: SlotMap, tags: TagRegistry) -> Placement:
    tag = td.tag
    assert tag is not None
    bound = tags.bindings.get(tag)
    if bound is None:
        placement = allocate_continuous(td, sm)
        tags.bindings[tag] = placement.node_indices
        return placement
    return allocate_continuous(td, sm, node_subset=list(bound))


def release_slots(placement: Placement, sm: SlotMap):
    sm.release(placement)


@dataclass
class _Waiting:
    td: TaskDescription


class Scheduler:
    """FIFO waiting list plus first-fit allocation over a SlotMap.

    ``submit`` queues a task; ``rescan`` walks the waiting list in FIFO
    order placing every task that fits. Failed (cores, gpus) signatures are
    remembered within one rescan so dominated tasks are skipped in O(1),
    and the walk stops early once free capacity cannot fit any waiter.
    """

    def __init__(self, slot_map: SlotMap):
        self.slot_map = slot_map
        self.tags = TagRegistry()
        self.waiting: list[TaskDescription] = []
        self._waiting_core_counts: Counter[int] = Counter()

    def submit(self, td: TaskDescription):
        self.waiting.append(td)
        self._waiting_core_counts[td.cores_per_task] += 1

    def waiting_count(self) -> int:
        return len(self.waiting)

    def _min_waiting_cores(self) -> int:
        return min(self._waiting_core_counts) if self._waiting_core_counts else 0

    def try_allocate(self, td: TaskDescription) -> Placement:
        if td.tag is not None:
            return allocate_tagged(td, self.slot_map, self.tags)
        return allocate_continuous(td, self.slot_map)

    def rescan(self) -> list[tuple[TaskDescription, Placement]]:
        placed: list[tuple[TaskDescription, Placement]] = []
        if not self.waiting:
            return placed
        # Minimal failed (cores, gpus) frontiers, split by MPI capability.
        failed_nonmpi: list[tuple[int, int]] = []
        failed_mpi: list[tuple[int, int]] = []
        survivors: list[TaskDescription] = []
        sm = self.slot_map
        min_cores = self._min_waiting_cores()
        for pos, td in enumerate(self.waiting):
            if sm.total_free_cores < min_cores or sm.total_free_cores == 0:
                survivors.extend(self.waiting[pos:])
                break
            frontier = failed_mpi if td.uses_mpi else failed_nonmpi
            c, g = td.cores_per_task, td.gpus_per_task
            if td.tag is None and any(c >= fc and g >= fg for fc, fg in frontier):
                survivors.append(td)
                continue
            try:
                placement = self.try_allocate(td)
            except NoFit:
                if td.tag is None:
                    frontier.append((c, g))
                survivors.append(td)
                continue
            placed.append((td, placement))
            self._waiting_core_counts[c] -= 1
            if self._waiting_core_counts[c] == 0:
                del self._waiting_core_counts[c]
                if c == min_cores:
                    min_cores = self._min_waiting_cores()
        self.waiting = survivors
        return placed

    def complete(self, placement: Placement):
        release_slots(placement, self.slot_map)
