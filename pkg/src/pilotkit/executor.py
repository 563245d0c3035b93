"""Executor-side machinery: DVM partitioning, launch commands, local spawn.

The local fabric spawns real child processes; the simulated fabric submits
tasks to latency-modeled DVM launchers (see :mod:`pilotkit.simulator`).
"""

from __future__ import annotations

import os
import subprocess
import time
import zlib
from dataclasses import dataclass, field
from enum import Enum

from .core import LatencyModel, NodeList, PilotkitError, TaskDescription, TaskKind
from .scheduler import Placement


class SpawnFailure(PilotkitError):
    pass


class NoReadyDvm(PilotkitError):
    pass


class UnsupportedKind(PilotkitError):
    pass


class DvmState(str, Enum):
    BOOTING = "booting"
    READY = "ready"
    FAILED = "failed"
    DOWN = "down"


@dataclass
class Dvm:
    id: int
    node_indices: tuple[int, ...]
    state: DvmState = DvmState.BOOTING
    latency_model: LatencyModel = field(default_factory=LatencyModel)
    inflight: int = 0


def partition_dvms(node_list: NodeList, max_nodes_per_dvm: int,
                   latency_model: LatencyModel | None = None) -> list[Dvm]:
    """Partition nodes into ceil(n/max) DVMs of consecutive index ranges."""
    if max_nodes_per_dvm < 1:
        raise ValueError("max_nodes_per_dvm must be >= 1")
    lm = latency_model or LatencyModel()
    n = len(node_list.nodes)
    dvms = []
    for i, start in enumerate(range(0, n, max_nodes_per_dvm)):
        stop = min(start + max_nodes_per_dvm, n)
        dvms.append(Dvm(id=i, node_indices=tuple(range(start, stop)), latency_model=lm))
    return dvms


class DvmSelector:
    """Round-robin or tag-based selection over ready DVMs."""

    def __init__(self, dvms: list[Dvm]):
        self.dvms = dvms
        self._rr = 0

    def ready(self) -> list[Dvm]:
        return [d for d in self.dvms if d.state == DvmState.READY]

    def select(self, tag: str | None, policy: str = "round_robin") -> Dvm:
        ready = self.ready()
        if not ready:
            raise NoReadyDvm("no DVM in ready state")
        if policy == "tagged" and tag is not None:
            idx = zlib.crc32(tag.encode()) % len(ready)
            return ready[idx]
        dvm = ready[self._rr % len(ready)]
        self._rr += 1
        return dvm

    def select_excluding(self, exclude_id: int) -> Dvm:
        ready = [d for d in self.ready() if d.id != exclude_id]
        if not ready:
            raise NoReadyDvm("no DVM left to retry on")
        dvm = ready[self._rr % len(ready)]
        self._rr += 1
        return dvm


@dataclass(frozen=True)
class CommandSpec:
    program: str
    args: tuple[str, ...]
    env: tuple[tuple[str, str], ...]
    pin: str  # human-readable slot pin description


def build_launch_command(td: TaskDescription, placement: Placement) -> CommandSpec:
    """Derive the deterministic launch command for an executable task."""
    if td.kind != TaskKind.EXECUTABLE:
        raise UnsupportedKind(f"task {td.uid!r} is not an executable task")
    cores = [str(c) for a in placement.assignments for c in a.core_indices]
    gpus = [str(g) for a in placement.assignments for g in a.gpu_indices]
    env = dict(td.environment)
    env["PILOTKIT_TASK_ID"] = td.uid
    env["PILOTKIT_CORES"] = ",".join(cores)
    env["PILOTKIT_GPUS"] = ",".join(gpus)
    return CommandSpec(
        program=td.executable,
        args=tuple(td.arguments),
        env=tuple(sorted(env.items())),
        pin=placement.serialize(),
    )


@dataclass
class CompletionRecord:
    task_uid: str
    exit_code: int
    start_ts: float
    stop_ts: float
    error: str | None = None


def spawn_local(cmd: CommandSpec, task_uid: str, cwd: str | None = None,
                stdout_path: str | None = None, stderr_path: str | None = None,
                clock=None, register=None) -> CompletionRecord:
    """Run a child process to completion and capture its exit code.

    Raises SpawnFailure when the program cannot be started at all. The
    optional ``register`` callback receives the Popen handle so the caller
    can terminate the child on cancellation.
    """
    now = clock if clock is not None else time.monotonic
    env = dict(os.environ)
    env.update(dict(cmd.env))
    out_fh = open(stdout_path, "wb") if stdout_path else subprocess.DEVNULL
    err_fh = open(stderr_path, "wb") if stderr_path else subprocess.DEVNULL
    start = now()
    try:
        proc = subprocess.Popen(
            [cmd.program, *cmd.args], env=env, cwd=cwd, stdout=out_fh, stderr=err_fh)
    except OSError as exc:
        raise SpawnFailure(f"task {task_uid!r}: cannot spawn {cmd.program!r}: {exc}") from exc
    finally:
        for fh in (out_fh, err_fh):
            if hasattr(fh, "close"):
                fh.close()
    if register is not None:
        register(proc)
    exit_code = proc.wait()
    stop = now()
    return CompletionRecord(task_uid=task_uid, exit_code=exit_code, start_ts=start, stop_ts=stop)


def completion_message(rec: CompletionRecord, state: str) -> dict:
    """Structured completion payload for the completions channel."""
    return {
        "task_uid": rec.task_uid,
        "exit_code": rec.exit_code,
        "state": state,
        "start_ts": rec.start_ts,
        "stop_ts": rec.stop_ts,
        "error": rec.error,
    }
