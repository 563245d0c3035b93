"""Local-fabric agent: pull tasks in bulk, stage data, schedule, execute.

The agent runs in its own thread; executable tasks become child processes,
function tasks run callables from FUNCTION_REGISTRY on executor threads.
All coupling with the client side goes through bus channels.
"""

from __future__ import annotations

import os
import shutil
import threading
import time
from dataclasses import dataclass, field

from . import bus
from .core import (
    Fabric,
    PilotDescription,
    Task,
    TaskDescription,
    TaskKind,
    TaskState,
    ValidationError,
    build_node_list,
    validate_task_description,
)
from .executor import (
    CompletionRecord,
    SpawnFailure,
    build_launch_command,
    completion_message,
    spawn_local,
)
from .scheduler import Scheduler, SlotMap
from .tracer import Tracer

CANCEL_GRACE_S = 5.0


@dataclass
class AgentConfig:
    pilot: PilotDescription
    bulk_size: int = 1024
    executor_count: int = 1
    staging_root: str = ""
    dvm_policy: str = "round_robin"

    def __post_init__(self):
        if self.bulk_size < 1:
            raise ValidationError("bulk_size must be >= 1")
        if self.executor_count < 1:
            raise ValidationError("executor_count must be >= 1")


class FnContext:
    """Execution context handed to function tasks."""

    def __init__(self, td: TaskDescription, hub: bus.MessageHub, tracer: Tracer,
                 cancel: threading.Event, sandbox: str):
        self.td = td
        self.args = list(td.arguments)
        self.hub = hub
        self.tracer = tracer
        self.cancel = cancel
        self.sandbox = sandbox

    def arg(self, name: str, default=None):
        for i, a in enumerate(self.args):
            if a == name and i + 1 < len(self.args):
                return self.args[i + 1]
        return default


def _fn_noop(ctx: FnContext):
    return 0


def _fn_sleep(ctx: FnContext):
    duration = float(ctx.arg("--duration", "0"))
    deadline = time.monotonic() + duration
    while time.monotonic() < deadline:
        if ctx.cancel.is_set():
            return 1
        time.sleep(min(0.05, max(0.0, deadline - time.monotonic())))
    return 0


FUNCTION_REGISTRY: dict[str, callable] = {
    "noop": _fn_noop,
    "sleep": _fn_sleep,
}


def register_function(name: str, fn):
    FUNCTION_REGISTRY[name] = fn


@dataclass
class _Running:
    task: Task
    thread: threading.Thread
    proc: object | None = None


class LocalAgent:
    """One pilot's agent on the local machine."""

    def __init__(self, cfg: AgentConfig, hub: bus.MessageHub, tracer: Tracer,
                 sandbox_root: str):
        assert cfg.pilot.fabric == Fabric.LOCAL
        self.cfg = cfg
        self.pd = cfg.pilot
        self.hub = hub
        self.tracer = tracer
        self.sandbox_root = sandbox_root
        self.node_list = build_node_list(self.pd)
        self.scheduler = Scheduler(SlotMap(self.node_list))
        self.in_q = hub.open(f"agent.{self.pd.uid}.tasks", bus.QUEUE)
        self.notify = hub.open("task_state", bus.TOPIC)
        self.completions = bus.Channel(f"agent.{self.pd.uid}.completions", bus.QUEUE)
        self.tasks: dict[str, Task] = {}
        self.running: dict[str, _Running] = {}
        self._cancel = threading.Event()
        self._stop_requested = threading.Event()
        self._thread: threading.Thread | None = None
        self.ready = threading.Event()
        self._lock = threading.Lock()

    # lifecycle -----------------------------------------------------------

    def start(self):
        self._thread = threading.Thread(target=self._run, name=f"agent-{self.pd.uid}",
                                        daemon=True)
        self._thread.start()

    def stop(self, cancel: bool = False, timeout_s: float = 60.0):
        """Request shutdown; with cancel, terminate running work."""
        if cancel:
            self._cancel.set()
        self._stop_requested.set()
        if self._thread is not None:
            self._thread.join(timeout_s)

    def _emit(self, component: str, name: str, uid: str | None = None,
              detail: str | None = None):
        self.tracer.emit(component, name, task_uid=uid, detail=detail)

    def _notify(self, task: Task):
        self.notify.send([bus.pack_message({
            "task_uid": task.uid,
            "state": task.state.value,
            "exit_code": task.exit_code,
            "error": task.error,
            "pilot": self.pd.uid,
        })])

    # main loop -----------------------------------------------------------

    def _run(self):
        self._emit("agent", "pilot_start", detail=self.pd.uid)
        self._emit("agent", "agent_ready", detail=self.pd.uid)
        self.ready.set()
        dirty = False
        while True:
            progressed = False
            for raw in self.in_q.receive(self.cfg.bulk_size, timeout_s=0.01):
                self._on_task_message(raw)
                dirty = True
                progressed = True
            for raw in self.completions.receive(self.cfg.bulk_size, timeout_s=0.0):
                self._on_completion(bus.unpack_message(raw))
                dirty = True
                progressed = True
            if dirty:
                dirty = False
                for td, placement in self.scheduler.rescan():
                    self._launch(td, placement)
            if self._cancel.is_set():
                self._do_cancel()
                break
            if self._stop_requested.is_set() and not self.running \
                    and self.scheduler.waiting_count() == 0 \
                    and self.in_q.pending() == 0:
                break
            if not progressed:
                time.sleep(0.001)
        self._finalize()

    def _finalize(self):
        self._emit("agent", "agent_stop", detail=self.pd.uid)
        self.tracer.flush()

    def _do_cancel(self):
        with self._lock:
            runners = list(self.running.values())
        for r in runners:
            proc = r.proc
            if proc is not None:
                try:
                    proc.terminate()
                except OSError:
                    pass
        deadline = time.monotonic() + CANCEL_GRACE_S
        for r in runners:
            r.thread.join(max(0.0, deadline - time.monotonic()))
            if r.thread.is_alive() and r.proc is not None:
                try:
                    r.proc.kill()
                except OSError:
                    pass
                r.thread.join(5.0)
        # Drain completion records, then mark everything non-terminal CANCELED.
        for raw in self.completions.receive(self.cfg.bulk_size, timeout_s=0.0):
            bus.unpack_message(raw)
        for td in self.scheduler.waiting:
            task = self.tasks[td.uid]
            task.state = TaskState.CANCELED
            self._emit("agent", "task_canceled", uid=td.uid)
            self._notify(task)
        self.scheduler.waiting = []
        with self._lock:
            runners = list(self.running.items())
        for uid, r in runners:
            task = r.task
            if task.placement is not None:
                try:
                    self.scheduler.complete(task.placement)
                except Exception:
                    pass
            task.state = TaskState.CANCELED
            self._emit("agent", "task_canceled", uid=uid)
            self._notify(task)
        self.running.clear()

    # task intake ---------------------------------------------------------

    def _on_task_message(self, raw: bytes):
        td = TaskDescription.from_dict(bus.unpack_message(raw))
        task = Task(description=td, state=TaskState.AGENT_PULLED)
        task.timestamps["AGENT_PULLED"] = self.tracer.now()
        self.tasks[td.uid] = task
        self._emit("agent", "db_bridge_pull", uid=td.uid)
        try:
            validate_task_description(td, self.pd)
        except ValidationError as exc:
            self._task_failed(task, str(exc))
            return
        if td.stage_in:
            self._emit("agent", "stage_in_start", uid=td.uid)
            try:
                self._stage(td, "in")
            except OSError as exc:
                self._task_failed(task, f"SourceMissing: {exc}")
                return
            self._emit("agent", "stage_in_stop", uid=td.uid)
        self.scheduler.submit(td)

    def _task_failed(self, task: Task, reason: str):
        task.state = TaskState.FAILED
        task.error = reason
        self._emit("agent", "task_failed", uid=task.uid, detail=reason)
        self._notify(task)

    def sandbox(self, uid: str) -> str:
        return os.path.join(self.sandbox_root, self.pd.uid, uid)

    def _stage(self, td: TaskDescription, direction: str):
        box = self.sandbox(td.uid)
        pairs = td.stage_in if direction == "in" else td.stage_out
        for src, dst in pairs:
            if direction == "in":
                target = os.path.join(box, dst)
                os.makedirs(os.path.dirname(target), exist_ok=True)
                shutil.copyfile(src, target)
            else:
                source = os.path.join(box, src)
                os.makedirs(os.path.dirname(os.path.abspath(dst)), exist_ok=True)
                shutil.copyfile(source, dst)

    # execution -----------------------------------------------------------

    def _launch(self, td: TaskDescription, placement):
        task = self.tasks[td.uid]
        task.placement = placement
        task.state = TaskState.SCHEDULED
        task.timestamps["SCHEDULED"] = self.tracer.now()
        self._emit("scheduler", "schedule_ok", uid=td.uid,
                   detail=f"{placement.serialize()}|mpi={int(td.uses_mpi)}")
        runner = _Running(task=task, thread=None)
        thread = threading.Thread(target=self._execute, args=(task, runner),
                                  name=f"exec-{td.uid}", daemon=True)
        runner.thread = thread
        with self._lock:
            self.running[td.uid] = runner
        thread.start()

    def _execute(self, task: Task, runner: _Running):
        td = task.description
        self._emit("executor", "prepare_start", uid=td.uid)
        try:
            if td.kind == TaskKind.EXECUTABLE:
                rec = self._run_executable(task, runner)
            else:
                rec = self._run_function(task)
        except SpawnFailure as exc:
            rec = CompletionRecord(task_uid=td.uid, exit_code=-1,
                                   start_ts=self.tracer.now(), stop_ts=self.tracer.now(),
                                   error=str(exc))
        state = "DONE" if rec.exit_code == 0 else "FAILED"
        self.completions.send([bus.pack_message(completion_message(rec, state))])

    def _run_executable(self, task: Task, runner: _Running) -> CompletionRecord:
        td = task.description
        box = self.sandbox(td.uid)
        os.makedirs(box, exist_ok=True)
        cmd = build_launch_command(td, task.placement)
        self._emit("executor", "exec_start", uid=td.uid)
        task.state = TaskState.EXECUTING

        def register(proc):
            runner.proc = proc

        rec = spawn_local(
            cmd, td.uid, cwd=box,
            stdout_path=os.path.join(box, "task.out"),
            stderr_path=os.path.join(box, "task.err"),
            clock=self.tracer.now, register=register)
        self._emit("executor", "exec_stop", uid=td.uid)
        return rec

    def _run_function(self, task: Task) -> CompletionRecord:
        td = task.description
        fn = FUNCTION_REGISTRY.get(td.function)
        if fn is None:
            return CompletionRecord(task_uid=td.uid, exit_code=-1,
                                    start_ts=self.tracer.now(), stop_ts=self.tracer.now(),
                                    error=f"unknown function {td.function!r}")
        ctx = FnContext(td, self.hub, self.tracer, self._cancel, self.sandbox(td.uid))
        self._emit("executor", "exec_start", uid=td.uid)
        task.state = TaskState.EXECUTING
        start = self.tracer.now()
        try:
            code = fn(ctx)
        except Exception as exc:  # function errors become task failures
            self._emit("executor", "exec_stop", uid=td.uid)
            return CompletionRecord(task_uid=td.uid, exit_code=-1, start_ts=start,
                                    stop_ts=self.tracer.now(), error=repr(exc))
        self._emit("executor", "exec_stop", uid=td.uid)
        return CompletionRecord(task_uid=td.uid, exit_code=int(code or 0),
                                start_ts=start, stop_ts=self.tracer.now())

    # completion ----------------------------------------------------------

    def _on_completion(self, msg: dict):
        uid = msg["task_uid"]
        task = self.tasks.get(uid)
        with self._lock:
            self.running.pop(uid, None)
        if task is None or task.placement is None:
            return
        self.scheduler.complete(task.placement)
        td = task.description
        if msg["state"] == "DONE" and td.stage_out:
            self._emit("agent", "stage_out_start", uid=uid)
            try:
                self._stage(td, "out")
                self._emit("agent", "stage_out_stop", uid=uid)
            except OSError as exc:
                msg = dict(msg, state="FAILED", error=f"stage_out: {exc}")
        self._emit("executor", "spawn_return", uid=uid)
        task.exit_code = msg.get("exit_code")
        task.error = msg.get("error")
        if msg["state"] == "DONE":
            task.state = TaskState.DONE
            self._emit("agent", "task_done", uid=uid)
        else:
            task.state = TaskState.FAILED
            self._emit("agent", "task_failed", uid=uid, detail=task.error or "")
        self._notify(task)
