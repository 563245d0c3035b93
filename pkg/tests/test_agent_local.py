"""Local-fabric agent: real subprocesses and function threads, staging,
sandbox isolation, cancellation, and lifecycle event completeness."""

import os
import threading
import time

import pytest

from pilotkit import bus
from pilotkit.agent import AgentConfig, FUNCTION_REGISTRY, LocalAgent, register_function
from pilotkit.core import TaskDescription, TaskKind, TaskState
from pilotkit.tracer import Tracer

from conftest import task


@pytest.fixture
def agent_env(local_pilot, tmp_path):
    """Started agent plus its hub and tracer; stops the agent on teardown."""
    pd = local_pilot(cores=4)
    hub = bus.MessageHub()
    tracer = Tracer(str(tmp_path / "traces"))
    agent = LocalAgent(AgentConfig(pilot=pd), hub, tracer,
                       sandbox_root=str(tmp_path / "sandbox"))
    agent.start()
    assert agent.ready.wait(5.0)
    yield agent, hub, tracer
    agent.stop(cancel=True)
    tracer.close()
    hub.close()


def submit(agent, *tds):
    agent.in_q.send([bus.pack_message(td.to_dict()) for td in tds])


def wait_terminal(agent, uids, timeout_s=30.0):
    deadline = time.monotonic() + timeout_s
    terminal = (TaskState.DONE, TaskState.FAILED, TaskState.CANCELED)
    while time.monotonic() < deadline:
        tasks = {u: agent.tasks.get(u) for u in uids}
        if all(t is not None and t.state in terminal for t in tasks.values()):
            return tasks
        time.sleep(0.01)
    raise AssertionError(f"tasks not terminal: "
                         f"{ {u: getattr(t, 'state', None) for u, t in tasks.items()} }")


class TestExecutableTasks:
    def test_run_to_done(self, agent_env):
        agent, hub, tracer = agent_env
        submit(agent, task("t0", duration=0.05))
        tasks = wait_terminal(agent, ["t0"])
        assert tasks["t0"].state == TaskState.DONE
        assert tasks["t0"].exit_code == 0

    def test_nonzero_exit_fails_task(self, agent_env):
        agent, hub, tracer = agent_env
        td = TaskDescription(uid="bad", executable="pilotkit-emulate",
                             arguments=("--duration", "0", "--exit-code", "3"))
        submit(agent, td)
        tasks = wait_terminal(agent, ["bad"])
        assert tasks["bad"].state == TaskState.FAILED
        assert tasks["bad"].exit_code == 3

    def test_missing_program_fails_not_crashes(self, agent_env):
        agent, hub, tracer = agent_env
        td = TaskDescription(uid="gone", executable="/no/such/binary")
        submit(agent, td, task("ok", duration=0.02))
        tasks = wait_terminal(agent, ["gone", "ok"])
        assert tasks["gone"].state == TaskState.FAILED
        assert tasks["ok"].state == TaskState.DONE

    def test_oversized_task_rejected(self, agent_env):
        agent, hub, tracer = agent_env
        submit(agent, task("huge", cores=64))
        tasks = wait_terminal(agent, ["huge"])
        assert tasks["huge"].state == TaskState.FAILED

    def test_sandbox_isolation_and_capture(self, agent_env, tmp_path):
        agent, hub, tracer = agent_env
        tds = [TaskDescription(
                   uid=f"w{i}", executable="sh",
                   arguments=("-c", f"echo out{i}; pwd"))
               for i in range(3)]
        submit(agent, *tds)
        wait_terminal(agent, [td.uid for td in tds])
        boxes = [agent.sandbox(td.uid) for td in tds]
        assert len(set(boxes)) == 3
        for i, box in enumerate(boxes):
            lines = open(os.path.join(box, "task.out")).read().splitlines()
            assert lines[0] == f"out{i}"
            assert os.path.realpath(lines[1]) == os.path.realpath(box)


class TestFunctionTasks:
    def test_builtin_noop(self, agent_env):
        agent, hub, tracer = agent_env
        td = TaskDescription(uid="f0", kind=TaskKind.FUNCTION, function="noop")
        submit(agent, td)
        tasks = wait_terminal(agent, ["f0"])
        assert tasks["f0"].state == TaskState.DONE

    def test_unknown_function_fails(self, agent_env):
        agent, hub, tracer = agent_env
        td = TaskDescription(uid="f1", kind=TaskKind.FUNCTION, function="nope")
        submit(agent, td)
        tasks = wait_terminal(agent, ["f1"])
        assert tasks["f1"].state == TaskState.FAILED
        assert "nope" in tasks["f1"].error

    def test_registered_function_gets_context(self, agent_env):
        agent, hub, tracer = agent_env
        seen = {}

        def probe(ctx):
            seen["uid"] = ctx.td.uid
            seen["arg"] = ctx.arg("--x")
            return 0

        register_function("probe_fn", probe)
        try:
            td = TaskDescription(uid="f2", kind=TaskKind.FUNCTION,
                                 function="probe_fn", arguments=("--x", "7"))
            submit(agent, td)
            tasks = wait_terminal(agent, ["f2"])
        finally:
            FUNCTION_REGISTRY.pop("probe_fn", None)
        assert tasks["f2"].state == TaskState.DONE
        assert seen == {"uid": "f2", "arg": "7"}

    def test_raising_function_fails_task(self, agent_env):
        agent, hub, tracer = agent_env
        register_function("boom", lambda ctx: (_ for _ in ()).throw(RuntimeError("x")))
        try:
            td = TaskDescription(uid="f3", kind=TaskKind.FUNCTION, function="boom")
            submit(agent, td)
            tasks = wait_terminal(agent, ["f3"])
        finally:
            FUNCTION_REGISTRY.pop("boom", None)
        assert tasks["f3"].state == TaskState.FAILED


class TestStaging:
    def test_stage_in_and_out(self, agent_env, tmp_path):
        agent, hub, tracer = agent_env
        src = tmp_path / "input.txt"
        src.write_text("payload")
        out = tmp_path / "result" / "copy.txt"
        td = TaskDescription(
            uid="s0", executable="sh",
            arguments=("-c", "cp data/input.txt output.txt"),
            stage_in=((str(src), "data/input.txt"),),
            stage_out=(("output.txt", str(out)),))
        submit(agent, td)
        tasks = wait_terminal(agent, ["s0"])
        assert tasks["s0"].state == TaskState.DONE
        assert out.read_text() == "payload"

    def test_missing_stage_in_source_fails(self, agent_env, tmp_path):
        agent, hub, tracer = agent_env
        td = TaskDescription(uid="s1", executable="true",
                             stage_in=((str(tmp_path / "absent"), "x"),))
        submit(agent, td)
        tasks = wait_terminal(agent, ["s1"])
        assert tasks["s1"].state == TaskState.FAILED
        assert "SourceMissing" in tasks["s1"].error


class TestCancel:
    def test_cancel_terminates_running_process(self, local_pilot, tmp_path):
        pd = local_pilot(cores=2)
        hub = bus.MessageHub()
        tracer = Tracer(str(tmp_path / "traces"))
        agent = LocalAgent(AgentConfig(pilot=pd), hub, tracer,
                           sandbox_root=str(tmp_path / "sandbox"))
        agent.start()
        assert agent.ready.wait(5.0)
        submit(agent, task("long", duration=60.0), task("waiting", duration=60.0, cores=2))
        deadline = time.monotonic() + 5.0
        while "long" not in agent.running and time.monotonic() < deadline:
            time.sleep(0.01)
        t0 = time.monotonic()
        agent.stop(cancel=True)
        assert time.monotonic() - t0 < 30.0  # far below the 60 s runtime
        assert agent.tasks["long"].state == TaskState.CANCELED
        assert agent.tasks["waiting"].state == TaskState.CANCELED
        tracer.close()
        hub.close()


class TestEvents:
    def test_lifecycle_event_completeness(self, agent_env, tmp_path):
        from pilotkit.analytics import load_session_traces, replay_check

        agent, hub, tracer = agent_env
        tds = [task(f"t{i}", duration=0.02) for i in range(8)]
        submit(agent, *tds)
        wait_terminal(agent, [td.uid for td in tds])
        agent.stop()
        tracer.close()
        trace = load_session_traces(tracer.directory)
        needed = ["db_bridge_pull", "schedule_ok", "prepare_start",
                  "exec_start", "exec_stop", "spawn_return", "task_done"]
        for name in needed:
            uids = {e.task_uid for e in trace.by_name(name)}
            assert uids == {td.uid for td in tds}, name
        assert replay_check(trace) == []

    def test_state_notifications_broadcast(self, local_pilot, tmp_path):
        pd = local_pilot()
        hub = bus.MessageHub()
        sub = hub.open("task_state", bus.TOPIC).subscribe()
        tracer = Tracer(str(tmp_path / "traces"))
        agent = LocalAgent(AgentConfig(pilot=pd), hub, tracer,
                           sandbox_root=str(tmp_path / "sandbox"))
        agent.start()
        assert agent.ready.wait(5.0)
        submit(agent, task("n0", duration=0.01))
        msgs = []
        deadline = time.monotonic() + 10.0
        while time.monotonic() < deadline:
            for raw in sub.receive(16, timeout_s=0.2):
                msgs.append(bus.unpack_message(raw))
            if any(m["task_uid"] == "n0" and m["state"] == "DONE" for m in msgs):
                break
        assert any(m["state"] == "DONE" for m in msgs)
        agent.stop()
        tracer.close()
        hub.close()


class TestSchedulingPressure:
    def test_more_tasks_than_cores_all_complete(self, agent_env):
        agent, hub, tracer = agent_env
        tds = [task(f"p{i:02d}", duration=0.02) for i in range(12)]
        submit(agent, *tds)
        tasks = wait_terminal(agent, [td.uid for td in tds], timeout_s=60.0)
        assert all(t.state == TaskState.DONE for t in tasks.values())
