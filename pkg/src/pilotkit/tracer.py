"""Buffered per-component event tracing: CSV trace files plus a JSON manifest.

Trace format: one event per line, ``timestamp,component,event_name,task_uid,detail``
with timestamps as decimal seconds at microsecond precision. One file per
component; a ``manifest.json`` records components, event counts, clock offsets,
the session seed and a config snapshot.
"""

from __future__ import annotations

import json
import os
import threading
import time

# Documented event-name registry. Unknown names are recorded but counted
# separately so a typo shows up in the manifest instead of failing a task.
EVENT_REGISTRY = frozenset(
    {
        # session / pilot lifecycle
        "session_start",
        "session_close",
        "pilot_start",
        "agent_ready",
        "agent_stop",
        # task flow
        "task_submit",
        "db_bridge_pull",
        "stage_in_start",
        "stage_in_stop",
        "stage_out_start",
        "stage_out_stop",
        "schedule_ok",
        "schedule_wait",
        "schedule_fail",
        "prepare_start",
        "exec_start",
        "exec_stop",
        "spawn_return",
        "task_done",
        "task_failed",
        "task_canceled",
        # launchers
        "dvm_boot",
        "dvm_ready",
        "dvm_failed",
        # master/worker framework
        "worker_register",
        "worker_lost",
        "call_dispatch",
        "call_result",
    }
    | {f"state_{s.lower()}" for s in (
        "submitted", "agent_pulled", "staging_in", "scheduled", "executing",
        "staging_out", "done", "failed", "canceled",
    )}
)

DEFAULT_BUFFER_EVENTS = 4096


class Tracer:
    """Collects events per component and writes one CSV file per component.

    Tracing never raises into the caller's task path: I/O errors are counted
    and reported in the manifest. Timestamps passed explicitly must be
    non-decreasing per component; violations are rejected and counted.
    """

    def __init__(self, directory: str, enabled: bool = True,
                 buffer_events: int = DEFAULT_BUFFER_EVENTS, clock=None):
        self.directory = directory
        self.enabled = enabled
        self.buffer_events = buffer_events
        self._clock = clock  # callable returning seconds; default: monotonic since open
        self._t0 = time.monotonic()
        self._lock = threading.Lock()
        self._buffers: dict[str, list[str]] = {}
        self._counts: dict[str, int] = {}
        self._last_ts: dict[str, float] = {}
        self._offsets: dict[str, float] = {}
        self.rejected = 0
        self.unknown_names = 0
        self.io_errors = 0
        self._closed = False
        self.meta: dict = {}
        if enabled:
            os.makedirs(directory, exist_ok=True)

    def now(self) -> float:
        if self._clock is not None:
            return self._clock()
        return time.monotonic() - self._t0

    def set_offset(self, component: str, offset_s: float):
        """Record a per-component clock offset for the manifest."""
        self._offsets[component] = offset_s

    def emit(self, component: str, event_name: str, task_uid: str | None = None,
             detail: str | None = None, timestamp: float | None = None):
        if not self.enabled or self._closed:
            return
        with self._lock:
            if timestamp is None:
                timestamp = self.now()
            else:
                last = self._last_ts.get(component)
                if last is not None and timestamp < last:
                    self.rejected += 1
                    return
            self._last_ts[component] = timestamp
            if event_name not in EVENT_REGISTRY:
                self.unknown_names += 1
            line = "%.6f,%s,%s,%s,%s" % (
                timestamp, component, event_name, task_uid or "", detail or "")
            buf = self._buffers.setdefault(component, [])
            buf.append(line)
            self._counts[component] = self._counts.get(component, 0) + 1
            if len(buf) >= self.buffer_events:
                self._flush_component(component)

    def _flush_component(self, component: str):
        buf = self._buffers.get(component)
        if not buf:
            return
        path = os.path.join(self.directory, f"{component}.csv")
        try:
            with open(path, "a") as fh:
                fh.write("\n".join(buf) + "\n")
        except OSError:
            self.io_errors += 1
        self._buffers[component] = []

    def flush(self):
        if not self.enabled:
            return
        with self._lock:
            for component in list(self._buffers):
                self._flush_component(component)

    def close(self):
        """Flush all buffers and write the manifest."""
        if not self.enabled or self._closed:
            self._closed = True
            return
        self.flush()
        manifest = {
            "components": [
                {
                    "name": c,
                    "file": f"{c}.csv",
                    "events": n,
                    "clock_offset_s": self._offsets.get(c, 0.0),
                }
                for c, n in sorted(self._counts.items())
            ],
            "rejected_events": self.rejected,
            "unknown_event_names": self.unknown_names,
            "io_errors": self.io_errors,
            "partial": self.io_errors > 0,
        }
        manifest.update(self.meta)
        try:
            with open(os.path.join(self.directory, "manifest.json"), "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True)
        except OSError:
            self.io_errors += 1
        self._closed = True

    def event_count(self, component: str | None = None) -> int:
        if component is None:
            return sum(self._counts.values())
        return self._counts.get(component, 0)


class NullTracer(Tracer):
    """Tracer with recording disabled; used when tracing is turned off."""

    def __init__(self):
        super().__init__(directory="", enabled=False)
