"""Fault-tolerant ensemble launcher.

Starts one client process per simulation, keeps at most `concurrency`
of them alive at a time, and watches the server's status snapshots. A
client whose process dies or whose heartbeat goes stale is restarted
with the same sim_id; counter-based parameter draws make the retry
stream the exact same trajectory, and server-side deduplication absorbs
the overlap. After max_retries failures a simulation is abandoned.

The decision rule lives in monitor_tick(), a pure function over plain
values, so the restart policy is testable without processes or sockets.
"""

from __future__ import annotations

import json
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass

from . import wire

PENDING = "pending"
RUNNING = "running"
DONE = "done"
ABANDONED = "abandoned"


@dataclass
class JobRecord:
    sim_id: int
    state: str = PENDING
    retries: int = 0
    started_ms: int = 0


def monitor_tick(
    now_ms: int,
    jobs: list,
    completed: set,
    heartbeats: dict,
    alive: dict,
    failed: dict,
    concurrency: int,
    timeout_ms: int,
    max_retries: int,
) -> list:
    """One scheduling decision pass. Pure.

    jobs: JobRecords in launch order. completed: sim_ids the server has
    closed out. heartbeats: sim_id -> last wallclock ms seen by the
    server. alive/failed: plain dicts of process liveness keyed by
    sim_id (failed means exited nonzero). Returns ordered actions:
    ("complete"|"restart"|"abandon"|"start", sim_id).
    """
    actions = []
    running = 0
    for job in jobs:
        if job.state != RUNNING:
            continue
        if job.sim_id in completed:
            actions.append(("complete", job.sim_id))
            continue
        died = not alive.get(job.sim_id, False)
        crashed = died and failed.get(job.sim_id, False)
        last = heartbeats.get(job.sim_id, job.started_ms)
        stale = now_ms - max(last, job.started_ms) > timeout_ms
        if crashed or stale:
            if job.retries >= max_retries:
                actions.append(("abandon", job.sim_id))
            else:
                actions.append(("restart", job.sim_id))
                running += 1
            continue
        # exited cleanly but not yet reported complete: wait for the
        # server to process the Bye; staleness catches true losses
        running += 1
    free = concurrency - running
    for job in jobs:
        if free <= 0:
            break
        if job.state == PENDING:
            actions.append(("start", job.sim_id))
            free -= 1
    return actions


class LocalProcess:
    """Spawns clients as detached child processes of this machine.

    start_new_session puts each client in its own process group, so
    clients keep streaming if the launcher itself dies.
    """

    def __init__(self, config_path, server_host, server_port, extra_args=()):
        self.config_path = str(config_path)
        self.server = f"{server_host}:{server_port}"
        self.extra_args = tuple(extra_args)

    def spawn(self, sim_id: int):
        cmd = [
            sys.executable,
            "-m",
            "olts.cli",
            "client",
            "--config",
            self.config_path,
            "--server",
            self.server,
            "--sim-id",
            str(sim_id),
            *self.extra_args,
        ]
        return subprocess.Popen(
            cmd,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
            start_new_session=True,
        )

    def alive(self, handle) -> bool:
        return handle.poll() is None

    def failed(self, handle) -> bool:
        code = handle.poll()
        return code is not None and code != 0

    def kill(self, handle) -> None:
        if handle.poll() is None:
            handle.kill()
            try:
                handle.wait(timeout=5)
            except subprocess.TimeoutExpired:
                pass


class ControlLink:
    """Launcher side of the server's control channel."""

    def __init__(self, host, port):
        self.sock = socket.create_connection((host, port))
        self._decoder = wire.StreamDecoder(self.sock.makefile("rb"))

    def snapshot(self, now_ms: int):
        """Poll status: returns (completed sim_ids, heartbeat ms by sim)."""
        self.sock.sendall(
            wire.encode(wire.Heartbeat(0xFFFFFFFFFFFFFFFF, now_ms))
        )
        completed, beats = set(), {}
        while True:
            msg = self._decoder.read()
            if msg is None:
                raise ConnectionError("control channel closed mid-reply")
            if isinstance(msg, wire.Ack):
                return completed, beats
            if isinstance(msg, wire.Bye):
                completed.add(msg.sim_id)
            elif isinstance(msg, wire.Heartbeat):
                beats[msg.sender_id] = msg.wallclock_ms

    def request_stop(self) -> None:
        self.sock.sendall(wire.encode(wire.Bye(0xFFFFFFFFFFFFFFFF, 0)))
        msg = self._decoder.read()
        if not isinstance(msg, wire.Ack):
            raise ConnectionError(f"stop request got {type(msg).__name__}")

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def launch(cfg, backend, ctrl_host=None, ctrl_port=None, outdir=None, clock=None, sleep=None) -> dict:
    """Run the whole ensemble to completion through `backend`.

    Returns {launched, restarted, abandoned, wall_time_s} and writes
    run_report.json next to the server's outputs.
    """
    clock = clock if clock is not None else (lambda: time.time() * 1000.0)
    sleep = sleep if sleep is not None else time.sleep
    outdir = outdir if outdir is not None else cfg["paths"]["outdir"]
    ctrl_host = ctrl_host if ctrl_host is not None else cfg["server"]["host"]
    ctrl_port = ctrl_port if ctrl_port is not None else cfg["server"]["ctrl_port"]
    concurrency = cfg["run"]["concurrency"]
    timeout_ms = int(cfg["launcher"]["heartbeat_timeout_s"] * 1000)
    tick_s = cfg["launcher"]["tick_s"]
    max_retries = cfg["launcher"]["max_retries"]

    jobs = [JobRecord(i) for i in range(cfg["run"]["ensemble_size"])]
    by_id = {j.sim_id: j for j in jobs}
    handles = {}
    launched = restarted = abandoned = 0
    start_wall = time.monotonic()

    link = ControlLink(ctrl_host, ctrl_port)
    try:
        while any(j.state in (PENDING, RUNNING) for j in jobs):
            now = int(clock())
            try:
                completed, beats = link.snapshot(now)
            except (ConnectionError, OSError):
                break  # server is gone; report what we have
            alive = {sid: backend.alive(h) for sid, h in handles.items()}
            failed = {sid: backend.failed(h) for sid, h in handles.items()}
            for action, sid in monitor_tick(
                now, jobs, completed, beats, alive, failed,
                concurrency, timeout_ms, max_retries,
            ):
                job = by_id[sid]
                if action == "complete":
                    job.state = DONE
                    handles.pop(sid, None)
                elif action == "start":
                    handles[sid] = backend.spawn(sid)
                    job.state = RUNNING
                    job.started_ms = now
                    launched += 1
                elif action == "restart":
                    old = handles.pop(sid, None)
                    if old is not None:
                        backend.kill(old)
                    handles[sid] = backend.spawn(sid)
                    job.retries += 1
                    job.started_ms = now
                    restarted += 1
                elif action == "abandon":
                    old = handles.pop(sid, None)
                    if old is not None:
                        backend.kill(old)
                    job.state = ABANDONED
                    abandoned += 1
            if any(j.state in (PENDING, RUNNING) for j in jobs):
                sleep(tick_s)
        try:
            link.request_stop()
        except (ConnectionError, OSError):
            pass  # server already finished on its own
    finally:
        link.close()

    report = {
        "launched": launched,
        "restarted": restarted,
        "abandoned": abandoned,
        "completed": sum(1 for j in jobs if j.state == DONE),
        "wall_time_s": time.monotonic() - start_wall,
    }
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "run_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report
