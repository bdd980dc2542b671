import time

from olts import config, launcher, server
from olts.launcher import ABANDONED, DONE, PENDING, RUNNING, JobRecord, monitor_tick


def _jobs(n, **states):
    jobs = [JobRecord(i) for i in range(n)]
    for i, kv in states.items():
        for key, value in kv.items():
            setattr(jobs[int(i)], key, value)
    return jobs


TICK = dict(concurrency=2, timeout_ms=10_000, max_retries=3)


def test_tick_starts_up_to_concurrency_in_order():
    jobs = _jobs(5)
    actions = monitor_tick(0, jobs, set(), {}, {}, {}, **TICK)
    assert actions == [("start", 0), ("start", 1)]


def test_tick_completion_frees_a_slot_immediately():
    jobs = _jobs(4)
    jobs[0].state = RUNNING
    jobs[1].state = RUNNING
    actions = monitor_tick(
        1000, jobs, {0}, {1: 900}, {0: True, 1: True}, {}, **TICK
    )
    assert actions == [("complete", 0), ("start", 2)]


def test_tick_stale_heartbeat_restarts():
    jobs = _jobs(1)
    jobs[0].state = RUNNING
    jobs[0].started_ms = 0
    # heartbeat 11s old, process still alive (hung)
    actions = monitor_tick(15_000, jobs, set(), {0: 4000}, {0: True}, {}, **TICK)
    assert actions == [("restart", 0)]
    # same situation but retries exhausted
    jobs[0].retries = 3
    actions = monitor_tick(15_000, jobs, set(), {0: 4000}, {0: True}, {}, **TICK)
    assert actions == [("abandon", 0)]


def test_tick_crashed_process_restarts_without_waiting():
    jobs = _jobs(1)
    jobs[0].state = RUNNING
    jobs[0].started_ms = 9_500
    actions = monitor_tick(
        10_000, jobs, set(), {0: 9_900}, {0: False}, {0: True}, **TICK
    )
    assert actions == [("restart", 0)]


def test_tick_clean_exit_waits_for_server_confirmation():
    jobs = _jobs(1)
    jobs[0].state = RUNNING
    jobs[0].started_ms = 9_000
    # process exited 0, Bye still in flight: not crashed, not stale
    actions = monitor_tick(
        10_000, jobs, set(), {0: 9_900}, {0: False}, {0: False}, **TICK
    )
    assert actions == []


def test_tick_fresh_start_has_heartbeat_grace():
    jobs = _jobs(1)
    jobs[0].state = RUNNING
    jobs[0].started_ms = 100_000  # just started, no heartbeat yet
    actions = monitor_tick(105_000, jobs, set(), {}, {0: True}, {}, **TICK)
    assert actions == []


def test_tick_restart_holds_its_slot():
    jobs = _jobs(3)
    jobs[0].state = RUNNING
    jobs[1].state = RUNNING
    actions = monitor_tick(
        20_000, jobs, set(), {0: 1, 1: 19_000}, {0: True, 1: True}, {}, **TICK
    )
    # sim 0 restarts and still occupies a slot; no new start fits
    assert actions == [("restart", 0)]


def _tree(n=3, **over):
    tree = {
        "run": {
            "experiment": "custom",
            "ensemble_size": n,
            "concurrency": 2,
            "sample_unit": "step_pair",
        },
        "seeds": {"master": 5},
        "params": {
            "rho": {"kind": "discrete", "values": [0.0, 20.0, 40.0]},
            "x0": {"kind": "normal", "mean": 15.0, "std": 30.0},
            "y0": {"kind": "normal", "mean": 15.0, "std": 30.0},
            "z0": {"kind": "normal", "mean": 15.0, "std": 30.0},
        },
        "solver": {"kind": "lorenz", "dt": 0.01, "t_total": 0.2},
        "buffer": {"capacity": 32, "watermark": 8},
        "trainer": {
            "hidden_dims": [8],
            "batch_size": 8,
            "max_batches": 50,
            "validate_every": 10,
            "checkpoint_every": 0,
            "mode": "autoregressive",
            "input_params": ["rho"],
        },
        "server": {"validation_trajectories": 1},
        "launcher": {"tick_s": 0.02},
    }
    for section, kv in over.items():
        tree.setdefault(section, {}).update(kv)
    return tree


def _toml_of(tree) -> str:
    lines = []
    for section, kv in tree.items():
        if section == "params":
            for name, spec in kv.items():
                lines.append(f"[params.{name}]")
                for k, v in spec.items():
                    lines.append(f"{k} = {_toml_val(v)}")
            continue
        lines.append(f"[{section}]")
        for k, v in kv.items():
            lines.append(f"{k} = {_toml_val(v)}")
    return "\n".join(lines) + "\n"


def _toml_val(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, list):
        return "[" + ", ".join(_toml_val(x) for x in v) + "]"
    return repr(v)


def test_control_link_snapshot_and_stop(tmp_path):
    cfg = config.from_tree(_tree(n=5))
    srv = server.OnlineServer(cfg, str(tmp_path))
    data_port, ctrl_port = srv.start()

    from olts import client_api

    client_api.run_client(cfg, 0, host="127.0.0.1", port=data_port)
    link = launcher.ControlLink("127.0.0.1", ctrl_port)
    completed = set()
    for _ in range(200):  # the Bye may still be in flight server-side
        completed, beats = link.snapshot(now_ms=1)
        if completed:
            break
        time.sleep(0.01)
    assert completed == {0}
    link.request_stop()
    assert srv.wait(timeout=10)
    link.close()


def test_launch_runs_whole_ensemble(tmp_path):
    tree = _tree(n=3)
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(_toml_of(tree))
    cfg = config.load_config(cfg_path)
    srv = server.OnlineServer(cfg, str(tmp_path / "out"))
    data_port, ctrl_port = srv.start()
    backend = launcher.LocalProcess(cfg_path, "127.0.0.1", data_port)
    report = launcher.launch(
        cfg, backend, ctrl_port=ctrl_port, outdir=str(tmp_path / "out")
    )
    assert report["launched"] == 3
    assert report["restarted"] == 0
    assert report["abandoned"] == 0
    assert report["completed"] == 3
    assert srv.wait(timeout=20)
    assert srv.report["completed_sims"] == 3
    assert srv.report["protocol_errors"] == 0
    assert (tmp_path / "out" / "run_report.json").exists()


class KillOnFirstSpawn(launcher.LocalProcess):
    """Sabotage backend: SIGKILLs the first process it ever starts."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.murders = 0

    def spawn(self, sim_id):
        handle = super().spawn(sim_id)
        if self.murders == 0:
            self.murders += 1
            handle.kill()
            handle.wait(timeout=5)
        return handle


def test_launch_restarts_killed_client(tmp_path):
    tree = _tree(n=3)
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(_toml_of(tree))
    cfg = config.load_config(cfg_path)
    srv = server.OnlineServer(cfg, str(tmp_path / "out"))
    data_port, ctrl_port = srv.start()
    backend = KillOnFirstSpawn(cfg_path, "127.0.0.1", data_port)
    report = launcher.launch(
        cfg, backend, ctrl_port=ctrl_port, outdir=str(tmp_path / "out")
    )
    assert backend.murders == 1
    assert report["restarted"] >= 1
    assert report["abandoned"] == 0
    assert report["completed"] == 3
    assert srv.wait(timeout=20)
    assert srv.report["completed_sims"] == 3


def test_launch_abandons_unstartable_client(tmp_path):
    tree = _tree(n=1)
    tree["launcher"]["max_retries"] = 2
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text(_toml_of(tree))
    cfg = config.load_config(cfg_path)
    srv = server.OnlineServer(cfg, str(tmp_path / "out"))
    data_port, ctrl_port = srv.start()

    class AlwaysKill(KillOnFirstSpawn):
        def spawn(self, sim_id):
            handle = launcher.LocalProcess.spawn(self, sim_id)
            self.murders += 1
            handle.kill()
            handle.wait(timeout=5)
            return handle

    backend = AlwaysKill(cfg_path, "127.0.0.1", data_port)
    report = launcher.launch(
        cfg, backend, ctrl_port=ctrl_port, outdir=str(tmp_path / "out")
    )
    assert report["abandoned"] == 1
    assert report["restarted"] == 2
    assert report["completed"] == 0
    assert srv.wait(timeout=20)
