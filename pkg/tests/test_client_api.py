import socket
import threading
import time

import numpy as np
import pytest

from olts import client_api, config, wire


class CaptureServer:
    """Accepts one connection and decodes every frame it receives."""

    def __init__(self):
        self.sock = socket.socket()
        self.sock.bind(("127.0.0.1", 0))
        self.sock.listen(1)
        self.port = self.sock.getsockname()[1]
        self.frames = []
        self.done = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        conn, _ = self.sock.accept()
        with conn, conn.makefile("rb") as stream:
            decoder = wire.StreamDecoder(stream)
            while True:
                msg = decoder.read()
                if msg is None:
                    break
                self.frames.append(msg)
        self.done.set()

    def wait(self, timeout=5.0):
        assert self.done.wait(timeout), "capture server never saw EOF"
        self.sock.close()
        return self.frames


def _session(server, **kw):
    defaults = dict(
        host="127.0.0.1",
        port=server.port,
        client_id=7,
        sim_id=42,
        params=[1.0, 2.0],
        field_shape=(3,),
        heartbeat_interval_s=60.0,
    )
    defaults.update(kw)
    return client_api.ClientSession(**defaults)


def test_hello_then_ordered_timesteps_then_bye():
    server = CaptureServer()
    s = _session(server)
    s.send_timestep(0, [1.0, 2.0, 3.0])
    s.send_timestep(1, [4.0, 5.0, 6.0])
    assert s.finalize() == 1
    frames = server.wait()
    assert [type(f) for f in frames] == [wire.Hello, wire.Timestep, wire.Timestep, wire.Bye]
    hello = frames[0]
    assert hello.client_id == 7 and hello.sim_id == 42
    assert hello.field_shape == (3,)
    assert np.array_equal(hello.params, [1.0, 2.0])
    assert frames[1].t_index == 0 and frames[2].t_index == 1
    assert frames[3].last_t == 1


def test_out_of_order_and_wrong_length_rejected_locally():
    server = CaptureServer()
    s = _session(server)
    with pytest.raises(client_api.ContractViolation, match="out of order"):
        s.send_timestep(1, [1.0, 2.0, 3.0])
    with pytest.raises(client_api.ContractViolation, match="needs 3"):
        s.send_timestep(0, [1.0])
    s.send_timestep(0, [1.0, 2.0, 3.0])
    s.finalize()
    frames = server.wait()
    # the bad calls never reached the wire
    assert [type(f) for f in frames] == [wire.Hello, wire.Timestep, wire.Bye]


def test_finalize_idempotent_and_empty_sentinel():
    server = CaptureServer()
    s = _session(server)
    assert s.finalize() == wire.EMPTY_TRAJECTORY
    assert s.finalize() == wire.EMPTY_TRAJECTORY  # no error, no second Bye
    frames = server.wait()
    assert [type(f) for f in frames] == [wire.Hello, wire.Bye]
    assert frames[1].last_t == wire.EMPTY_TRAJECTORY


def test_send_after_finalize_rejected():
    server = CaptureServer()
    s = _session(server)
    s.finalize()
    with pytest.raises(client_api.ContractViolation, match="after finalize"):
        s.send_timestep(0, [1.0, 2.0, 3.0])
    server.wait()


def test_connect_backoff_schedule():
    # grab a port with no listener
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    dead_port = probe.getsockname()[1]
    probe.close()

    sleeps = []
    start = time.monotonic()
    with pytest.raises(client_api.ServerUnavailable, match="6 connection attempts"):
        client_api.ClientSession(
            "127.0.0.1", dead_port, 1, 1, [0.0], (1,), sleep=sleeps.append
        )
    assert sleeps == [0.1, 0.2, 0.4, 0.8, 1.6]
    assert time.monotonic() - start < 2.0  # injected sleep means no real waiting


def test_heartbeats_flow_while_idle():
    server = CaptureServer()
    s = _session(server, heartbeat_interval_s=0.02, clock=lambda: 1234.5)
    time.sleep(0.15)
    s.send_timestep(0, [1.0, 2.0, 3.0])
    s.finalize()
    frames = server.wait()
    beats = [f for f in frames if isinstance(f, wire.Heartbeat)]
    assert len(beats) >= 3
    assert all(b.sender_id == 42 and b.wallclock_ms == 1_234_500 for b in beats)
    assert isinstance(frames[0], wire.Hello)
    assert isinstance(frames[-1], wire.Bye)


def test_run_client_streams_whole_trajectory():
    server = CaptureServer()
    cfg = config.from_tree(
        {
            "run": {"experiment": "custom", "sample_unit": "step_pair"},
            "params": {
                "rho": {"kind": "fixed", "value": 28.0},
                "x0": {"kind": "fixed", "value": 1.0},
                "y0": {"kind": "fixed", "value": 1.0},
                "z0": {"kind": "fixed", "value": 1.0},
            },
            "solver": {"kind": "lorenz", "dt": 0.01, "t_total": 0.05},
            "trainer": {"mode": "autoregressive", "input_params": ["rho"]},
        }
    )
    lam, emitted = client_api.run_client(cfg, sim_id=3, host="127.0.0.1", port=server.port)
    assert emitted == 6  # t = 0..5 inclusive
    frames = server.wait()
    tsteps = [f for f in frames if isinstance(f, wire.Timestep)]
    assert [f.t_index for f in tsteps] == [0, 1, 2, 3, 4, 5]
    assert np.array_equal(tsteps[0].values, [1.0, 1.0, 1.0])
    # t=1 must match the hand-checked Euler step
    assert np.allclose(tsteps[1].values, [1.0, 1.26, 0.9833333333333333], atol=1e-12)
    assert frames[-1].last_t == 5
    assert lam["rho"] == 28.0


def test_solver_divergence_aborts_without_bye():
    # explicit Euler at rho=100 from (1,1,1) overflows within ~60 steps;
    # the partial trajectory must not be Bye'd as if it finished
    server = CaptureServer()
    cfg = config.from_tree(
        {
            "run": {"experiment": "custom", "sample_unit": "step_pair"},
            "params": {
                "rho": {"kind": "fixed", "value": 100.0},
                "x0": {"kind": "fixed", "value": 1.0},
                "y0": {"kind": "fixed", "value": 1.0},
                "z0": {"kind": "fixed", "value": 1.0},
            },
            "solver": {"kind": "lorenz", "dt": 0.01, "t_total": 1.0},
            "trainer": {"mode": "autoregressive", "input_params": ["rho"]},
        }
    )
    from olts import solvers

    with pytest.raises(solvers.DivergenceError):
        client_api.run_client(cfg, sim_id=0, host="127.0.0.1", port=server.port)
    frames = server.wait()
    assert isinstance(frames[0], wire.Hello)
    assert any(isinstance(f, wire.Timestep) for f in frames)
    assert not any(isinstance(f, wire.Bye) for f in frames)
