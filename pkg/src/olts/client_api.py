"""Client-side streaming session.

A solver process opens one TCP connection, announces itself with Hello,
streams Timestep frames in order, and closes with Bye. The session
enforces the ordering contract locally so a buggy solver loop fails fast
instead of corrupting server-side trajectory assembly.
"""

from __future__ import annotations

import socket
import threading
import time
from math import prod

import numpy as np

from . import sampler, solvers, wire


class ClientError(Exception):
    pass


class ContractViolation(ClientError):
    """The caller broke the session's ordering or shape rules."""


class ServerUnavailable(ClientError):
    """Connection kept being refused after all backoff retries."""


BACKOFF_MS = (100, 200, 400, 800, 1600)
HEARTBEAT_INTERVAL_S = 1.0


def _connect_with_backoff(host, port, sleep=time.sleep):
    """Dial (host, port); on refusal retry after 100, 200, ... 1600 ms."""
    last_err = None
    for attempt in range(len(BACKOFF_MS) + 1):
        if attempt > 0:
            sleep(BACKOFF_MS[attempt - 1] / 1000.0)
        try:
            return socket.create_connection((host, port))
        except (ConnectionRefusedError, ConnectionResetError, socket.timeout, OSError) as err:
            last_err = err
    raise ServerUnavailable(
        f"server {host}:{port} refused {len(BACKOFF_MS) + 1} connection attempts"
    ) from last_err


class ClientSession:
    """One simulation's outbound stream.

    Sends Hello on construction and starts a background heartbeat. The
    caller owns the solver loop; this class owns the socket.
    """

    def __init__(
        self,
        host: str,
        port: int,
        client_id: int,
        sim_id: int,
        params,
        field_shape,
        heartbeat_interval_s: float = HEARTBEAT_INTERVAL_S,
        sleep=time.sleep,
        clock=time.time,
    ):
        self.client_id = client_id
        self.sim_id = sim_id
        self.field_shape = tuple(int(d) for d in field_shape)
        self._expected_len = prod(self.field_shape)
        self._params = np.asarray(params, dtype=np.float64).reshape(-1)
        self._sent = 0
        self._finalized = False
        self._broken = None
        self._clock = clock
        self._lock = threading.Lock()
        self._sock = _connect_with_backoff(host, port, sleep)
        self._send(wire.Hello(client_id, sim_id, self._params, self.field_shape))
        self._stop = threading.Event()
        self._beat = threading.Thread(
            target=self._heartbeat_loop, args=(heartbeat_interval_s,), daemon=True
        )
        self._beat.start()

    # -- plumbing ----------------------------------------------------------

    def _send(self, msg) -> None:
        data = wire.encode(msg)
        with self._lock:
            if self._broken is not None:
                raise ClientError(f"connection is broken: {self._broken}")
            try:
                self._sock.sendall(data)
            except OSError as err:
                self._broken = err
                raise ClientError(f"send failed: {err}") from err

    def _heartbeat_loop(self, interval: float) -> None:
        while not self._stop.wait(interval):
            try:
                self._send(
                    wire.Heartbeat(self.sim_id, int(self._clock() * 1000))
                )
            except ClientError:
                return  # socket is gone; finalize() will surface it if called

    # -- public API ---------------------------------------------------------

    @property
    def sent_count(self) -> int:
        return self._sent

    def send_timestep(self, t_index: int, values) -> None:
        """Stream u_t. t_index must be exactly the number already sent."""
        if self._finalized:
            raise ContractViolation("send_timestep after finalize")
        if t_index != self._sent:
            raise ContractViolation(
                f"timestep {t_index} out of order, expected {self._sent}"
            )
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(values) != self._expected_len:
            raise ContractViolation(
                f"field has {len(values)} values, shape {self.field_shape} "
                f"needs {self._expected_len}"
            )
        self._send(wire.Timestep(self.sim_id, t_index, values))
        self._sent += 1

    def finalize(self) -> int:
        """Send Bye and close. Idempotent. Returns the reported last_t."""
        if self._finalized:
            return self._last_t
        self._finalized = True
        self._stop.set()
        self._beat.join(timeout=5.0)
        self._last_t = self._sent - 1 if self._sent else wire.EMPTY_TRAJECTORY
        try:
            self._send(wire.Bye(self.sim_id, self._last_t))
        finally:
            with self._lock:
                try:
                    self._sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                self._sock.close()
        return self._last_t

    def abort(self) -> None:
        """Drop the connection without Bye. For solver failures: the
        trajectory is incomplete and must not be reported as finished;
        the server keeps the frames for a restart to complete. Idempotent."""
        if self._finalized:
            return
        self._finalized = True
        self._last_t = self._sent - 1 if self._sent else wire.EMPTY_TRAJECTORY
        self._stop.set()
        self._beat.join(timeout=5.0)
        with self._lock:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if exc[0] is not None:
            self.abort()
            return False
        self.finalize()
        return False


def run_client(cfg, sim_id: int, host=None, port=None, lam=None, client_id=None,
               throttle_ms: float = 0.0):
    """Run one full simulation against a server: draw λ (unless given),
    solve, stream every timestep, finalize.

    throttle_ms inserts a pause between frames, pacing fast solvers the
    way a production-size one would pace itself. Returns
    (λ, steps_emitted)."""
    if lam is None:
        lam = sampler.next_params(cfg.param_space(), cfg.strategy(), sim_id)
    host = host if host is not None else cfg["server"]["host"]
    port = port if port is not None else cfg["server"]["data_port"]
    params = cfg.solver_params(lam, seed=sim_id)
    session = ClientSession(
        host,
        port,
        client_id if client_id is not None else sim_id,
        sim_id,
        lam.values,
        cfg.field_shape(),
    )
    if throttle_ms > 0:
        def sink(t, values):
            session.send_timestep(t, values)
            time.sleep(throttle_ms / 1000.0)
    else:
        sink = session.send_timestep
    try:
        summary = solvers.run_trajectory(cfg["solver"]["kind"], params, sink)
    except BaseException:
        session.abort()
        raise
    session.finalize()
    return lam, summary.steps_emitted
