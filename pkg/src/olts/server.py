"""Online training server.

Accepts solver streams over TCP, deduplicates timesteps, assembles them
into training units, pushes them through a bias-mitigating memory
buffer, and trains one MLP per shard while data keeps arriving.

Two listeners:
  data port    clients: Hello, Timestep`*`, Bye (Heartbeat interleaved)
  control port launcher: ParamRequest, Heartbeat poll, stop request

The socket layer is a thin shell; all state lives in ServerCore, which
is also driven directly (no sockets) by the serialized scheduler used
for reproducibility runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import socket
import threading
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import trainer, wire
from .buffer import Batch, FullTrajectory, Sample, SingleStep, StepPair
from .sampler import ParamVector, next_params

LAUNCHER_SENDER = 0xFFFFFFFFFFFFFFFF
STOP_SIM_ID = 0xFFFFFFFFFFFFFFFF


@dataclass
class SimState:
    sim_id: int
    params: ParamVector
    field_shape: tuple
    shard: int
    seen: set = dc_field(default_factory=set)
    prev_t: int = -1
    prev_field: object = None
    fields_by_t: dict = dc_field(default_factory=dict)
    last_seen_ms: int = 0
    completed: bool = False
    last_t: int = 0
    gapped: bool = False
    hasher: object = None


@dataclass
class Shard:
    index: int
    buffer: object
    model: trainer.Mlp
    metrics: trainer.MetricsWriter
    batch_rng: np.random.Generator
    step: int = 0
    done: bool = False
    last_val_rmse: float = float("nan")
    loss_trace: list = dc_field(default_factory=list)


class ServerCore:
    """All server state and logic, independent of sockets.

    Public entry points take their own locking; reader threads and the
    serialized driver share the exact same code paths.
    """

    def __init__(self, cfg, outdir=None):
        self.cfg = cfg
        self.outdir = outdir if outdir is not None else cfg["paths"]["outdir"]
        os.makedirs(self.outdir, exist_ok=True)
        self.unit_kind = cfg["run"]["sample_unit"]
        self.ensemble_size = cfg["run"]["ensemble_size"]
        self.n_shards = cfg["run"]["shards"]
        self.sgd = cfg.sgd_config()
        self.validate_every = cfg["trainer"]["validate_every"]
        self.checkpoint_every = cfg["trainer"]["checkpoint_every"]
        self.payload_hash = cfg["server"]["payload_hash"]
        self.log_batch_stats = cfg["server"]["log_batch_stats"]
        master = cfg["seeds"]["master"]

        self._build_validation()
        self.mode = cfg.build_mode(self._val_fields)
        self.normalizer = cfg.build_input_normalizer(self._val_fields)

        self.lock = threading.Lock()
        self.sims = {}
        self.hello_counter = 0
        self.assign_counter = 0
        self.samples_received = 0
        self.duplicates_dropped = 0
        self.insertions = 0
        self.protocol_errors = 0
        self.incomplete_trajectories = 0
        self.discarded_trajectories = 0
        self.completed_count = 0
        self.last_activity = time.monotonic()
        self.stop_requested = threading.Event()
        self.abort_error = None

        self.shards = []
        for k in range(self.n_shards):
            rng = np.random.default_rng(np.random.SeedSequence([master, 11, k]))
            model = trainer.init_mlp(
                cfg.model_dims(), cfg["trainer"]["activation"], rng
            )
            metrics = trainer.MetricsWriter(
                os.path.join(self.outdir, f"metrics_shard{k}.csv")
            )
            self.shards.append(
                Shard(
                    index=k,
                    buffer=cfg.make_buffer(seed=master * 1000 + k),
                    model=model,
                    metrics=metrics,
                    batch_rng=np.random.default_rng(
                        np.random.SeedSequence([master, 77, k])
                    ),
                )
            )
        self._stats_files = {}

    # -- validation set -----------------------------------------------------

    def _build_validation(self):
        from .harness import build_validation_set

        self.val_samples, self._val_fields = build_validation_set(self.cfg)

    # -- data-channel events --------------------------------------------------

    def on_hello(self, msg: wire.Hello) -> SimState:
        names = self.cfg.param_space().names
        with self.lock:
            self.last_activity = time.monotonic()
            if len(msg.params) != len(names):
                self.protocol_errors += 1
                raise ProtocolViolation(
                    f"Hello for sim {msg.sim_id} carries {len(msg.params)} "
                    f"params, space has {len(names)}"
                )
            sim = self.sims.get(msg.sim_id)
            if sim is not None:
                # restarted client; keep the original shard and λ
                if msg.params.tobytes() != sim.params.values.tobytes():
                    self.protocol_errors += 1
                sim.prev_t = -1
                sim.prev_field = None
                return sim
            shard = self.hello_counter % self.n_shards
            self.hello_counter += 1
            lam = ParamVector(names, msg.params)
            sim = SimState(
                sim_id=msg.sim_id,
                params=lam,
                field_shape=msg.field_shape,
                shard=shard,
                hasher=hashlib.sha256() if self.payload_hash else None,
            )
            self.sims[msg.sim_id] = sim
            return sim

    def on_timestep(self, msg: wire.Timestep, wait_for_space=True) -> bool:
        """Returns False when the frame was a duplicate or invalid."""
        with self.lock:
            self.last_activity = time.monotonic()
            sim = self.sims.get(msg.sim_id)
            if sim is None:
                self.protocol_errors += 1
                raise ProtocolViolation(f"Timestep for unknown sim {msg.sim_id}")
            self.samples_received += 1
            if msg.t_index in sim.seen:
                self.duplicates_dropped += 1
                if self.unit_kind == "step_pair":
                    # keep the pair chain warm so the first fresh frame
                    # after a restart still closes its pair
                    sim.prev_t, sim.prev_field = msg.t_index, msg.values
                return False
            sim.seen.add(msg.t_index)
            if sim.hasher is not None:
                sim.hasher.update(msg.values.tobytes())
            unit = self._assemble(sim, msg.t_index, msg.values)
            shard = self.shards[sim.shard]
            lam = sim.params
        if unit is None:
            return True
        self._insert(shard, Sample(msg.sim_id, lam, unit), wait_for_space)
        return True

    def _on_backpressure(self, shard: Shard) -> bool:
        """Buffer full: wait for the trainer to free a slot. Returns
        whether the insert should be retried."""
        shard.buffer.wait_for_space(0.1)
        return not self.stop_requested.is_set()

    def _assemble(self, sim: SimState, t: int, values: np.ndarray):
        """One accepted timestep -> zero or one training unit."""
        if self.unit_kind == "single_step":
            return SingleStep(t, values)
        if self.unit_kind == "step_pair":
            prev_t, prev_field = sim.prev_t, sim.prev_field
            sim.prev_t, sim.prev_field = t, values
            if prev_field is not None and t == prev_t + 1:
                return StepPair(prev_t, np.stack([prev_field, values]))
            return None
        sim.fields_by_t[t] = values
        return None

    def _insert(self, shard: Shard, sample: Sample, wait_for_space: bool) -> None:
        while True:
            accepted = shard.buffer.put(sample)
            if accepted or not shard.buffer.backpressure_on_full:
                # a rejected put under a sampling policy is the policy
                # dropping the sample, not a full buffer; only read-once
                # rejections mean "wait and retry"
                with self.lock:
                    self.insertions += 1
                return
            if not wait_for_space or not self._on_backpressure(shard):
                return  # shed when shutting down

    def on_bye(self, msg: wire.Bye, wait_for_space=True) -> None:
        with self.lock:
            self.last_activity = time.monotonic()
            sim = self.sims.get(msg.sim_id)
            if sim is None:
                self.protocol_errors += 1
                raise ProtocolViolation(f"Bye for unknown sim {msg.sim_id}")
            if sim.completed:
                return
            sim.completed = True
            sim.last_t = msg.last_t
            self.completed_count += 1
            if msg.last_t == wire.EMPTY_TRAJECTORY:
                expected = set()
            else:
                expected = set(range(msg.last_t + 1))
            sim.gapped = sim.seen != expected
            if sim.gapped:
                self.incomplete_trajectories += 1
            make_full = (
                self.unit_kind == "full_trajectory"
                and not sim.gapped
                and bool(expected)
            )
            if self.unit_kind == "full_trajectory" and not make_full:
                self.discarded_trajectories += 1
            if make_full:
                fields = np.stack([sim.fields_by_t[t] for t in range(msg.last_t + 1)])
                unit = FullTrajectory(fields)
                shard = self.shards[sim.shard]
                lam = sim.params
            sim.fields_by_t = {}
            sim.prev_field = None
        if make_full:
            self._insert(shard, Sample(msg.sim_id, lam, unit), wait_for_space)

    def on_heartbeat(self, msg: wire.Heartbeat) -> None:
        with self.lock:
            self.last_activity = time.monotonic()
            sim = self.sims.get(msg.sender_id)
            if sim is not None:
                sim.last_seen_ms = msg.wallclock_ms

    # -- control-channel requests ---------------------------------------------

    def control_reply(self, msg) -> list:
        if isinstance(msg, wire.ParamRequest):
            return self._assign_params(msg.count)
        if isinstance(msg, wire.Heartbeat):
            return self._status_snapshot()
        if isinstance(msg, wire.Bye) and msg.sim_id == STOP_SIM_ID:
            self.stop_requested.set()
            return [wire.Ack(wire.MSG_BYE)]
        with self.lock:
            self.protocol_errors += 1
        raise ProtocolViolation(f"unexpected control message {type(msg).__name__}")

    def _assign_params(self, count: int) -> list:
        out = []
        space = self.cfg.param_space()
        strategy = self.cfg.strategy()
        with self.lock:
            while count > 0 and self.assign_counter < self.ensemble_size:
                idx = self.assign_counter
                self.assign_counter += 1
                lam = next_params(space, strategy, idx)
                out.append(wire.ParamAssign(idx, lam.values))
                count -= 1
        out.append(wire.Ack(wire.MSG_PARAM_REQUEST))
        return out

    def _status_snapshot(self) -> list:
        out = []
        with self.lock:
            for sim in self.sims.values():
                if sim.completed:
                    out.append(wire.Bye(sim.sim_id, sim.last_t))
                else:
                    out.append(wire.Heartbeat(sim.sim_id, sim.last_seen_ms))
        out.append(wire.Ack(wire.MSG_HEARTBEAT))
        return out

    # -- training ---------------------------------------------------------------

    def train_one_batch(self, shard: Shard, batch: Batch) -> float:
        loss = trainer.train_on_batch(
            shard.model, batch, self.mode, self.normalizer, self.sgd, shard.step
        )
        shard.step += 1
        shard.loss_trace.append(loss)
        if self.log_batch_stats:
            self._write_batch_stats(shard, batch, loss)
        if shard.step % self.validate_every == 0 or shard.step == self.sgd.max_batches:
            self._validate_and_log(shard, loss)
        if self.checkpoint_every and shard.step % self.checkpoint_every == 0:
            self._checkpoint(shard)
        return loss

    def _validate_and_log(self, shard: Shard, train_loss: float) -> None:
        rmse = trainer.validate(shard.model, self.val_samples, self.mode, self.normalizer)
        vloss = trainer.validation_loss(
            shard.model, self.val_samples, self.mode, self.normalizer
        )
        shard.last_val_rmse = rmse
        shard.metrics.append(
            shard.step, self.sgd.lr(shard.step - 1), train_loss, rmse, vloss
        )

    def _checkpoint(self, shard: Shard) -> None:
        path = os.path.join(self.outdir, f"checkpoint_shard{shard.index}.bin")
        trainer.checkpoint_save(shard.model, self.sgd, shard.step, path)

    def _write_batch_stats(self, shard: Shard, batch: Batch, loss: float) -> None:
        f = self._stats_files.get(shard.index)
        if f is None:
            f = open(
                os.path.join(self.outdir, f"batch_stats_shard{shard.index}.csv"), "w"
            )
            f.write("step,count,mean,std,min,max,param_mean,loss\n")
            self._stats_files[shard.index] = f
        flat = np.concatenate(
            [np.asarray(s.unit.fields if hasattr(s.unit, "fields") else s.unit.field).ravel()
             for s in batch.samples]
        )
        # first configured input parameter, raw scale; the batch-level
        # drift of this column is the bias discriminator between policies
        pname = self.cfg["trainer"]["input_params"][0]
        pmean = float(
            np.mean([s.params.values[s.params.names.index(pname)] for s in batch.samples])
        )
        f.write(
            f"{shard.step},{flat.size},{repr(float(flat.mean()))},"
            f"{repr(float(flat.std()))},{repr(float(flat.min()))},"
            f"{repr(float(flat.max()))},{repr(pmean)},{repr(float(loss))}\n"
        )

    def try_train(self, shard: Shard) -> bool:
        """One batch if the buffer is ready. Divergence aborts the run."""
        if shard.step >= self.sgd.max_batches:
            shard.done = True
            return False
        batch = shard.buffer.try_get_batch(self.sgd.batch_size, shard.batch_rng)
        if batch is None:
            return False
        try:
            self.train_one_batch(shard, batch)
        except trainer.TrainingDiverged as err:
            self.abort_error = f"shard {shard.index}: {err}"
            self._checkpoint(shard)
            self.stop_requested.set()
            shard.done = True
            return False
        if shard.step >= self.sgd.max_batches:
            shard.done = True
        return True

    def drain(self, shard: Shard) -> int:
        """Train whatever remains below the ready watermark, one final
        partial batch at a time (read-once policy only)."""
        trained = 0
        if not shard.buffer.backpressure_on_full:
            return 0
        while shard.step < self.sgd.max_batches:
            rest = shard.buffer.drain_remainder()
            if not rest:
                break
            size = min(len(rest), self.sgd.batch_size)
            batch = Batch(tuple(rest[:size]), shard.step)
            try:
                self.train_one_batch(shard, batch)
            except trainer.TrainingDiverged as err:
                self.abort_error = f"shard {shard.index}: {err}"
                self._checkpoint(shard)
                self.stop_requested.set()
                break
            trained += 1
            for extra in rest[size:]:
                shard.buffer.put(extra)
        return trained

    # -- reporting ---------------------------------------------------------------

    def ensemble_complete(self) -> bool:
        with self.lock:
            return self.completed_count >= self.ensemble_size

    def finish(self) -> dict:
        for shard in self.shards:
            self._checkpoint(shard)
            shard.metrics.close()
        for f in self._stats_files.values():
            f.close()
        report = self.report()
        with open(os.path.join(self.outdir, "server_report.json"), "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
        return report

    def report(self) -> dict:
        with self.lock:
            out = {
                "status": "aborted" if self.abort_error else "ok",
                "abort_error": self.abort_error,
                "samples_received": self.samples_received,
                "duplicates_dropped": self.duplicates_dropped,
                "insertions": self.insertions,
                "batches_trained": sum(s.step for s in self.shards),
                "protocol_errors": self.protocol_errors,
                "incomplete_trajectories": self.incomplete_trajectories,
                "discarded_trajectories": self.discarded_trajectories,
                "completed_sims": self.completed_count,
                "hello_count": self.hello_counter,
                "val_rmse": [
                    None if np.isnan(s.last_val_rmse) else s.last_val_rmse
                    for s in self.shards
                ],
                "shards": self.n_shards,
            }
            if self.payload_hash:
                out["payload_hashes"] = {
                    str(sim.sim_id): sim.hasher.hexdigest()
                    for sim in self.sims.values()
                    if sim.hasher is not None
                }
        return out


class ProtocolViolation(Exception):
    pass


class OnlineServer:
    """Socket shell around ServerCore: listeners, reader threads, one
    trainer thread per shard, and the stop-condition watchdog."""

    def __init__(self, cfg, outdir=None):
        self.cfg = cfg
        self.core = ServerCore(cfg, outdir)
        self.data_port = None
        self.ctrl_port = None
        self._threads = []
        self._conn_threads = []
        self._listeners = []
        self._open_conns = set()
        self._conn_lock = threading.Lock()
        self._finished = threading.Event()
        self._report = None

    # -- lifecycle -----------------------------------------------------------

    def start(self):
        host = self.cfg["server"]["host"]
        self._data_sock = self._listen(host, self.cfg["server"]["data_port"])
        self._ctrl_sock = self._listen(host, self.cfg["server"]["ctrl_port"])
        self.data_port = self._data_sock.getsockname()[1]
        self.ctrl_port = self._ctrl_sock.getsockname()[1]
        self._listeners = [self._data_sock, self._ctrl_sock]
        for target, arg in (
            (self._accept_loop, (self._data_sock, self._data_conn)),
            (self._accept_loop, (self._ctrl_sock, self._ctrl_conn)),
            (self._watchdog, ()),
        ):
            t = threading.Thread(target=target, args=arg, daemon=True)
            t.start()
            self._threads.append(t)
        for shard in self.core.shards:
            t = threading.Thread(target=self._train_loop, args=(shard,), daemon=True)
            t.start()
            self._threads.append(t)
        return self.data_port, self.ctrl_port

    def _listen(self, host, port):
        s = socket.socket()
        s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        s.bind((host, port))
        s.listen(64)
        return s

    def _accept_loop(self, sock, handler):
        while not self.core.stop_requested.is_set():
            try:
                conn, _ = sock.accept()
            except OSError:
                return
            with self._conn_lock:
                self._open_conns.add(conn)
            t = threading.Thread(target=handler, args=(conn,), daemon=True)
            t.start()
            self._conn_threads.append(t)

    def _drop_conn(self, conn):
        with self._conn_lock:
            self._open_conns.discard(conn)

    # -- data channel -----------------------------------------------------------

    def _data_conn(self, conn):
        try:
            stream = conn.makefile("rb")
            decoder = wire.StreamDecoder(stream)
            said_hello = False
            while True:
                msg = decoder.read()
                if msg is None:
                    return
                if isinstance(msg, wire.Heartbeat):
                    self.core.on_heartbeat(msg)
                    continue
                if isinstance(msg, wire.Hello):
                    self.core.on_hello(msg)
                    said_hello = True
                elif not said_hello:
                    with self.core.lock:
                        self.core.protocol_errors += 1
                    return  # data before Hello: drop the connection
                elif isinstance(msg, wire.Timestep):
                    self.core.on_timestep(msg)
                elif isinstance(msg, wire.Bye):
                    self.core.on_bye(msg)
                    return
                else:
                    with self.core.lock:
                        self.core.protocol_errors += 1
                    return
        except wire.Truncated:
            pass  # peer died mid-frame: transport loss, not a violation
        except wire.WireError:
            with self.core.lock:
                self.core.protocol_errors += 1
        except ProtocolViolation:
            pass  # already counted by the core
        except OSError:
            pass
        finally:
            self._drop_conn(conn)
            conn.close()

    # -- control channel -----------------------------------------------------------

    def _ctrl_conn(self, conn):
        try:
            stream = conn.makefile("rb")
            decoder = wire.StreamDecoder(stream)
            while True:
                msg = decoder.read()
                if msg is None:
                    return
                for reply in self.core.control_reply(msg):
                    conn.sendall(wire.encode(reply))
        except wire.Truncated:
            pass  # peer died mid-frame
        except wire.WireError:
            with self.core.lock:
                self.core.protocol_errors += 1
        except (ProtocolViolation, OSError):
            pass
        finally:
            self._drop_conn(conn)
            conn.close()

    # -- training loop -----------------------------------------------------------

    def _train_loop(self, shard):
        core = self.core
        while not shard.done:
            if core.stop_requested.is_set():
                break
            if core.try_train(shard):
                continue
            if shard.done:
                break
            if core.ensemble_complete():
                # everything that will ever arrive has arrived
                core.drain(shard)
                break
            shard.buffer.wait_for_change(0.05)
        if core.stop_requested.is_set() and not shard.done:
            core.drain(shard)
        shard.done = True

    # -- stop conditions -----------------------------------------------------------

    def _watchdog(self):
        grace = self.cfg["server"]["idle_grace_s"]
        while True:
            if self.core.stop_requested.is_set():
                break
            if all(s.done for s in self.core.shards):
                break
            if self.core.ensemble_complete():
                # trainer threads will drain and finish on their own
                time.sleep(0.02)
                continue
            with self.core.lock:
                idle = time.monotonic() - self.core.last_activity
                anyone = self.core.hello_counter > 0
            if anyone and idle > grace:
                # clients stopped coming back; end the run
                self.core.stop_requested.set()
                break
            time.sleep(0.02)
        self._shutdown()

    def _shutdown(self):
        self.core.stop_requested.set()
        for s in self._listeners:
            # shutdown() wakes a thread parked in accept(); close() alone
            # leaves it blocked in the syscall forever
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                s.close()
            except OSError:
                pass
        with self._conn_lock:
            lingering = list(self._open_conns)
        for conn in lingering:
            # idle peers (e.g. a launcher's control link) never close
            # first; cut them so their reader threads can exit
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
        deadline = time.monotonic() + 10.0
        for t in self._conn_threads:
            t.join(timeout=max(0.0, deadline - time.monotonic()))
        for t in self._threads:
            if t is not threading.current_thread():
                t.join(timeout=max(0.0, deadline - time.monotonic()))
        self._report = self.core.finish()
        self._finished.set()

    # -- public API -----------------------------------------------------------

    def stop(self):
        self.core.stop_requested.set()

    def wait(self, timeout=None) -> bool:
        return self._finished.wait(timeout)

    @property
    def report(self):
        return self._report


def serve(cfg, outdir=None) -> dict:
    """Run a server to completion; returns the final report dict."""
    server = OnlineServer(cfg, outdir)
    server.start()
    server.wait()
    return server.report


class _SerializedCore(ServerCore):
    """Core variant for single-threaded runs: a full buffer is relieved
    by training immediately instead of waiting on another thread."""

    def _on_backpressure(self, shard: Shard) -> bool:
        return self.try_train(shard)


class SerializedServer:
    """Deterministic single-threaded scheduler over the same core.

    Simulations run in sim_id order in-process; after every timestep the
    trainer consumes every batch the buffer will give. Two runs of the
    same config produce bitwise identical loss traces, metrics files,
    and checkpoints.
    """

    def __init__(self, cfg, outdir=None):
        self.cfg = cfg
        self.core = _SerializedCore(cfg, outdir)

    def run(self) -> dict:
        from . import solvers

        cfg = self.cfg
        core = self.core
        kind = cfg["solver"]["kind"]
        space = cfg.param_space()
        strategy = cfg.strategy()
        shape = cfg.field_shape()
        for sim_id in range(cfg["run"]["ensemble_size"]):
            if core.stop_requested.is_set():
                break
            lam = next_params(space, strategy, sim_id)
            core.on_hello(wire.Hello(sim_id, sim_id, lam.values, shape))
            params = cfg.solver_params(lam, seed=sim_id)
            last_t = 0

            def sink(t, values, sim_id=sim_id):
                nonlocal last_t
                last_t = t
                core.on_timestep(wire.Timestep(sim_id, t, values))
                for shard in core.shards:
                    if shard.buffer.backpressure_on_full:
                        # read-once: reads free slots, so this terminates
                        while core.try_train(shard):
                            pass
                    else:
                        # sampling policies never drain; pace at one
                        # batch per accepted timestep
                        core.try_train(shard)

            try:
                solvers.run_trajectory(kind, params, sink)
            except solvers.DivergenceError:
                continue  # incomplete, like a client that died: no Bye
            core.on_bye(wire.Bye(sim_id, last_t))
        for shard in core.shards:
            if shard.buffer.backpressure_on_full:
                while core.try_train(shard):
                    pass
                core.drain(shard)
        return core.finish()
