"""Command-line front end.

    olts launch           server + fault-tolerant client ensemble
    olts server           training server alone
    olts client           one streaming solver client
    olts offline-generate store the ensemble as a dataset file
    olts offline-train    epoch training over a stored dataset
    olts subsample        thin a dataset in time
    olts stats            dataset summary statistics
    olts compare          final-RMSE comparison of two metric files

Exit codes: 0 success, 2 bad configuration or usage, 3 runtime failure.
The client's --server flag falls back to the OLTS_SERVER environment
variable, then to the configured host and port.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ConfigError, load_config


def _add_config(p, full_scale=True):
    p.add_argument("--config", required=True, help="run configuration (TOML)")
    if full_scale:
        p.add_argument(
            "--full-scale",
            action="store_true",
            help="use the expensive preset variant instead of the desk one",
        )
    p.add_argument("--outdir", default=None, help="override paths.outdir")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="olts", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("launch", help="run server and client ensemble together")
    _add_config(p)

    p = sub.add_parser("server", help="run the training server")
    _add_config(p)
    p.add_argument(
        "--serialized",
        action="store_true",
        help="single-threaded in-process run (bitwise reproducible)",
    )

    p = sub.add_parser("client", help="stream one simulation to a server")
    _add_config(p)
    p.add_argument("--sim-id", type=int, required=True)
    p.add_argument(
        "--server",
        default=None,
        help="host:port of the data channel (default: $OLTS_SERVER, then config)",
    )
    p.add_argument(
        "--throttle-ms",
        type=float,
        default=0.0,
        help="pause between frames, to pace fast desk-scale solvers",
    )

    p = sub.add_parser("offline-generate", help="write the ensemble to a dataset file")
    _add_config(p)
    p.add_argument("--out", required=True, help="dataset file to create")

    p = sub.add_parser("offline-train", help="train over a stored dataset")
    _add_config(p)
    p.add_argument("--data", required=True, help="dataset file to train on")

    p = sub.add_parser("subsample", help="keep every k-th timestep of a dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--every", type=int, required=True)

    p = sub.add_parser("stats", help="print dataset statistics")
    p.add_argument("--data", required=True)

    p = sub.add_parser("compare", help="compare two metrics files")
    p.add_argument("--run", required=True, help="metrics CSV of the candidate run")
    p.add_argument("--baseline", required=True, help="metrics CSV of the baseline")

    return top


def _load(args):
    cfg = load_config(args.config, full_scale=getattr(args, "full_scale", False))
    if getattr(args, "outdir", None):
        cfg.tree["paths"]["outdir"] = args.outdir
    return cfg


def _print_kv(d: dict) -> None:
    for key in sorted(d):
        print(f"{key}={d[key]}")


def cmd_launch(args) -> int:
    from . import launcher, server

    cfg = _load(args)
    srv = server.OnlineServer(cfg)
    data_port, ctrl_port = srv.start()
    print(f"data_port={data_port}", flush=True)
    print(f"ctrl_port={ctrl_port}", flush=True)
    backend = launcher.LocalProcess(
        args.config,
        cfg["server"]["host"],
        data_port,
        extra_args=("--full-scale",) if args.full_scale else (),
    )
    run_report = launcher.launch(cfg, backend, ctrl_port=ctrl_port)
    srv.wait()
    _print_kv(run_report)
    _print_kv(srv.report)
    if srv.report["status"] != "ok" or run_report["abandoned"] > 0:
        return 3
    return 0


def cmd_server(args) -> int:
    from . import server

    cfg = _load(args)
    if args.serialized:
        report = server.SerializedServer(cfg).run()
    else:
        srv = server.OnlineServer(cfg)
        data_port, ctrl_port = srv.start()
        print(f"data_port={data_port}", flush=True)
        print(f"ctrl_port={ctrl_port}", flush=True)
        srv.wait()
        report = srv.report
    _print_kv(report)
    return 0 if report["status"] == "ok" else 3


def cmd_client(args) -> int:
    from . import client_api

    cfg = _load(args)
    target = args.server or os.environ.get("OLTS_SERVER")
    if target:
        host, _, port_text = target.rpartition(":")
        if not host or not port_text.isdigit():
            raise ConfigError(f"--server must be host:port, got {target!r}")
        host, port = host, int(port_text)
    else:
        host, port = cfg["server"]["host"], cfg["server"]["data_port"]
        if port == 0:
            raise ConfigError("no server address: pass --server or set OLTS_SERVER")
    lam, emitted = client_api.run_client(
        cfg, args.sim_id, host=host, port=port, throttle_ms=args.throttle_ms
    )
    print(f"sim_id={args.sim_id}")
    print(f"params={json.dumps(lam.as_dict(), sort_keys=True)}")
    print(f"timesteps={emitted}")
    return 0


def cmd_offline_generate(args) -> int:
    from . import harness

    cfg = _load(args)
    manifest = harness.generate_dataset(cfg, args.out)
    _print_kv({"records": manifest["count"], "path": args.out})
    return 0


def cmd_offline_train(args) -> int:
    from . import harness

    cfg = _load(args)
    report = harness.train_offline(cfg, args.data)
    _print_kv(report)
    return 0 if report["status"] == "ok" else 3


def cmd_subsample(args) -> int:
    from . import dataset

    n = dataset.subsample_dataset(args.src, args.out, args.every)
    _print_kv({"records": n, "path": args.out})
    return 0


def cmd_stats(args) -> int:
    from . import harness

    _print_kv(harness.dataset_stats(args.data))
    return 0


def cmd_compare(args) -> int:
    from . import harness

    _print_kv(harness.compare_runs(args.run, args.baseline))
    return 0


_COMMANDS = {
    "launch": cmd_launch,
    "server": cmd_server,
    "client": cmd_client,
    "offline-generate": cmd_offline_generate,
    "offline-train": cmd_offline_train,
    "subsample": cmd_subsample,
    "stats": cmd_stats,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"olts: configuration error: {err}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 3
    except Exception as err:  # runtime failures map to one exit code
        print(f"olts: {type(err).__name__}: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
