"""Command line front-end: ``fedsim run | gen-data | table | serve | join``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import socket
import sys

from .client import Client
from .datagen import write_datasets
from .experiments import (
    benchmark_datasets,
    format_table,
    initial_params,
    load_config,
    read_results,
    run_experiment,
    write_outputs,
)
from .param_math import UsageError
from .server import Server
from .transport import (
    DEFAULT_TIMEOUT,
    ClientEndpoint,
    accept_clients,
    config_digest,
    join,
    parse_address,
    serve,
)

log = logging.getLogger("fedsim")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.carrier:
        cfg = cfg.with_carrier(args.carrier)
    outcomes = run_experiment(cfg, jobs=args.jobs)
    for o in outcomes:
        log.info("%s: all_avg=%.4f (%.1fs)", o["name"], o["row"]["all_avg"], o["seconds"])
    write_outputs(args.out, cfg, outcomes)
    print(format_table(read_results(args.out)))
    return 0


def _cmd_gen_data(args) -> int:
    datasets = benchmark_datasets(args.seed)
    write_datasets(args.out, datasets)
    for ds in datasets:
        print(f"client {ds.name}: train={len(ds.train)} val={len(ds.val)} test={len(ds.test)} "
              f"labels={list(ds.label_space)}")
    return 0


def _cmd_table(args) -> int:
    print(format_table(read_results(args.out_dir)))
    return 0


def _federated_run(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    runs = {r.name: r for r in cfg.runs}
    if args.run not in runs:
        raise UsageError(f"no run named {args.run!r}; have {sorted(runs)}")
    run = runs[args.run]
    if run.mode != "federated":
        raise UsageError(f"run {run.name!r} is not federated")
    digest = config_digest(json.dumps(dataclasses.asdict(run), sort_keys=True))
    return run, digest


def _cmd_serve(args) -> int:
    run, digest = _federated_run(args)
    n = len(benchmark_datasets(run.seed))
    server = Server(run.aggregation_config(n), initial_params(run))
    with socket.create_server(parse_address(args.listen)) as listener:
        log.info("listening on %s:%d for %d clients", *listener.getsockname()[:2], n)
        links = accept_clients(listener, n, args.timeout)
        try:
            trace = serve(server, links, digest)
        finally:
            for link in links:
                link.close()
    for row in trace:
        print(f"round {row.round} client {row.client_id} weight {row.weight:.4f} loss {row.avg_loss:.4f}")
    return 0


def _cmd_join(args) -> int:
    run, digest = _federated_run(args)
    datasets = benchmark_datasets(run.seed)
    ds = datasets[args.client]
    endpoint = ClientEndpoint(Client(ds, run.client_config(ds.client_id), run.model_spec), digest)
    with socket.create_connection(parse_address(args.connect), timeout=args.timeout) as sock:
        sock.settimeout(None)
        join(endpoint, sock)
    log.info("client %s finished after %d rounds", ds.name, len(endpoint.model_rounds))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsim", description="Federated segmentation simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute every run of a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--carrier", choices=["loopback", "socket"])
    r.add_argument("--seed", type=int)
    r.add_argument("--jobs", type=int, default=1, help="runs executed in parallel")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("gen-data", help="export the default benchmark datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=1)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("table", help="pretty-print results.csv")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=_cmd_table)

    s = sub.add_parser("serve", help="host one federated run over TCP")
    s.add_argument("--config", required=True)
    s.add_argument("--run", required=True)
    s.add_argument("--listen", default="127.0.0.1:7070")
    s.add_argument("--seed", type=int)
    s.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    s.set_defaults(func=_cmd_serve)

    j = sub.add_parser("join", help="participate in a hosted run as one client")
    j.add_argument("--config", required=True)
    j.add_argument("--run", required=True)
    j.add_argument("--client", type=int, required=True, help="client index in the benchmark")
    j.add_argument("--connect", default="127.0.0.1:7070")
    j.add_argument("--seed", type=int)
    j.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT)
    j.set_defaults(func=_cmd_join)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"fedsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
