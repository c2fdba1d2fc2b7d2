"""Command-line driver: gen-data, run, qa, compare, serve, client.

Exit codes: 0 success, 1 QA violation, 2 usage/config error, 3 runtime
failure, 4 client authentication rejected.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from pathlib import Path

EXIT_OK, EXIT_QA, EXIT_USAGE, EXIT_RUNTIME, EXIT_AUTH = 0, 1, 2, 3, 4

log = logging.getLogger("fedkd")


class UsageError(Exception):
    pass


def _config(args):
    from fedkd.config import ExperimentConfig
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"master_seed={args.seed}")
    return ExperimentConfig.load(args.config, overrides)


def _setup_logging(out_dir: Path = None, verbose: bool = False):
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.WARNING if not verbose else logging.DEBUG)
    err.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(err)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(out_dir / "run.log")
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fh)


def _data_dir(args, cfg) -> Path:
    return Path(args.data) if getattr(args, "data", None) else cfg.output_dir / "data"


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    from fedkd.data import generate_cohort, write_cohort
    cfg = _config(args)
    out = Path(args.out) if args.out else _data_dir(args, cfg)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} already exists; pass --force to overwrite")
        shutil.rmtree(out)
    spec = cfg.cohort()
    shards = generate_cohort(spec)
    sums = write_cohort(shards, out, spec)
    print(f"wrote {len(shards)} client shards ({len(sums)} files) to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    from fedkd.experiment import run_mode
    cfg = _config(args)
    if args.transport:
        cfg.raw["transport"]["kind"] = args.transport
    data = _data_dir(args, cfg)
    if not data.is_dir() or not any(data.glob("*/manifest.json")):
        raise UsageError(f"no shards under {data}; run gen-data first")
    out = Path(args.out) if args.out else cfg.output_dir
    _setup_logging(out, args.verbose)
    rows = run_mode(cfg, args.mode, data, tasks=args.task, out_dir=out, downstream=args.downstream)
    print(f"{len(rows)} metric rows written to {out / args.mode / 'metrics.csv'}")
    return EXIT_OK


def cmd_qa(args) -> int:
    from fedkd.geometry import build_qa_report, load_landmark_records, validate_qa_report, write_qa_outputs
    records = []
    for p in args.inputs:
        path = Path(p)
        if not path.exists():
            raise UsageError(f"{path} does not exist")
        try:
            records += load_landmark_records(path)
        except ValueError as e:
            raise UsageError(str(e)) from None
    if not records:
        raise UsageError("no landmark records found in the inputs")
    report = build_qa_report(records, threshold=args.threshold)
    problems = validate_qa_report(report)
    if problems:
        raise RuntimeError(f"QA report failed its schema check: {problems[:3]}")
    files = write_qa_outputs(report, args.out, svg=not args.no_svg)
    swaps = report["swaps"] or {"flagged": [], "ambiguous": False}
    print(f"{len(records)} records, {len(swaps['flagged'])} swap flags; report in {files[0]}")
    if swaps["flagged"]:
        print("swapped: " + ", ".join(swaps["flagged"]))
        return EXIT_QA
    return EXIT_OK


def cmd_compare(args) -> int:
    from fedkd.experiment import format_summary, read_metrics_csv, summarize, write_summary_csv
    if len(args.csvs) < 2:
        raise UsageError("compare needs at least two metric files")
    rows = []
    for p in args.csvs:
        try:
            rows += read_metrics_csv(p)
        except (OSError, ValueError, KeyError) as e:
            raise UsageError(str(e)) from None
    summary = summarize(rows)
    sys.stdout.write(format_summary(summary))
    if args.out:
        write_summary_csv(summary, args.out)
    return EXIT_OK


def cmd_serve(args) -> int:
    from fedkd.experiment import matrix_from_spec, run_federated_mode, run_kd_mode, write_metrics_csv
    from fedkd.tasks import FEDERATED_TASKS, parse_task
    from fedkd.transport import FederationServer, Roster, TcpTransport
    cfg = _config(args)
    roster = Roster.load(args.roster)
    host, port = _address(args.bind)
    out = Path(args.out) if args.out else cfg.output_dir
    _setup_logging(out, args.verbose)
    matrix = matrix_from_spec(cfg)
    missing = set(matrix.clients) - set(roster.client_ids)
    if missing:
        raise UsageError(f"roster lacks clients {sorted(missing)}")
    t = cfg.raw["transport"]
    server = FederationServer((host, port), roster, max_frame=int(t["max_frame"]), round_timeout=t["round_timeout"])
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    transport = TcpTransport(server)
    tasks = [parse_task(x) for x in (args.task or FEDERATED_TASKS)]
    mode_dir = out / args.mode
    try:
        if args.mode == "federated":
            rows = run_federated_mode(cfg, matrix, tasks, transport, mode_dir)
        else:
            rows = run_kd_mode(cfg, matrix, tasks, transport, mode_dir)
    finally:
        transport.close()
        mode_dir.mkdir(parents=True, exist_ok=True)
        server.transcript.to_jsonl(mode_dir / "transcript.jsonl")
    write_metrics_csv(rows, mode_dir / "metrics.csv")
    return EXIT_OK


def cmd_client(args) -> int:
    from fedkd.data import read_shard
    from fedkd.federation import ClientWorker
    from fedkd.transport import Credentials, client_poll_loop
    secret = os.environ.get("FEDKD_CLIENT_SECRET")
    if args.secret_file:
        secret = Path(args.secret_file).read_text().strip()
    if not secret:
        raise UsageError("no secret: use --secret-file or FEDKD_CLIENT_SECRET")
    shard = read_shard(args.shard)
    worker = ClientWorker(shard, pseudo_dir=args.shard)
    return client_poll_loop(_address(args.server), Credentials(args.name, secret), worker,
                            poll_interval=args.poll_interval, max_attempts=args.max_attempts)


def _address(text: str):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"address {text!r} is not host:port")
    return host, int(port)


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedkd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--config", help="experiment JSON (defaults apply when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path override, repeatable")
        sp.add_argument("-v", "--verbose", action="store_true")
        if seed:
            sp.add_argument("--seed", type=int, help="override master_seed")

    g = sub.add_parser("gen-data", help="write a synthetic cohort as client shard directories")
    common(g, seed=True)
    g.add_argument("--out", help="target directory (default <output_dir>/data)")
    g.add_argument("--force", action="store_true", help="replace an existing directory")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="train and evaluate in local, federated or kd mode")
    common(r, seed=True)
    r.add_argument("--mode", required=True, choices=["local", "federated", "kd"])
    r.add_argument("--task", action="append", help="restrict to a task, repeatable")
    r.add_argument("--transport", choices=["inproc", "tcp"])
    r.add_argument("--data", help="shard root (default <output_dir>/data)")
    r.add_argument("--out", help="output root (default output_dir)")
    r.add_argument("--downstream", action="store_true", help="kd mode: also run the last-layer vessel transfer")
    r.set_defaults(func=cmd_run)

    q = sub.add_parser("qa", help="landmark geometry QA report")
    q.add_argument("inputs", nargs="*", help="landmark JSON files or directories")
    q.add_argument("--out", default=".", help="directory for qa_report.json and SVGs")
    q.add_argument("--threshold", type=float, default=3.5, help="robust z-score threshold")
    q.add_argument("--no-svg", action="store_true")
    q.add_argument("-v", "--verbose", action="store_true")
    q.set_defaults(func=cmd_qa)

    c = sub.add_parser("compare", help="tabulate metric CSVs across modes")
    c.add_argument("csvs", nargs="*")
    c.add_argument("--out", help="also write the summary as CSV")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("serve", help="standalone federation server")
    common(s, seed=True)
    s.add_argument("--roster", required=True, help="JSON roster of client name -> secret hash")
    s.add_argument("--bind", default="127.0.0.1:7433")
    s.add_argument("--mode", choices=["federated", "kd"], default="federated")
    s.add_argument("--task", action="append")
    s.add_argument("--out")
    s.set_defaults(func=cmd_serve)

    k = sub.add_parser("client", help="standalone polling client for one shard")
    k.add_argument("--server", required=True, help="host:port")
    k.add_argument("--name", required=True)
    k.add_argument("--secret-file")
    k.add_argument("--shard", required=True, help="client shard directory")
    k.add_argument("--poll-interval", type=float, default=0.2)
    k.add_argument("--max-attempts", type=int, default=8)
    k.add_argument("-v", "--verbose", action="store_true")
    k.set_defaults(func=cmd_client)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    if not logging.getLogger().handlers:
        _setup_logging(None, getattr(args, "verbose", False))
    from fedkd.config import ConfigError
    from fedkd.transport import AuthenticationError
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AuthenticationError as e:
        print(f"authentication failed: {e}", file=sys.stderr)
        return EXIT_AUTH
    except Exception as e:  # noqa: BLE001 - stable exit code for any runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
