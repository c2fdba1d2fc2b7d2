"""Mode runners behind the CLI: local, federated and kd, plus metric CSV I/O."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

from fedkd.config import ExperimentConfig
from fedkd.data import client_dir_name, read_cohort
from fedkd.federation import (
    ClientWorker, InProcessTransport, ParticipationMatrix, evaluate_remote,
    run_federated, select_participants, train_local, write_history_csv,
)
from fedkd.kd import downstream_dataset, downstream_last_layer, run_pipeline, single_task_arch
from fedkd.tasks import FEDERATED_TASKS, parse_task

log = logging.getLogger(__name__)

METRIC_FIELDS = ["mode", "task", "split", "client", "metric_mean", "metric_std", "n"]
MODES = ("local", "federated", "kd")


def matrix_from_spec(cfg: ExperimentConfig) -> ParticipationMatrix:
    """Participation known from the cohort definition alone (no shard access needed)."""
    spec = cfg.cohort()
    has = {c: {t for t in FEDERATED_TASKS if spec.fraction(c, t) > 0} for c in spec.client_ids}
    return ParticipationMatrix(has, cfg.test_clients())


def make_transport(cfg: ExperimentConfig, shards, data_dir=None):
    pseudo = {s.client_id: Path(data_dir) / client_dir_name(s.client_id) for s in shards} if data_dir else {}
    t = cfg.raw["transport"]
    if t["kind"] == "tcp":
        from fedkd.transport import TcpTransport
        return TcpTransport.loopback(shards, poll_interval=float(t["poll_interval"]), pseudo_dirs=pseudo,
                                     round_timeout=t["round_timeout"], max_frame=int(t["max_frame"]))
    return InProcessTransport([ClientWorker(s, pseudo_dir=pseudo.get(s.client_id)) for s in shards])


def _rows(mode, metrics, client="all"):
    return [{"mode": mode, "task": m.task, "split": m.split, "client": client, "metric_mean": m.metric_mean,
             "metric_std": m.metric_std, "n": m.n} for m in metrics]


def _eval_kw(cfg):
    return dict(norm=cfg.norm(), sigma_mm=cfg.sigma_mm, loss_cfg=cfg.loss())


def run_local(cfg: ExperimentConfig, shards, tasks, out_dir: Path) -> list:
    """One model per (client, task) on that client's labels; absent labels mean absent rows."""
    matrix = ParticipationMatrix.from_shards(shards, cfg.test_clients())
    evaluator = InProcessTransport.from_shards(shards)
    rcfg = cfg.rounds("local")
    rows = []
    for task in tasks:
        arch = single_task_arch(cfg.arch("teacher"), task)
        for sh in shards:
            if not sh.labeled.get(task):
                log.info("client %d has no %s labels; no local row", sh.client_id, task.value)
                continue
            p = train_local(sh, task, rcfg, arch, stage="teacher", loss_cfg=cfg.loss(), norm=cfg.norm(),
                            sigma_mm=cfg.sigma_mm)
            d = out_dir / task.value
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{client_dir_name(sh.client_id)}.params").write_bytes(p.to_bytes())
            rows += _rows("local", evaluate_remote(evaluator, p, task, arch, matrix, round_index=rcfg.n_rounds,
                                                   **_eval_kw(cfg)), client=str(sh.client_id))
    return rows


def run_federated_mode(cfg: ExperimentConfig, matrix, tasks, transport, out_dir: Path) -> list:
    rcfg = cfg.rounds("teacher")
    rows = []
    for task in tasks:
        arch = single_task_arch(cfg.arch("teacher"), task)
        p, hist = run_federated(task, None, matrix, rcfg, arch, transport=transport, stage="teacher", **_eval_kw(cfg))
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{task.value}.params").write_bytes(p.to_bytes())
        write_history_csv(hist, out_dir / f"history_{task.value}.csv")
        rows += _rows("federated", [h for h in hist if h.round == rcfg.n_rounds])
    return rows


def run_kd_mode(cfg: ExperimentConfig, matrix, tasks, transport, out_dir: Path, downstream: bool = False) -> list:
    res = run_pipeline(matrix, transport=transport, teacher_arch=cfg.arch("teacher"), student_arch=cfg.arch("student"),
                       teacher_cfg=cfg.rounds("teacher"), student_cfg=cfg.rounds("student"),
                       finetune_cfg=cfg.rounds("finetune"), output_dir=out_dir, **_eval_kw(cfg))
    rows = []
    for task in tasks:
        rows += _rows("kd", evaluate_remote(transport, res.finetuned, task, res.student_arch, matrix,
                                            round_index=cfg.rounds("finetune").n_rounds, **_eval_kw(cfg)))
    if downstream:
        rows += run_downstream(cfg, res)
    return rows


def run_downstream(cfg: ExperimentConfig, res) -> list:
    ds = cfg.raw["downstream"]
    train, test = downstream_dataset(cfg.master_seed, n_samples=int(ds["n_samples"]),
                                     test_fraction=float(ds["test_fraction"]),
                                     grid_shape=tuple(cfg.raw["cohort"]["grid_shape"]),
                                     spacing_mm=tuple(cfg.raw["cohort"]["spacing_mm"]))
    rcfg = cfg.rounds("downstream")
    base = cfg.downstream_baseline
    rows = []
    for name, p, arch in (("kd-student", res.finetuned, res.student_arch),
                          (f"teacher-{base.value}", res.teachers.params[base], res.teachers.archs[base])):
        dice = downstream_last_layer(p, arch, train, test, rcfg, loss_cfg=cfg.loss(), norm=cfg.norm())[2]
        rows.append({"mode": "downstream", "task": "DownstreamVessel", "split": name, "client": "all",
                     "metric_mean": dice, "metric_std": float("nan"), "n": len(test)})
    return rows


def run_mode(cfg: ExperimentConfig, mode: str, data_dir, tasks=None, out_dir=None, downstream: bool = False) -> list:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    tasks = [parse_task(t) for t in (tasks or FEDERATED_TASKS)]
    shards = read_cohort(data_dir)
    out = Path(out_dir or cfg.output_dir) / mode
    out.mkdir(parents=True, exist_ok=True)
    if mode == "local":
        rows = run_local(cfg, shards, tasks, out)
    else:
        matrix = ParticipationMatrix.from_shards(shards, cfg.test_clients())
        for t in tasks:
            select_participants(t, matrix)
        transport = make_transport(cfg, shards, data_dir)
        try:
            if mode == "federated":
                rows = run_federated_mode(cfg, matrix, tasks, transport, out)
            else:
                rows = run_kd_mode(cfg, matrix, tasks, transport, out, downstream=downstream)
        finally:
            transport.close()
        if hasattr(transport, "transcript"):
            transport.transcript.to_jsonl(out / "transcript.jsonl")
    write_metrics_csv(rows, out / "metrics.csv")
    (out / "config.json").write_text(cfg.to_json())
    return rows


# --------------------------------------------------------------------------
# metric CSVs


def write_metrics_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["mode"], r["task"], r["split"], r["client"], repr(float(r["metric_mean"])),
                        repr(float(r["metric_std"])), int(r["n"])])


def read_metrics_csv(path) -> list:
    with Path(path).open(newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRIC_FIELDS:
            raise ValueError(f"{path}: expected columns {METRIC_FIELDS}, got {reader.fieldnames}")
        rows = []
        for r in reader:
            r["metric_mean"] = float(r["metric_mean"])
            r["metric_std"] = float(r["metric_std"])
            r["n"] = int(r["n"])
            rows.append(r)
    return rows


def summarize(rows) -> list:
    """One row per (task, mode, split): mean and std over client rows, best mode marked.

    Landmark tasks are better when lower (mm), segmentation when higher.
    """
    groups = {}
    for r in rows:
        if r["mode"] == "downstream":
            continue
        groups.setdefault((r["task"], r["mode"], r["split"]), []).append(r)
    out = []
    for (task, mode, split), rs in sorted(groups.items()):
        if len(rs) == 1:
            mean, std = rs[0]["metric_mean"], rs[0]["metric_std"]
        else:
            vals = [x["metric_mean"] for x in rs]
            mean = sum(vals) / len(vals)
            std = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
        out.append({"task": task, "mode": mode, "split": split, "mean": mean, "std": std, "clients": len(rs), "best": ""})
    modes = {o["mode"] for o in out}
    if len(modes) > 1:
        by = {}
        for o in out:
            by.setdefault((o["task"], o["split"]), []).append(o)
        for (task, _), os_ in by.items():
            lower = parse_task(task).is_landmark
            best = min(os_, key=lambda o: o["mean"]) if lower else max(os_, key=lambda o: o["mean"])
            if len(os_) > 1:
                best["best"] = "*"
    return out


def format_summary(summary) -> str:
    head = f"{'task':<18}{'mode':<11}{'split':<21}{'mean':>10}{'std':>10}  best"
    lines = [head, "-" * len(head)]
    for s in summary:
        lines.append(f"{s['task']:<18}{s['mode']:<11}{s['split']:<21}{s['mean']:>10.3f}{s['std']:>10.3f}  {s['best']}")
    return "\n".join(lines) + "\n"


def write_summary_csv(summary, path):
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["task", "mode", "split", "mean", "std", "clients", "best"])
        for s in summary:
            w.writerow([s["task"], s["mode"], s["split"], repr(s["mean"]), repr(s["std"]), s["clients"], s["best"]])

