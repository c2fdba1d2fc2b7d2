"""Teachers, pseudo-labels, multi-head student, head finetuning, last-layer transfer."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from fedkd.data import ClientShard, NormalizationSpec
from fedkd.federation import (
    InProcessTransport, ParticipationMatrix, RoundConfig, evaluate,
    evaluate_remote, init_seed, make_job, run_federated, run_rounds, train_local,
)
from fedkd.nn import LossConfig, ModelArch, ParamVector, add_head, head_group, init_params
from fedkd.tasks import FEDERATED_TASKS, TaskKind, parse_task

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# teacher bundle


@dataclass
class TeacherBundle:
    params: dict
    archs: dict
    history: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.params) != set(FEDERATED_TASKS) or set(self.archs) != set(FEDERATED_TASKS):
            raise ValueError("a teacher bundle holds exactly the three federated tasks")

    def fingerprint(self, task) -> str:
        return self.params[parse_task(task)].fingerprint()

    def save(self, directory) -> list:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        meta = {"tasks": {}, "provenance": self.provenance}
        for t in FEDERATED_TASKS:
            name = f"teacher_{t.value}.params"
            (d / name).write_bytes(self.params[t].to_bytes())
            files.append(d / name)
            meta["tasks"][t.value] = {"file": name, "arch": self.archs[t].to_dict(), "fingerprint": self.fingerprint(t)}
        (d / "teachers.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return files

    @classmethod
    def load(cls, directory) -> "TeacherBundle":
        d = Path(directory)
        meta = json.loads((d / "teachers.json").read_text())
        params, archs = {}, {}
        for name, info in meta["tasks"].items():
            t = parse_task(name)
            params[t] = ParamVector.from_bytes((d / info["file"]).read_bytes())
            archs[t] = ModelArch.from_dict(info["arch"])
            if params[t].fingerprint() != info["fingerprint"]:
                raise ValueError(f"teacher {name}: fingerprint mismatch")
        return cls(params, archs, provenance=meta.get("provenance", {}))


def train_teachers(shards, matrix: ParticipationMatrix, cfg: RoundConfig, arch_for, *, transport=None,
                   evaluate_each_round: bool = True, **kwargs) -> TeacherBundle:
    """One independent federated run per task over the clients holding that label.

    ``arch_for`` is a ModelArch template (its heads are replaced per task) or
    a callable ``task -> ModelArch``.
    """
    transport = transport or InProcessTransport.from_shards(shards)
    params, archs, hist = {}, {}, {}
    for t in FEDERATED_TASKS:
        arch = arch_for(t) if callable(arch_for) else single_task_arch(arch_for, t)
        p, h = run_federated(t, shards, matrix, cfg, arch, transport=transport, stage="teacher",
                             evaluate_each_round=evaluate_each_round, **kwargs)
        params[t], archs[t], hist[t] = p, arch, h
    return TeacherBundle(params, archs, hist, {"stage": "teacher", "seed": cfg.seed})


def single_task_arch(template: ModelArch, task) -> ModelArch:
    task = parse_task(task)
    return ModelArch(template.grid_shape, template.backbone_layers,
                     {task: len(task.channels) * template.n_cells}, template.activation,
                     template.deep_supervision_taps, template.in_channels)


def multi_task_arch(template: ModelArch, tasks=FEDERATED_TASKS) -> ModelArch:
    return ModelArch.for_tasks(template.grid_shape, template.backbone_layers, tasks,
                               activation=template.activation,
                               deep_supervision_taps=template.deep_supervision_taps,
                               in_channels=template.in_channels)


# --------------------------------------------------------------------------
# pseudo-labels


@dataclass
class PseudoLabelStore:
    """Per-client pseudo-label bookkeeping.

    ``values[client][task]`` holds the soft maps only when the workers are
    in-process; over the wire the orchestrator sees counts and fingerprints.
    """

    counts: dict
    fingerprints: dict
    values: Optional[dict] = None

    def size(self) -> int:
        return sum(n * len(self.fingerprints.get(c, {})) for c, n in self.counts.items())

    def participants(self) -> list:
        return sorted(c for c, n in self.counts.items() if n > 0)


def pseudo_label(bundle: TeacherBundle, shards=None, *, transport=None, norm=NormalizationSpec(),
                 clients=None) -> PseudoLabelStore:
    """Every teacher predicts every unlabeled sample at every client, client-side."""
    transport = transport or InProcessTransport.from_shards(shards)
    clients = sorted(clients if clients is not None else transport.client_ids)
    counts, fps = {c: 0 for c in clients}, {c: {} for c in clients}
    for t in FEDERATED_TASKS:
        job = make_job("pseudo_label", arch=bundle.archs[t], norm=norm, task=t, round=0)
        res = transport.execute(job, bundle.params[t], clients)
        for c, r in res.items():
            if r.info.get("fingerprint") != bundle.fingerprint(t):
                raise RuntimeError(f"client {c} pseudo-labelled {t} with a different teacher")
            counts[c] = r.n_samples
            fps[c][t] = r.info["fingerprint"]
    values = None
    workers = getattr(transport, "workers", None)
    if workers is not None:
        values = {c: dict(workers[c].pseudo) for c in clients}
    return PseudoLabelStore(counts, fps, values)


def write_pseudo_labels(directory, task, sample_ids, preds, fingerprint):
    """``<dir>/pseudo/<task>/<sample_id>.f32`` plus ``fingerprint.json``."""
    task = parse_task(task)
    d = Path(directory) / "pseudo" / task.value
    d.mkdir(parents=True, exist_ok=True)
    for sid, arr in zip(sample_ids, preds):
        (d / f"{sid}.f32").write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = {"task": task.value, "teacher_fingerprint": fingerprint, "shape": list(preds.shape[1:]),
            "samples": list(sample_ids)}
    (d / "fingerprint.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_pseudo_labels(directory, task):
    task = parse_task(task)
    d = Path(directory) / "pseudo" / task.value
    meta = json.loads((d / "fingerprint.json").read_text())
    shape = tuple(meta["shape"])
    arrs = [np.frombuffer((d / f"{s}.f32").read_bytes(), dtype="<f4").reshape(shape) for s in meta["samples"]]
    values = np.stack(arrs).astype(np.float32) if arrs else np.zeros((0,) + shape, np.float32)
    return meta["samples"], values, meta["teacher_fingerprint"]


# --------------------------------------------------------------------------
# student


def distill_student(store: PseudoLabelStore, student_arch: ModelArch, cfg: RoundConfig, *, transport,
                    loss_cfg: LossConfig = LossConfig(), norm=NormalizationSpec(), init: Optional[ParamVector] = None,
                    matrix: Optional[ParticipationMatrix] = None, evaluate_each_round: bool = False, sigma_mm=2.0):
    """Federated distillation over every client with unlabeled data; returns ``(params, history)``."""
    for t in FEDERATED_TASKS:
        if head_group(t) not in [f"head:{k.value}" for k in student_arch.head_specs]:
            raise ValueError(f"student has no head for {t}")
    for c in store.participants():
        missing = [t for t in FEDERATED_TASKS if t not in store.fingerprints.get(c, {})]
        if missing:
            raise KeyError(f"client {c} lacks pseudo-labels for {[t.value for t in missing]}")
    params = init.copy() if init is not None else init_params(init_seed(cfg.seed, "student", "all"), student_arch)
    job = make_job("distill", arch=student_arch, cfg=cfg, loss_cfg=loss_cfg, norm=norm, stage="distill",
                   tasks=[t.value for t in FEDERATED_TASKS])
    history = []

    def on_round(r, p):
        if evaluate_each_round and matrix is not None:
            for t in FEDERATED_TASKS:
                history.extend(evaluate_remote(transport, p, t, student_arch, matrix, round_index=r,
                                               norm=norm, sigma_mm=sigma_mm, loss_cfg=loss_cfg))

    final = run_rounds(transport, job, params, store.participants(), cfg.n_rounds, on_round=on_round)
    return final, history


def finetune_heads(student_params: ParamVector, student_arch: ModelArch, matrix: ParticipationMatrix,
                   cfg: RoundConfig, *, shards=None, transport=None, evaluate_each_round: bool = False, **kwargs):
    """Federated per-task finetuning of each head with every other group frozen.

    Returns ``(params, history)``. The backbone bytes of the result equal
    those of ``student_params``.
    """
    transport = transport or InProcessTransport.from_shards(shards)
    params = student_params.copy()
    groups = set(params.groups)
    history = []
    for t in FEDERATED_TASKS:
        frozen = groups - {head_group(t)}
        params, h = run_federated(t, None, matrix, cfg, student_arch, transport=transport, stage="finetune",
                                  init=params, frozen=frozen, evaluate_each_round=evaluate_each_round, **kwargs)
        history.extend(h)
    if params.group_values("backbone").tobytes() != student_params.group_values("backbone").tobytes():
        raise AssertionError("backbone changed during head finetuning")
    return params, history


# --------------------------------------------------------------------------
# downstream transfer


def downstream_last_layer(params: ParamVector, arch: ModelArch, train: list, test: list, cfg: RoundConfig, *,
                          loss_cfg: LossConfig = LossConfig(), norm=NormalizationSpec(), stage: str = "downstream"):
    """Attach a zero-initialised DownstreamVessel head and train only that head.

    Returns ``(params, arch, dice)`` with ``dice`` the mean hard Dice (0-100)
    on ``test``.
    """
    task = TaskKind.DOWNSTREAM_VESSEL
    with_head, new_arch = add_head(params, arch, task)
    shard = ClientShard(0, {task: list(train)}, [], {task: list(test)})
    frozen = set(with_head.groups) - {head_group(task)}
    trained = train_local(shard, task, cfg, new_arch, init=with_head, stage=stage, loss_cfg=loss_cfg,
                          norm=norm, frozen=frozen)
    dice = evaluate(trained, list(test), task, new_arch, norm=norm).mean
    return trained, new_arch, dice


# --------------------------------------------------------------------------
# whole pipeline


@dataclass
class PipelineResult:
    teachers: TeacherBundle
    store: PseudoLabelStore
    student: ParamVector
    finetuned: ParamVector
    student_arch: ModelArch
    history: list = field(default_factory=list)


def run_pipeline(matrix: ParticipationMatrix, *, transport, teacher_arch: ModelArch, student_arch: ModelArch,
                 teacher_cfg: RoundConfig, student_cfg: RoundConfig, finetune_cfg: RoundConfig,
                 loss_cfg: LossConfig = LossConfig(), norm=NormalizationSpec(), sigma_mm: float = 2.0,
                 teachers: Optional[TeacherBundle] = None, output_dir=None) -> PipelineResult:
    """Teachers, pseudo-labels, distillation and head finetuning in sequence.

    Writes the stage artifacts when ``output_dir`` is set.
    """
    kw = dict(loss_cfg=loss_cfg, norm=norm, sigma_mm=sigma_mm)
    if teachers is None:
        teachers = train_teachers(None, matrix, teacher_cfg, teacher_arch, transport=transport, **kw)
    store = pseudo_label(teachers, transport=transport, norm=norm)
    student_arch = multi_task_arch(student_arch)
    student, _ = distill_student(store, student_arch, student_cfg, transport=transport, loss_cfg=loss_cfg, norm=norm)
    finetuned, hist = finetune_heads(student, student_arch, matrix, finetune_cfg, transport=transport,
                                     evaluate_each_round=True, **kw)
    if output_dir is not None:
        out = Path(output_dir)
        teachers.save(out / "teachers")
        (out / "student.params").write_bytes(student.to_bytes())
        (out / "student_finetuned.params").write_bytes(finetuned.to_bytes())
        (out / "student_arch.json").write_text(json.dumps(student_arch.to_dict(), indent=1, sort_keys=True) + "\n")
    return PipelineResult(teachers, store, student, finetuned, student_arch, hist)


def downstream_dataset(seed: int, *, n_samples: int = 60, test_fraction: float = 0.5, grid_shape=(24, 24),
                       spacing_mm=(2.0, 2.0)):
    """Out-of-distribution single-site vessel segmentation set, split into ``(train, test)``."""
    from fedkd.data import CohortSpec, DomainShift, generate_cohort
    task = TaskKind.DOWNSTREAM_VESSEL
    spec = CohortSpec(n_clients=1, samples_per_client=(n_samples,), label_fraction={1: {task: 1.0}},
                      landmark_noise_mm=(0.0,), domain_shift=(DomainShift(intensity_scale=1.1, intensity_offset=40.0),),
                      seed=seed, grid_shape=grid_shape, spacing_mm=spacing_mm, test_fraction=test_fraction,
                      morphology="ood")
    shard = generate_cohort(spec)[0]
    return list(shard.labeled[task]), list(shard.test[task])
