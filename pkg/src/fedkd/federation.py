"""Federated rounds: participant selection, local training, weighted averaging.

Client-side work is expressed as *jobs* (plain dicts) executed by a
:class:`ClientWorker` that owns one client's shard. The orchestrator only
ever sees parameter vectors and scalar metrics, whether the worker runs
in-process or behind the wire protocol in :mod:`fedkd.transport`.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from fedkd import kernels
from fedkd.data import ClientShard, NormalizationSpec, extract_point, task_arrays, volume_arrays
from fedkd.nn import (
    LossConfig, ModelArch, OptimizerState, ParamVector, adamw_step, forward, head_group,
    init_params, loss_and_grad,
)
from fedkd.tasks import FEDERATED_TASKS, TaskKind, parse_task

log = logging.getLogger(__name__)

DEFAULT_TEST_CLIENTS = {
    TaskKind.HINGE_OSTIA: frozenset({6, 7}),
    TaskKind.MEMBRANOUS_SEPTUM: frozenset({7}),
    TaskKind.CALCIFICATION: frozenset({6}),
}


class EmptySelectionError(ValueError):
    pass


class LayoutMismatchError(ValueError):
    pass


class QuarantineViolation(RuntimeError):
    pass


# --------------------------------------------------------------------------
# configuration records


@dataclass(frozen=True)
class ParticipationMatrix:
    """``has_label[client]`` is the set of tasks the client holds labels for."""

    has_label: dict
    test_clients: dict = field(default_factory=lambda: dict(DEFAULT_TEST_CLIENTS))

    def __post_init__(self):
        object.__setattr__(self, "has_label", {int(c): frozenset(parse_task(t) for t in ts)
                                               for c, ts in self.has_label.items()})
        object.__setattr__(self, "test_clients", {parse_task(t): frozenset(int(c) for c in cs)
                                                  for t, cs in self.test_clients.items()})

    @property
    def clients(self) -> list:
        return sorted(self.has_label)

    def tasks(self) -> list:
        present = set().union(*self.has_label.values()) if self.has_label else set()
        return [t for t in FEDERATED_TASKS if t in present]

    def validate(self, tasks=None):
        for t in tasks if tasks is not None else self.tasks():
            t = parse_task(t)
            if not self.test_clients.get(t):
                raise ValueError(f"task {t} has no held-out test client")
            select_participants(t, self)
            missing = [c for c in self.test_clients[t] if c not in self.has_label]
            if missing:
                raise ValueError(f"task {t}: unknown test clients {missing}")

    @classmethod
    def from_shards(cls, shards, test_clients=None) -> "ParticipationMatrix":
        return cls({sh.client_id: sh.tasks() for sh in shards},
                   dict(DEFAULT_TEST_CLIENTS) if test_clients is None else test_clients)

    def to_dict(self) -> dict:
        return {"has_label": {str(c): sorted(t.value for t in ts) for c, ts in sorted(self.has_label.items())},
                "test_clients": {t.value: sorted(cs) for t, cs in self.test_clients.items()}}


@dataclass
class RoundConfig:
    n_rounds: int = 20
    local_epochs: int = 10
    batch_size: int = 8
    aggregation: str = "fedprox"
    mu: float = 0.01
    lr: float = 0.01
    weight_decay: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        self.aggregation = self.aggregation.lower()
        if self.aggregation not in ("fedavg", "fedprox"):
            raise ValueError(f"aggregation must be fedavg or fedprox, got {self.aggregation!r}")
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")

    @property
    def prox_mu(self) -> float:
        return self.mu if self.aggregation == "fedprox" else 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ClientUpdate:
    client_id: int
    round_index: int
    params: ParamVector
    n_samples: int
    train_loss: float


@dataclass
class TaskMetric:
    mean: float
    std: float
    n: int
    unit: str

    @classmethod
    def from_values(cls, values, unit):
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return cls(float("nan"), float("nan"), 0, unit)
        return cls(float(v.mean()), float(v.std()), int(v.size), unit)

    @classmethod
    def from_stats(cls, stats, unit):
        n = sum(s[0] for s in stats)
        if n == 0:
            return cls(float("nan"), float("nan"), 0, unit)
        total = math.fsum(s[1] for s in stats)
        sq = math.fsum(s[2] for s in stats)
        mean = total / n
        return cls(mean, math.sqrt(max(sq / n - mean * mean, 0.0)), n, unit)


@dataclass
class RoundMetric:
    round: int
    task: str
    split: str
    metric_mean: float
    metric_std: float
    n: int


@dataclass
class GlobalState:
    round_index: int
    global_params: ParamVector
    history: list = field(default_factory=list)


TRAIN_CLIENTS_SPLIT = "train-clients-test"
HELDOUT_SPLIT = "heldout-client-test"


# --------------------------------------------------------------------------
# selection and seeding


def select_participants(task, matrix: ParticipationMatrix) -> list:
    """Clients holding labels for ``task`` minus its held-out test clients, ascending."""
    task = parse_task(task)
    held = matrix.test_clients.get(task, frozenset())
    chosen = sorted(c for c, ts in matrix.has_label.items() if task in ts and c not in held)
    if not chosen:
        raise EmptySelectionError(f"no training clients for task {task}")
    return chosen


def _tag(s: str) -> int:
    return int.from_bytes(hashlib.sha256(s.encode("utf-8")).digest()[:4], "little")


def stream_seed(seed: int, *parts) -> np.random.SeedSequence:
    """Seed sequence for a named substream.

    Integer parts are used as-is, anything else contributes the first four
    bytes of its sha256 digest.
    """
    words = [int(seed)]
    for p in parts:
        words.append(int(p) if isinstance(p, (int, np.integer)) else _tag(str(p)))
    return np.random.SeedSequence(words)


def stream_rng(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, *parts))


def init_seed(seed: int, stage: str, task) -> int:
    return int(stream_seed(seed, "init", stage, str(task)).generate_state(1)[0])


# --------------------------------------------------------------------------
# local training


class _ArrayCache:
    def __init__(self):
        self._store = {}

    def get(self, key, build):
        if key not in self._store:
            self._store[key] = build()
        return self._store[key]


def _norm_key(norm: NormalizationSpec):
    return (norm.clip_lo, norm.clip_hi, norm.mu, norm.sigma)


def _train_loop(params, batches, cfg: RoundConfig, frozen, rng, n):
    opt = OptimizerState.create(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    mu = cfg.prox_mu
    anchor = params.values.copy() if mu > 0 else None
    last = []
    for _ in range(cfg.local_epochs):
        perm = rng.permutation(n)
        last = []
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(perm[start:start + cfg.batch_size])
            loss, grad, extra_frozen = batches(idx, rng)
            # the logged proximal penalty covers the groups trained in this step only
            sq = adamw_step(params, grad, opt, frozen=set(frozen) | extra_frozen, prox_anchor=anchor, prox_mu=mu)
            last.append(loss + 0.5 * mu * sq)
    return float(np.mean(last)) if last else 0.0


def local_train(shard: ClientShard, task, global_params: ParamVector, cfg: RoundConfig, arch: ModelArch, *,
                round_index: int = 0, loss_cfg: LossConfig = LossConfig(), norm: NormalizationSpec = NormalizationSpec(),
                sigma_mm: float = 2.0, frozen=(), stage: str = "teacher", cache: Optional[_ArrayCache] = None) -> ClientUpdate:
    """``local_epochs`` of minibatch AdamW on the combined loss, FedProx-penalised.

    Starts from a copy of ``global_params`` with fresh optimizer state. The
    minibatch order is drawn from the ``(seed, stage, task, client, round)``
    substream.
    """
    task = parse_task(task)
    samples = shard.labeled.get(task) or []
    if not samples:
        raise ValueError(f"client {shard.client_id} has no labeled training data for {task}")
    cache = cache or _ArrayCache()
    x, y = cache.get(("train", task, _norm_key(norm), sigma_mm), lambda: task_arrays(samples, task, norm, sigma_mm))
    params = global_params.copy()
    rng = stream_rng(cfg.seed, stage, task.value, shard.client_id, round_index)

    def batches(idx, _rng):
        loss, grad = loss_and_grad(params, x[idx], y[idx], task, arch, loss_cfg)
        return loss, grad, set()

    train_loss = _train_loop(params, batches, cfg, frozen, rng, len(x))
    return ClientUpdate(shard.client_id, round_index, params, len(x), train_loss)


def local_distill(shard: ClientShard, pseudo: dict, student: ParamVector, cfg: RoundConfig, arch: ModelArch, *,
                  round_index: int = 0, loss_cfg: LossConfig = LossConfig(), norm: NormalizationSpec = NormalizationSpec(),
                  stage: str = "distill", tasks=FEDERATED_TASKS, cache: Optional[_ArrayCache] = None) -> ClientUpdate:
    """Distillation on the unlabeled pool against stored soft pseudo-labels.

    Every minibatch draws one task uniformly and updates the backbone and
    that task's head only.
    """
    tasks = [parse_task(t) for t in tasks]
    missing = [t for t in tasks if t not in pseudo]
    if missing:
        raise KeyError(f"client {shard.client_id}: no pseudo-labels for {[t.value for t in missing]}")
    if not shard.unlabeled:
        raise ValueError(f"client {shard.client_id} has no unlabeled data")
    cache = cache or _ArrayCache()
    x = cache.get(("unlabeled", _norm_key(norm)), lambda: volume_arrays(shard.unlabeled, norm))
    params = student.copy()
    rng = stream_rng(cfg.seed, stage, "all", shard.client_id, round_index)
    # every head but the drawn task's is frozen, including heads outside ``tasks``
    all_heads = {g for g in params.groups if g != "backbone"}

    def batches(idx, r):
        t = tasks[int(r.integers(len(tasks)))]
        loss, grad = loss_and_grad(params, x[idx], pseudo[t][idx], t, arch, loss_cfg)
        return loss, grad, all_heads - {head_group(t)}

    train_loss = _train_loop(params, batches, cfg, (), rng, len(x))
    return ClientUpdate(shard.client_id, round_index, params, len(x), train_loss)


def train_local(shard: ClientShard, task, cfg: RoundConfig, arch: ModelArch, *, init: Optional[ParamVector] = None,
                stage: str = "teacher", **kwargs) -> ParamVector:
    """Client-only training with the same round/seed schedule as a federation of one."""
    task = parse_task(task)
    params = init if init is not None else init_params(init_seed(cfg.seed, stage, task.value), arch)
    cache = _ArrayCache()
    for r in range(cfg.n_rounds):
        params = local_train(shard, task, params, cfg, arch, round_index=r, stage=stage, cache=cache, **kwargs).params
    return params


# --------------------------------------------------------------------------
# aggregation


def aggregate(updates) -> ParamVector:
    """Sample-weighted mean of client parameters.

    Updates are ordered by client id, accumulated as ``sum n_i * w_i`` in
    float64 with Kahan compensation, divided by ``sum n_i`` and rounded to
    float32 once.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ValueError("cannot aggregate an empty update list")
    layout = updates[0].params.layout
    rounds = {u.round_index for u in updates}
    if len(rounds) != 1:
        raise LayoutMismatchError(f"updates from different rounds: {sorted(rounds)}")
    for u in updates:
        if u.params.layout != layout:
            raise LayoutMismatchError(f"client {u.client_id} sent a different parameter layout")
        if u.n_samples <= 0:
            raise ValueError(f"client {u.client_id} reported n_samples={u.n_samples}")
    stack = np.stack([u.params.values for u in updates])
    weights = np.array([u.n_samples for u in updates], dtype=np.float64)
    total = kernels.kahan_weighted_sum(stack, weights)
    return ParamVector((total / weights.sum()).astype(np.float32), layout)


# --------------------------------------------------------------------------
# evaluation


def hard_dice_percent(pred_mask, true_mask) -> float:
    p = np.asarray(pred_mask, bool)
    t = np.asarray(true_mask, bool)
    denom = p.sum() + t.sum()
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(p, t).sum() / denom


def metric_values(pred: np.ndarray, target: np.ndarray, task, spacing_mm) -> list:
    """Per-point distances (mm) for landmark tasks, per-sample Dice (0-100) otherwise."""
    task = parse_task(task)
    out = []
    if task.is_landmark:
        for i in range(pred.shape[0]):
            for c in range(pred.shape[1]):
                a = extract_point(pred[i, c], spacing_mm).point
                b = extract_point(target[i, c], spacing_mm).point
                out.append(float(np.hypot(*(a - b))))
    else:
        for i in range(pred.shape[0]):
            out.append(hard_dice_percent(pred[i, 0] >= 0.5, target[i, 0] >= 0.5))
    return out


def metric_unit(task) -> str:
    return "mm" if parse_task(task).is_landmark else "dice%"


def evaluate(params: ParamVector, testset, task, arch: ModelArch, *, norm: NormalizationSpec = NormalizationSpec(),
             sigma_mm: float = 2.0) -> TaskMetric:
    task = parse_task(task)
    if not testset:
        raise ValueError("empty test set")
    x, y = task_arrays(testset, task, norm, sigma_mm)
    pred, _ = forward(params, x, task, arch)
    return TaskMetric.from_values(metric_values(pred, y, task, testset[0].volume.spacing_mm), metric_unit(task))


def _stats(values):
    return [len(values), math.fsum(values), math.fsum(v * v for v in values)]


# --------------------------------------------------------------------------
# client worker


@dataclass
class JobResult:
    client_id: int
    n_samples: int = 0
    train_loss: float = 0.0
    params: Optional[ParamVector] = None
    metrics: Optional[dict] = None
    info: dict = field(default_factory=dict)

    def to_update(self, round_index: int) -> ClientUpdate:
        return ClientUpdate(self.client_id, round_index, self.params, self.n_samples, self.train_loss)


def job_context(job: dict):
    arch = ModelArch.from_dict(job["arch"])
    loss_cfg = LossConfig(**job.get("loss", {}))
    norm = NormalizationSpec(**job.get("norm", {}))
    cfg = RoundConfig(**job["round_cfg"]) if "round_cfg" in job else None
    return arch, loss_cfg, norm, cfg


class ClientWorker:
    """Executes jobs against one client's shard; data never leaves this object."""

    def __init__(self, shard: ClientShard, pseudo_dir=None):
        self.shard = shard
        self.client_id = shard.client_id
        self.cache = _ArrayCache()
        self.pseudo = {}
        self.pseudo_fingerprints = {}
        self.pseudo_dir = Path(pseudo_dir) if pseudo_dir else None

    def run(self, job: dict, params: Optional[ParamVector]) -> JobResult:
        kind = job["job"]
        arch, loss_cfg, norm, cfg = job_context(job)
        sigma = float(job.get("sigma_mm", 2.0))
        if kind == "train":
            up = local_train(self.shard, job["task"], params, cfg, arch, round_index=int(job["round"]),
                             loss_cfg=loss_cfg, norm=norm, sigma_mm=sigma, frozen=job.get("frozen", ()),
                             stage=job.get("stage", "teacher"), cache=self.cache)
            return JobResult(self.client_id, up.n_samples, up.train_loss, up.params)
        if kind == "distill":
            up = local_distill(self.shard, self.pseudo, params, cfg, arch, round_index=int(job["round"]),
                               loss_cfg=loss_cfg, norm=norm, stage=job.get("stage", "distill"),
                               tasks=job.get("tasks", [t.value for t in FEDERATED_TASKS]), cache=self.cache)
            return JobResult(self.client_id, up.n_samples, up.train_loss, up.params)
        if kind == "pseudo_label":
            return self._pseudo_label(job, params, arch, norm)
        if kind == "evaluate":
            return self._evaluate(job, params, arch, norm, sigma)
        raise ValueError(f"unknown job kind {kind!r}")

    def _pseudo_label(self, job, params, arch, norm) -> JobResult:
        task = parse_task(job["task"])
        n = len(self.shard.unlabeled)
        fp = params.fingerprint()
        if n:
            x = self.cache.get(("unlabeled", _norm_key(norm)), lambda: volume_arrays(self.shard.unlabeled, norm))
            pred, _ = forward(params, x, task, arch)
            preds = pred.astype(np.float32)
        else:
            c = arch.n_channels(task)
            preds = np.zeros((0, c) + arch.grid_shape, dtype=np.float32)
        self.pseudo[task] = preds
        self.pseudo_fingerprints[task] = fp
        if self.pseudo_dir is not None:
            from fedkd.kd import write_pseudo_labels
            write_pseudo_labels(self.pseudo_dir, task, [v.sample_id for v in self.shard.unlabeled], preds, fp)
        return JobResult(self.client_id, n, 0.0, None, None, {"fingerprint": fp, "entries": n})

    def _evaluate(self, job, params, arch, norm, sigma) -> JobResult:
        task = parse_task(job["task"])
        split = job.get("split", "test")
        samples = list(self.shard.test.get(task, []))
        if split == "all":
            samples = list(self.shard.labeled.get(task, [])) + samples
        if not samples:
            return JobResult(self.client_id, 0, metrics={"stats": [0, 0.0, 0.0]})
        key = ("eval", split, task, _norm_key(norm), sigma)
        x, y = self.cache.get(key, lambda: task_arrays(samples, task, norm, sigma))
        pred, _ = forward(params, x, task, arch)
        vals = metric_values(pred, y, task, samples[0].volume.spacing_mm)
        return JobResult(self.client_id, len(samples), metrics={"stats": _stats(vals)})


class InProcessTransport:
    """Runs jobs by direct calls on local :class:`ClientWorker` objects."""

    def __init__(self, workers):
        self.workers = {w.client_id: w for w in workers}

    @classmethod
    def from_shards(cls, shards, **kwargs):
        return cls([ClientWorker(sh, **kwargs) for sh in shards])

    @property
    def client_ids(self) -> list:
        return sorted(self.workers)

    def execute(self, job: dict, params: Optional[ParamVector], client_ids) -> dict:
        return {c: self.workers[c].run(job, params) for c in sorted(client_ids)}

    def close(self):
        pass


# --------------------------------------------------------------------------
# orchestration


def make_job(kind: str, *, arch: ModelArch, cfg: Optional[RoundConfig] = None, loss_cfg: LossConfig = LossConfig(),
             norm: NormalizationSpec = NormalizationSpec(), sigma_mm: float = 2.0, **extra) -> dict:
    job = {"job": kind, "arch": arch.to_dict(), "loss": loss_cfg.to_dict(),
           "norm": dict(norm.__dict__), "sigma_mm": float(sigma_mm)}
    if cfg is not None:
        job["round_cfg"] = cfg.to_dict()
    for k, v in extra.items():
        job[k] = v.value if isinstance(v, TaskKind) else v
    return job


def evaluate_remote(transport, params, task, arch, matrix: ParticipationMatrix, *, round_index=0,
                    norm=NormalizationSpec(), sigma_mm=2.0, loss_cfg=LossConfig()) -> list:
    """Evaluate on training clients' test splits and on held-out clients' labeled data."""
    task = parse_task(task)
    rows = []
    train_clients = select_participants(task, matrix)
    held = sorted(matrix.test_clients.get(task, ()))
    for split, clients, which in ((TRAIN_CLIENTS_SPLIT, train_clients, "test"), (HELDOUT_SPLIT, held, "all")):
        clients = [c for c in clients if c in getattr(transport, "client_ids", clients)]
        if not clients:
            continue
        job = make_job("evaluate", arch=arch, loss_cfg=loss_cfg, norm=norm, sigma_mm=sigma_mm,
                       task=task, split=which, round=round_index)
        res = transport.execute(job, params, clients)
        m = TaskMetric.from_stats([res[c].metrics["stats"] for c in sorted(res)], metric_unit(task))
        rows.append(RoundMetric(round_index, task.value, split, m.mean, m.std, m.n))
    return rows


def run_rounds(transport, job_base: dict, params: ParamVector, participants, n_rounds: int, *,
               on_round=None, forbidden=frozenset()) -> ParamVector:
    """Broadcast / local work / aggregate, ``n_rounds`` times."""
    participants = sorted(participants)
    bad = set(participants) & set(forbidden)
    if bad:
        raise QuarantineViolation(f"held-out clients {sorted(bad)} selected for training")
    state = GlobalState(0, params)
    for r in range(n_rounds):
        job = dict(job_base, round=r)
        results = transport.execute(job, state.global_params, participants)
        if sorted(results) != participants:
            raise QuarantineViolation(f"round {r}: results from {sorted(results)}, expected {participants}")
        updates = [results[c].to_update(r) for c in participants]
        state.global_params = aggregate(updates)
        state.round_index = r + 1
        if on_round is not None:
            on_round(r + 1, state.global_params)
    return state.global_params


def run_federated(task, shards=None, matrix: Optional[ParticipationMatrix] = None, cfg: RoundConfig = RoundConfig(),
                  arch: Optional[ModelArch] = None, *, transport=None, loss_cfg: LossConfig = LossConfig(),
                  norm: NormalizationSpec = NormalizationSpec(), sigma_mm: float = 2.0, stage: str = "teacher",
                  init: Optional[ParamVector] = None, frozen=(), participants=None, evaluate_each_round: bool = True):
    """Federated training of one task; returns ``(final_params, history)``.

    ``history`` holds one :class:`RoundMetric` per (round, split).
    ``participants`` overrides the matrix selection (used for one-client runs).
    """
    task = parse_task(task)
    if matrix is None:
        matrix = ParticipationMatrix.from_shards(shards)
    if transport is None:
        transport = InProcessTransport.from_shards(shards)
    if participants is None:
        participants = select_participants(task, matrix)
    params = init.copy() if init is not None else init_params(init_seed(cfg.seed, stage, task.value), arch)
    history = []
    job = make_job("train", arch=arch, cfg=cfg, loss_cfg=loss_cfg, norm=norm, sigma_mm=sigma_mm,
                   task=task, stage=stage, frozen=sorted(frozen))

    def on_round(r, p):
        if evaluate_each_round:
            history.extend(evaluate_remote(transport, p, task, arch, matrix, round_index=r, norm=norm,
                                           sigma_mm=sigma_mm, loss_cfg=loss_cfg))

    final = run_rounds(transport, job, params, participants, cfg.n_rounds, on_round=on_round,
                       forbidden=matrix.test_clients.get(task, frozenset()))
    return final, history


HISTORY_FIELDS = ["round", "task", "split", "metric_mean", "metric_std"]


def write_history_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for h in history:
            w.writerow([h.round, h.task, h.split, repr(h.metric_mean), repr(h.metric_std)])
