"""Small multi-head feed-forward network with analytic gradients.

The model is a fully connected backbone over a flattened 2-D grid followed by
one affine head per task. A head's output is a per-cell channel map passed
through a sigmoid. Optional deep-supervision taps attach extra affine outputs
to intermediate backbone layers; tap ``j`` predicts the task channels on the
grid average-pooled by ``2 ** (j + 1)``.

All parameters live in one flat :class:`ParamVector`. Segments are grouped as
``"backbone"`` or ``"head:<TaskKind>"``; the group is the unit for freezing.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import expit

from fedkd import kernels
from fedkd.tasks import TaskKind, parse_task


class MissingHeadError(KeyError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# architecture and parameter layout


@dataclass(frozen=True)
class ModelArch:
    grid_shape: tuple
    backbone_layers: tuple
    head_specs: dict
    activation: str = "relu"
    deep_supervision_taps: tuple = ()
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(v) for v in self.grid_shape))
        object.__setattr__(self, "backbone_layers", tuple(int(v) for v in self.backbone_layers))
        object.__setattr__(self, "deep_supervision_taps", tuple(int(v) for v in self.deep_supervision_taps))
        object.__setattr__(self, "head_specs", {parse_task(k): int(v) for k, v in self.head_specs.items()})
        if len(self.grid_shape) != 2 or min(self.grid_shape) < 1:
            raise ValueError(f"grid_shape must be two positive ints, got {self.grid_shape}")
        if not self.backbone_layers or min(self.backbone_layers) < 1:
            raise ValueError("backbone_layers must be a non-empty list of positive widths")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        cells = self.n_cells
        for task, dim in self.head_specs.items():
            if dim <= 0 or dim % cells:
                raise ValueError(f"head {task} output_dim {dim} is not a positive multiple of {cells} cells")
        for j, tap in enumerate(self.deep_supervision_taps):
            if not 0 <= tap < len(self.backbone_layers):
                raise ValueError(f"deep supervision tap {tap} is not a backbone layer index")
            f = 2 ** (j + 1)
            if self.grid_shape[0] % f or self.grid_shape[1] % f:
                raise ValueError(f"grid {self.grid_shape} not divisible by pooling factor {f} for tap {j}")

    @property
    def n_cells(self) -> int:
        return self.grid_shape[0] * self.grid_shape[1]

    @property
    def input_dim(self) -> int:
        return self.n_cells * self.in_channels

    def n_channels(self, task) -> int:
        return self.head_specs[parse_task(task)] // self.n_cells

    def aux_grid(self, j: int) -> tuple:
        f = 2 ** (j + 1)
        return (self.grid_shape[0] // f, self.grid_shape[1] // f)

    def has_aux(self, task) -> bool:
        # the transfer head is a bare affine map over the last backbone layer
        return bool(self.deep_supervision_taps) and parse_task(task) is not TaskKind.DOWNSTREAM_VESSEL

    def with_head(self, task, output_dim: int) -> "ModelArch":
        specs = dict(self.head_specs)
        specs[parse_task(task)] = int(output_dim)
        return ModelArch(self.grid_shape, self.backbone_layers, specs, self.activation,
                         self.deep_supervision_taps, self.in_channels)

    def to_dict(self) -> dict:
        return {
            "grid_shape": list(self.grid_shape),
            "backbone_layers": list(self.backbone_layers),
            "head_specs": {t.value: d for t, d in self.head_specs.items()},
            "activation": self.activation,
            "deep_supervision_taps": list(self.deep_supervision_taps),
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelArch":
        return cls(
            grid_shape=d["grid_shape"],
            backbone_layers=d["backbone_layers"],
            head_specs=d["head_specs"],
            activation=d.get("activation", "relu"),
            deep_supervision_taps=d.get("deep_supervision_taps", ()),
            in_channels=d.get("in_channels", 1),
        )

    @classmethod
    def for_tasks(cls, grid_shape, backbone_layers, tasks, **kwargs) -> "ModelArch":
        cells = grid_shape[0] * grid_shape[1]
        specs = {parse_task(t): len(parse_task(t).channels) * cells for t in tasks}
        return cls(grid_shape, backbone_layers, specs, **kwargs)


class Segment(NamedTuple):
    group: str
    layer: str
    kind: str
    offset: int
    length: int
    shape: tuple


def head_group(task) -> str:
    return f"head:{parse_task(task).value}"


def layout_for(arch: ModelArch) -> tuple:
    entries = []
    fan_in = arch.input_dim
    for i, width in enumerate(arch.backbone_layers):
        entries.append(("backbone", f"layer{i}", "weight", (fan_in, width)))
        entries.append(("backbone", f"layer{i}", "bias", (width,)))
        fan_in = width
    last = arch.backbone_layers[-1]
    for task, out_dim in arch.head_specs.items():
        g = head_group(task)
        entries.append((g, "out", "weight", (last, out_dim)))
        entries.append((g, "out", "bias", (out_dim,)))
        if arch.has_aux(task):
            c = arch.n_channels(task)
            for j, tap in enumerate(arch.deep_supervision_taps):
                gh, gw = arch.aux_grid(j)
                width = arch.backbone_layers[tap]
                entries.append((g, f"aux{j}", "weight", (width, c * gh * gw)))
                entries.append((g, f"aux{j}", "bias", (c * gh * gw,)))
    segs = []
    off = 0
    for group, layer, kind, shape in entries:
        n = int(np.prod(shape))
        segs.append(Segment(group, layer, kind, off, n, tuple(shape)))
        off += n
    return tuple(segs)


class ParamVector:
    """Flat float array plus an ordered segment table."""

    __slots__ = ("values", "layout", "_index")

    def __init__(self, values: np.ndarray, layout: Sequence[Segment]):
        self.values = values
        self.layout = tuple(Segment(*s) for s in layout)
        self._index = {(s.group, s.layer, s.kind): s for s in self.layout}
        end = 0
        for s in self.layout:
            if s.offset != end:
                raise ValueError(f"segment {s.group}/{s.layer}/{s.kind} does not start at {end}")
            end += s.length
        if end != values.shape[0] or values.ndim != 1:
            raise ValueError(f"layout covers {end} values, array has shape {values.shape}")

    def __len__(self):
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (self.layout == other.layout and self.values.dtype == other.values.dtype
                and self.values.tobytes() == other.values.tobytes())

    def __repr__(self):
        return f"ParamVector(n={len(self)}, segments={len(self.layout)}, dtype={self.values.dtype})"

    def segment(self, group, layer, kind) -> Segment:
        return self._index[(group, layer, kind)]

    def view(self, group, layer, kind) -> np.ndarray:
        s = self._index[(group, layer, kind)]
        return self.values[s.offset:s.offset + s.length].reshape(s.shape)

    @property
    def groups(self) -> list:
        seen = []
        for s in self.layout:
            if s.group not in seen:
                seen.append(s.group)
        return seen

    def group_range(self, group) -> tuple:
        segs = [s for s in self.layout if s.group == group]
        if not segs:
            raise KeyError(group)
        lo = segs[0].offset
        hi = segs[-1].offset + segs[-1].length
        return lo, hi

    def group_values(self, group) -> np.ndarray:
        lo, hi = self.group_range(group)
        return self.values[lo:hi]

    def has_group(self, group) -> bool:
        return any(s.group == group for s in self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def astype(self, dtype) -> "ParamVector":
        return ParamVector(self.values.astype(dtype), self.layout)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_bytes()).hexdigest()

    # serialization: <u32 LE header length><JSON header><float32 LE values>

    def to_bytes(self) -> bytes:
        header = {
            "count": len(self),
            "dtype": "<f4",
            "layout": [[s.group, s.layer, s.kind, s.offset, s.length, list(s.shape)] for s in self.layout],
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return struct.pack("<I", len(hb)) + hb + self.values.astype("<f4", copy=False).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamVector":
        if len(data) < 4:
            raise ValueError("truncated parameter blob")
        (hlen,) = struct.unpack_from("<I", data, 0)
        if 4 + hlen > len(data):
            raise ValueError("truncated parameter header")
        header = json.loads(data[4:4 + hlen].decode("utf-8"))
        count = int(header["count"])
        body = data[4 + hlen:]
        if len(body) != 4 * count:
            raise ValueError(f"expected {4 * count} value bytes, got {len(body)}")
        values = np.frombuffer(body, dtype="<f4").astype(np.float32)
        layout = [Segment(g, l, k, int(o), int(n), tuple(sh)) for g, l, k, o, n, sh in header["layout"]]
        return cls(values, layout)


def init_params(seed: int, arch: ModelArch, dtype=np.float32) -> ParamVector:
    """Glorot-uniform weights, zero biases, drawn segment by segment in layout order."""
    layout = layout_for(arch)
    rng = np.random.default_rng(seed)
    values = np.zeros(sum(s.length for s in layout), dtype=dtype)
    for s in layout:
        if s.kind == "weight":
            fan_in, fan_out = s.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values[s.offset:s.offset + s.length] = rng.uniform(-bound, bound, s.length)
    return ParamVector(values, layout)


def add_head(params: ParamVector, arch: ModelArch, task, seed: Optional[int] = None):
    """Append a head for ``task`` to an existing model.

    Existing values are copied unchanged. The new head is zero-initialised
    unless ``seed`` is given.
    """
    task = parse_task(task)
    if head_group(task) in params.groups:
        raise ValueError(f"model already has a {task} head")
    new_arch = arch.with_head(task, len(task.channels) * arch.n_cells)
    layout = layout_for(new_arch)
    fresh = init_params(seed, new_arch) if seed is not None else None
    values = np.zeros(sum(s.length for s in layout), dtype=params.values.dtype)
    out = ParamVector(values, layout)
    for s in layout:
        dst = values[s.offset:s.offset + s.length]
        if (s.group, s.layer, s.kind) in params._index:
            dst[:] = params.view(s.group, s.layer, s.kind).ravel()
        elif fresh is not None:
            dst[:] = fresh.view(s.group, s.layer, s.kind).ravel()
    return out, new_arch


# --------------------------------------------------------------------------
# forward / backward


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0)
    return np.tanh(z)


def _act_grad(z, h, kind):
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    return 1 - h * h


def _check_head(params: ParamVector, task: TaskKind):
    if (head_group(task), "out", "weight") not in params._index:
        raise MissingHeadError(f"parameters have no head for task {task}")


def _forward(params, x, task, arch):
    task = parse_task(task)
    _check_head(params, task)
    dt = params.values.dtype
    b = x.shape[0]
    h = np.ascontiguousarray(x.reshape(b, -1), dtype=dt)
    if h.shape[1] != arch.input_dim:
        raise ValueError(f"input has {h.shape[1]} features, arch expects {arch.input_dim}")
    zs, hs = [], [h]
    for i in range(len(arch.backbone_layers)):
        z = h @ params.view("backbone", f"layer{i}", "weight") + params.view("backbone", f"layer{i}", "bias")
        h = _act(z, arch.activation)
        zs.append(z)
        hs.append(h)
    g = head_group(task)
    c = arch.n_channels(task)
    hh, ww = arch.grid_shape
    logits = h @ params.view(g, "out", "weight") + params.view(g, "out", "bias")
    primary = expit(logits).reshape(b, c, hh, ww)
    aux = []
    if arch.has_aux(task):
        for j, tap in enumerate(arch.deep_supervision_taps):
            gh, gw = arch.aux_grid(j)
            la = hs[tap + 1] @ params.view(g, f"aux{j}", "weight") + params.view(g, f"aux{j}", "bias")
            aux.append(expit(la).reshape(b, c, gh, gw))
    cache = (zs, hs, primary, aux)
    return primary, aux, cache


def forward(params: ParamVector, x: np.ndarray, task, arch: ModelArch):
    """Return ``(primary, aux)`` sigmoid outputs for ``task``.

    ``x`` is ``(B, H, W)`` or ``(B, H*W)``. ``primary`` is ``(B, C, H, W)``;
    ``aux[j]`` is ``(B, C, H / 2**(j+1), W / 2**(j+1))``.
    """
    primary, aux, _ = _forward(params, x, task, arch)
    return primary, aux


def _backward(params, arch, task, cache, g_primary, g_aux):
    zs, hs, primary, aux = cache
    dt = params.values.dtype
    grad = np.zeros(len(params), dtype=dt)
    g = head_group(parse_task(task))
    b = primary.shape[0]

    def put(group, layer, kind, arr):
        s = params.segment(group, layer, kind)
        grad[s.offset:s.offset + s.length] += arr.ravel()

    dh = [None] * len(hs)
    dlog = (np.asarray(g_primary, dtype=dt) * primary * (1 - primary)).reshape(b, -1)
    put(g, "out", "weight", hs[-1].T @ dlog)
    put(g, "out", "bias", dlog.sum(axis=0))
    dh[-1] = dlog @ params.view(g, "out", "weight").T
    for j, tap in enumerate(arch.deep_supervision_taps if aux else ()):
        if g_aux[j] is None:
            continue
        dla = (np.asarray(g_aux[j], dtype=dt) * aux[j] * (1 - aux[j])).reshape(b, -1)
        put(g, f"aux{j}", "weight", hs[tap + 1].T @ dla)
        put(g, f"aux{j}", "bias", dla.sum(axis=0))
        contrib = dla @ params.view(g, f"aux{j}", "weight").T
        dh[tap + 1] = contrib if dh[tap + 1] is None else dh[tap + 1] + contrib
    for i in range(len(arch.backbone_layers) - 1, -1, -1):
        dz = dh[i + 1] * _act_grad(zs[i], hs[i + 1], arch.activation)
        put("backbone", f"layer{i}", "weight", hs[i].T @ dz)
        put("backbone", f"layer{i}", "bias", dz.sum(axis=0))
        if i > 0:
            back = dz @ params.view("backbone", f"layer{i}", "weight").T
            dh[i] = back if dh[i] is None else dh[i] + back
    return grad


# --------------------------------------------------------------------------
# loss


@dataclass
class LossConfig:
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    deep_supervision_weights: tuple = ()
    dice_smooth: float = 1e-6
    ce_eps: float = 1e-7

    def __post_init__(self):
        self.deep_supervision_weights = tuple(float(w) for w in self.deep_supervision_weights)
        if self.ce_weight < 0 or self.dice_weight < 0 or self.ce_weight + self.dice_weight <= 0:
            raise ValueError("ce_weight and dice_weight must be >= 0 with a positive sum")
        if any(w < 0 for w in self.deep_supervision_weights):
            raise ValueError("deep supervision weights must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")

    def to_dict(self):
        return {"ce_weight": self.ce_weight, "dice_weight": self.dice_weight,
                "deep_supervision_weights": list(self.deep_supervision_weights),
                "dice_smooth": self.dice_smooth, "ce_eps": self.ce_eps}


def avg_pool(target: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` mean pooling over the last two axes."""
    *lead, h, w = target.shape
    if h % factor or w % factor:
        raise ValueError(f"grid {h}x{w} not divisible by {factor}")
    return target.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))


def composite_loss(pred, target, cfg: LossConfig):
    """CE + (1 - soft Dice) on one output level; returns (loss, grad, dice)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    b, c = pred.shape[:2]
    p = pred.reshape(b, c, -1)
    t = target.reshape(b, c, -1)
    ce, dice, grad = kernels.bce_dice(p, t, float(cfg.ce_weight), float(cfg.dice_weight),
                                      float(cfg.dice_smooth), float(cfg.ce_eps))
    loss = cfg.ce_weight * ce + cfg.dice_weight * (1.0 - dice)
    return loss, grad.reshape(pred.shape), dice


def combined_loss(pred, target, cfg: LossConfig):
    """Composite loss with deep supervision.

    ``pred`` is ``(primary, aux)`` as returned by :func:`forward`; ``target``
    is the full-resolution target ``(B, C, H, W)``. Returns
    ``(loss, (grad_primary, grad_aux))`` with exact analytic gradients.
    """
    primary, aux = pred
    loss, g_primary, _ = composite_loss(primary, target, cfg)
    if len(aux) != len(cfg.deep_supervision_weights) and any(cfg.deep_supervision_weights):
        raise ValueError(f"{len(aux)} auxiliary outputs but {len(cfg.deep_supervision_weights)} weights")
    g_aux = []
    for j, out in enumerate(aux):
        w = cfg.deep_supervision_weights[j] if j < len(cfg.deep_supervision_weights) else 0.0
        if w == 0.0:
            g_aux.append(None)
            continue
        pooled = avg_pool(np.asarray(target, dtype=np.float64), 2 ** (j + 1))
        l_j, g_j, _ = composite_loss(out, pooled, cfg)
        loss += w * l_j
        g_aux.append(w * g_j)
    return loss, (g_primary, g_aux)


def soft_dice(pred, target, smooth=1e-6) -> float:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(target, dtype=np.float64).ravel()
    return float((2.0 * (p * t).sum() + smooth) / (p.sum() + t.sum() + smooth))


def loss_and_grad(params: ParamVector, x, target, task, arch: ModelArch, cfg: LossConfig):
    primary, aux, cache = _forward(params, x, task, arch)
    if not aux and cfg.deep_supervision_weights:
        # heads without taps (DownstreamVessel) train on the primary term only
        cfg = dataclasses.replace(cfg, deep_supervision_weights=())
    loss, (g_primary, g_aux) = combined_loss((primary, aux), target, cfg)
    grad = _backward(params, arch, task, cache, g_primary, g_aux)
    return loss, grad


# --------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    # per-group update counts drive bias correction for sparsely updated heads
    group_steps: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: ParamVector, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        z = np.zeros_like(params.values)
        return cls(z, z.copy(), lr, beta1, beta2, eps, weight_decay)


def adamw_step(params: ParamVector, grads: np.ndarray, state: OptimizerState, frozen=None,
               prox_anchor: Optional[np.ndarray] = None, prox_mu: float = 0.0) -> float:
    """One AdamW update, in place on ``params`` and ``state``.

    ``frozen`` is a collection of group names (``"backbone"``,
    ``"head:<task>"``) whose values and moments are left untouched. With
    ``prox_anchor`` and ``prox_mu > 0`` the gradient gains
    ``prox_mu * (params - prox_anchor)`` on the trainable groups.

    Returns ``|params - prox_anchor|^2`` over the trainable groups before the
    step (0.0 without a proximal term).
    """
    grads = np.asarray(grads)
    if grads.shape != params.values.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.values.shape}")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("non-finite gradient; no update applied")
    frozen = set(frozen or ())
    unknown = frozen - set(params.groups)
    if unknown:
        raise KeyError(f"unknown segment groups in mask: {sorted(unknown)}")
    g = grads.astype(params.values.dtype, copy=False)
    prox = prox_anchor is not None and prox_mu > 0
    sq = 0.0
    state.step_count += 1
    for group in params.groups:
        if group in frozen:
            continue
        t = state.group_steps.get(group, 0) + 1
        state.group_steps[group] = t
        lo, hi = params.group_range(group)
        kw = dict(lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
                  weight_decay=state.weight_decay, step=t)
        views = (params.values[lo:hi], g[lo:hi], state.first_moment[lo:hi], state.second_moment[lo:hi])
        if prox:
            sq += kernels.adamw_prox_update(*views, prox_anchor[lo:hi], mu=prox_mu, **kw)
        else:
            kernels.adamw_update(*views, **kw)
    return sq


# --------------------------------------------------------------------------
# gradient check


def numeric_gradient(params: ParamVector, x, target, task, arch, cfg, step=1e-6) -> np.ndarray:
    p64 = params.astype(np.float64)
    out = np.empty(len(p64))
    vals = p64.values
    for i in range(len(vals)):
        orig = vals[i]
        vals[i] = orig + step
        lp, _ = loss_and_grad(p64, x, target, task, arch, cfg)
        vals[i] = orig - step
        lm, _ = loss_and_grad(p64, x, target, task, arch, cfg)
        vals[i] = orig
        out[i] = (lp - lm) / (2 * step)
    return out


def relative_error(analytic, numeric, floor=1e-4) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    With step 1e-6 the central difference of an O(1) loss carries ~1e-9
    absolute roundoff, so components below ``floor`` are measured against it.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def gradient_check(params: ParamVector, x, target, task, arch, cfg, step=1e-6) -> float:
    """Max relative error between analytic and central-difference gradients (float64)."""
    p64 = params.astype(np.float64)
    _, analytic = loss_and_grad(p64, np.asarray(x, np.float64), target, task, arch, cfg)
    numeric = numeric_gradient(p64, np.asarray(x, np.float64), target, task, arch, cfg, step)
    return relative_error(analytic, numeric)
