"""Synthetic multi-client cardiac cohorts, CT normalization and target encoding.

Each synthetic "volume" is a 2-D grid in HU-like units showing a three-lobed
aortic root with coronary ostia, vessels, a septal band and calcified spots.
Points are stored as ``(y, x)`` in millimetres; cell ``(i, j)`` has its centre
at ``((i + 0.5) * sy, (j + 0.5) * sx)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from fedkd.tasks import FEDERATED_TASKS, TaskKind, parse_task


class InfeasibleCohortError(ValueError):
    pass


class LandmarkOutOfExtentError(ValueError):
    pass


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class NormalizationSpec:
    clip_lo: float = -1024.0
    clip_hi: float = 696.0
    mu: float = -438.61
    sigma: float = 520.98

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def output_range(self) -> tuple:
        s = max(self.sigma, 1e-8)
        return ((self.clip_lo - self.mu) / s, (self.clip_hi - self.mu) / s)


def normalize_array(x, spec: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (np.clip(x, spec.clip_lo, spec.clip_hi) - spec.mu) / max(spec.sigma, 1e-8)


def normalize(volume, spec: NormalizationSpec = NormalizationSpec()):
    """Clip to ``[clip_lo, clip_hi]``, subtract ``mu``, divide by ``max(sigma, 1e-8)``.

    Accepts a :class:`Volume` (returns a new Volume) or a bare array.
    """
    if isinstance(volume, Volume):
        return replace(volume, grid=normalize_array(volume.grid, spec).astype(np.float32))
    return normalize_array(volume, spec)


# --------------------------------------------------------------------------
# records


@dataclass
class Volume:
    grid: np.ndarray
    spacing_mm: tuple
    client_id: int
    sample_id: str

    @property
    def extent_mm(self) -> tuple:
        h, w = self.grid.shape
        return (h * self.spacing_mm[0], w * self.spacing_mm[1])


@dataclass
class LandmarkSet:
    points: dict
    annotator_id: Optional[str] = None

    def __post_init__(self):
        self.points = {str(k): (float(v[0]), float(v[1])) for k, v in self.points.items()}
        for name, p in self.points.items():
            if not all(math.isfinite(c) for c in p):
                raise ValueError(f"landmark {name} has non-finite coordinates")

    def array(self, names) -> np.ndarray:
        return np.array([self.points[n] for n in names], dtype=np.float64)

    def to_dict(self) -> dict:
        return {k: [v[0], v[1]] for k, v in sorted(self.points.items())}


@dataclass
class Sample:
    """A labeled volume for one task: landmarks for point tasks, a mask otherwise."""

    volume: Volume
    task: TaskKind
    landmarks: Optional[LandmarkSet] = None
    mask: Optional[np.ndarray] = None

    def targets(self, sigma_mm: float = 2.0) -> np.ndarray:
        if self.task.is_landmark:
            return rasterize_heatmap(self.landmarks, self.volume, sigma_mm, names=self.task.channels)
        return self.mask[None].astype(np.float32)


@dataclass
class ClientShard:
    client_id: int
    labeled: dict = field(default_factory=dict)
    unlabeled: list = field(default_factory=list)
    test: dict = field(default_factory=dict)

    def tasks(self) -> list:
        return [t for t in FEDERATED_TASKS + (TaskKind.DOWNSTREAM_VESSEL,)
                if self.labeled.get(t) or self.test.get(t)]

    def n_samples(self) -> int:
        return (sum(len(v) for v in self.labeled.values()) + sum(len(v) for v in self.test.values())
                + len(self.unlabeled))


# --------------------------------------------------------------------------
# heatmaps


def _cell_centres(shape, spacing):
    h, w = shape
    ys = (np.arange(h) + 0.5) * spacing[0]
    xs = (np.arange(w) + 0.5) * spacing[1]
    return ys, xs


def _check_inside(name, p, extent):
    if not (0.0 <= p[0] <= extent[0] and 0.0 <= p[1] <= extent[1]):
        raise LandmarkOutOfExtentError(f"landmark {name} at {p} outside extent {extent}")


def rasterize_heatmap(landmarks: LandmarkSet, volume, sigma_mm: float = 2.0, names=None) -> np.ndarray:
    """One unit-peak Gaussian channel per landmark, shape ``(C, H, W)``.

    Each channel is normalised so its largest cell equals 1; as ``sigma_mm``
    shrinks this tends to a one-hot at the nearest cell.
    """
    if sigma_mm <= 0:
        raise ValueError("sigma_mm must be positive")
    shape = volume.grid.shape if isinstance(volume, Volume) else tuple(volume[0])
    spacing = volume.spacing_mm if isinstance(volume, Volume) else tuple(volume[1])
    extent = (shape[0] * spacing[0], shape[1] * spacing[1])
    names = list(names) if names is not None else list(landmarks.points)
    ys, xs = _cell_centres(shape, spacing)
    out = np.empty((len(names), shape[0], shape[1]), dtype=np.float32)
    for k, name in enumerate(names):
        p = landmarks.points[name]
        _check_inside(name, p, extent)
        logg = -((ys[:, None] - p[0]) ** 2 + (xs[None, :] - p[1]) ** 2) / (2.0 * sigma_mm**2)
        out[k] = np.exp(logg - logg.max())
    return out


class ExtractedPoint(NamedTuple):
    point: np.ndarray
    degenerate: bool


def extract_point(channel, spacing_mm, mode: str = "decile") -> ExtractedPoint:
    """Decode one heatmap channel to a point in mm.

    ``mode="decile"`` takes the ceil(10%) highest cells (stable order, so ties
    go to the row-major first index) and returns their centroid weighted by
    value above the channel minimum. ``mode="argmax"`` returns the centre of
    the first maximal cell. A constant channel yields the grid centroid with
    ``degenerate=True``.
    """
    ch = np.asarray(channel, dtype=np.float64)
    h, w = ch.shape
    ys, xs = _cell_centres((h, w), spacing_mm)
    flat = np.where(np.isfinite(ch), ch, -np.inf).ravel()
    finite = np.isfinite(flat)
    if not finite.any():
        raise ValueError("channel has no finite cells")
    lo = flat[finite].min()
    if flat[finite].max() == lo:
        return ExtractedPoint(np.array([h * spacing_mm[0] / 2.0, w * spacing_mm[1] / 2.0]), True)
    if mode == "argmax":
        i = int(np.argmax(flat))
        return ExtractedPoint(np.array([ys[i // w], xs[i % w]]), False)
    k = max(1, math.ceil(0.1 * flat.size))
    order = np.argsort(-flat, kind="stable")[:k]
    wts = flat[order] - lo
    wts[~np.isfinite(wts)] = 0.0
    s = wts.sum()
    py = float((wts * ys[order // w]).sum() / s)
    px = float((wts * xs[order % w]).sum() / s)
    return ExtractedPoint(np.array([py, px]), False)


# --------------------------------------------------------------------------
# cohort generation


@dataclass
class DomainShift:
    intensity_scale: float = 1.0
    intensity_offset: float = 0.0
    noise_hu: float = 25.0
    center_offset_mm: tuple = (0.0, 0.0)
    radius_scale: float = 1.0
    rotation_deg: float = 0.0

    def to_dict(self):
        d = self.__dict__.copy()
        d["center_offset_mm"] = list(self.center_offset_mm)
        return d


@dataclass
class CohortSpec:
    """Recipe for a synthetic federation.

    ``label_fraction`` maps client id -> {task: fraction}. Within a client the
    task label sets are disjoint, so fractions must sum to at most 1; the rest
    of the client's samples form the unlabeled pool.
    """

    n_clients: int = 8
    samples_per_client: tuple = (60, 50, 70, 45, 55, 65, 55, 50)
    label_fraction: dict = None
    landmark_noise_mm: tuple = (0.8, 1.2, 0.6, 1.0, 1.4, 0.9, 1.1, 0.7)
    domain_shift: tuple = None
    seed: int = 0
    grid_shape: tuple = (24, 24)
    spacing_mm: tuple = (2.0, 2.0)
    test_fraction: float = 0.2
    morphology: str = "standard"
    client_ids: tuple = None

    def __post_init__(self):
        if self.client_ids is None:
            self.client_ids = tuple(range(1, self.n_clients + 1))
        self.client_ids = tuple(int(c) for c in self.client_ids)
        if self.label_fraction is None:
            self.label_fraction = default_label_fractions()
        self.label_fraction = {int(c): {parse_task(t): float(f) for t, f in row.items()}
                               for c, row in self.label_fraction.items()}
        if self.domain_shift is None:
            self.domain_shift = default_domain_shifts()
        self.domain_shift = tuple(d if isinstance(d, DomainShift) else DomainShift(**d) for d in self.domain_shift)
        self.samples_per_client = tuple(int(n) for n in self.samples_per_client)
        self.landmark_noise_mm = tuple(float(v) for v in self.landmark_noise_mm)
        self.grid_shape = tuple(int(v) for v in self.grid_shape)
        self.spacing_mm = tuple(float(v) for v in self.spacing_mm)
        self.validate()

    def validate(self):
        n = self.n_clients
        if len(self.client_ids) != n:
            raise InfeasibleCohortError("client_ids length differs from n_clients")
        for name in ("samples_per_client", "landmark_noise_mm", "domain_shift"):
            if len(getattr(self, name)) != n:
                raise InfeasibleCohortError(f"{name} must have one entry per client ({n})")
        if min(self.grid_shape) < 16:
            raise InfeasibleCohortError("grid must be at least 16x16")
        if min(self.spacing_mm) <= 0:
            raise InfeasibleCohortError("spacing must be positive")
        if self.morphology not in ("standard", "ood"):
            raise InfeasibleCohortError(f"unknown morphology {self.morphology!r}")
        for c, row in self.label_fraction.items():
            if c not in self.client_ids:
                raise InfeasibleCohortError(f"label_fraction names unknown client {c}")
            if any(not 0.0 <= f <= 1.0 for f in row.values()) or sum(row.values()) > 1.0 + 1e-12:
                raise InfeasibleCohortError(f"client {c}: label fractions must lie in [0,1] and sum to <= 1")
        for c, n_c in zip(self.client_ids, self.samples_per_client):
            for t, f in self.label_fraction.get(c, {}).items():
                pool = labeled_count(f, n_c)
                if 0 < pool < 5:
                    raise InfeasibleCohortError(
                        f"client {c} task {t}: labeled pool {pool} < 5 cannot hold a 20% test split")

    def fraction(self, client_id, task) -> float:
        return self.label_fraction.get(client_id, {}).get(parse_task(task), 0.0)

    def to_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "samples_per_client": list(self.samples_per_client),
            "label_fraction": {str(c): {t.value: f for t, f in row.items()} for c, row in self.label_fraction.items()},
            "landmark_noise_mm": list(self.landmark_noise_mm),
            "domain_shift": [d.to_dict() for d in self.domain_shift],
            "seed": self.seed,
            "grid_shape": list(self.grid_shape),
            "spacing_mm": list(self.spacing_mm),
            "test_fraction": self.test_fraction,
            "morphology": self.morphology,
            "client_ids": list(self.client_ids),
        }


def default_label_fractions() -> dict:
    ho, ms, ca = FEDERATED_TASKS
    # hinge points roughly uniform, septum and calcification skewed
    return {
        1: {ho: 0.25, ms: 0.20, ca: 0.00},
        2: {ho: 0.25, ms: 0.00, ca: 0.20},
        3: {ho: 0.25, ms: 0.10, ca: 0.15},
        4: {ho: 0.25, ms: 0.00, ca: 0.30},
        5: {ho: 0.25, ms: 0.25, ca: 0.00},
        6: {ho: 0.25, ms: 0.00, ca: 0.25},
        7: {ho: 0.25, ms: 0.25, ca: 0.00},
        8: {ho: 0.25, ms: 0.15, ca: 0.20},
    }


def default_domain_shifts() -> tuple:
    rows = [
        (1.10, -40.0, 20.0, (-3.0, 2.5), 1.08, -12.0),
        (0.90, 30.0, 30.0, (2.5, -3.0), 0.92, 10.0),
        (1.05, 50.0, 25.0, (3.0, 3.0), 1.05, 14.0),
        (0.95, -50.0, 35.0, (-2.5, -3.0), 0.94, -9.0),
        (1.15, 10.0, 20.0, (0.0, 3.5), 1.10, 4.0),
        (1.00, 0.0, 25.0, (0.5, 0.0), 1.00, 1.0),
        (0.97, -10.0, 30.0, (-0.5, -0.5), 0.98, -2.0),
        (0.88, 40.0, 25.0, (0.0, -3.5), 0.90, -6.0),
    ]
    return tuple(DomainShift(s, o, n, c, r, rot) for s, o, n, c, r, rot in rows)


def labeled_count(fraction: float, n: int) -> int:
    return int(math.floor(fraction * n + 0.5))


def test_count(pool: int, fraction: float = 0.2) -> int:
    if pool == 0:
        return 0
    if pool < 5:
        raise InfeasibleCohortError(f"labeled pool of {pool} is too small for a test split")
    return max(1, int(math.floor(fraction * pool)))


def _polar(center, radius, angle_deg):
    a = math.radians(angle_deg)
    return (center[0] + radius * math.cos(a), center[1] + radius * math.sin(a))


# hinge template angles in the (y, x) plane; geometry QA uses the same layout
HINGE_ANGLES = {"RCC": 90.0, "LCC": 330.0, "NCC": 210.0}


def nominal_landmarks(radius: float = 1.0) -> dict:
    """Noise-free landmark layout of the generator, centred at the origin, (y, x)."""
    c = (0.0, 0.0)
    pts = {name: _polar(c, radius, ang) for name, ang in HINGE_ANGLES.items()}
    pts["RCO"] = _polar(c, 1.4 * radius, HINGE_ANGLES["RCC"] + 20)
    pts["LCO"] = _polar(c, 1.4 * radius, HINGE_ANGLES["LCC"] - 20)
    pts["MS1"] = _polar(c, 1.45 * radius, 150.0)
    pts["MS2"] = _polar(c, 1.0 * radius, 158.0)
    return {k: np.array(v) for k, v in pts.items()}


@dataclass
class _Anatomy:
    center: tuple
    radius: float
    rotation: float
    points: dict
    calc_spots: list
    vessels: list


def _sample_anatomy(rng, extent, shift: DomainShift, morphology: str) -> _Anatomy:
    fov = min(extent)
    base_r = 0.2 * fov * (1.15 if morphology == "ood" else 1.0)
    center = (extent[0] / 2 + shift.center_offset_mm[0] + rng.normal(0, 0.05 * fov),
              extent[1] / 2 + shift.center_offset_mm[1] + rng.normal(0, 0.05 * fov))
    radius = base_r * shift.radius_scale * (1 + rng.normal(0, 0.06))
    rot = shift.rotation_deg + rng.normal(0, 8.0)
    pts = {}
    for name, ang in HINGE_ANGLES.items():
        pts[name] = _polar(center, radius * (1 + rng.normal(0, 0.03)), ang + rot + rng.normal(0, 3.0))
    pts["RCO"] = _polar(center, 1.4 * radius, HINGE_ANGLES["RCC"] + rot + 20 + rng.normal(0, 4.0))
    pts["LCO"] = _polar(center, 1.4 * radius, HINGE_ANGLES["LCC"] + rot - 20 + rng.normal(0, 4.0))
    ms_ang = 150.0 + rot + rng.normal(0, 3.0)
    pts["MS1"] = _polar(center, 1.45 * radius, ms_ang)
    pts["MS2"] = _polar(center, 1.0 * radius, ms_ang + 8.0)
    spots = []
    calcified = rng.uniform(size=3) < 0.8
    calcified[int(rng.integers(3))] = True
    for name, on in zip(HINGE_ANGLES, calcified):
        if not on:
            continue
        ang = HINGE_ANGLES[name] + rot + rng.normal(0, 6.0)
        spots.append((_polar(center, radius * rng.uniform(0.7, 0.9), ang), fov * rng.uniform(0.07, 0.1)))
    vessels = []
    for name, sign in (("RCO", 1.0), ("LCO", -1.0)):
        start = pts[name]
        ang = math.degrees(math.atan2(start[1] - center[1], start[0] - center[0]))
        end = _polar(start, 0.3 * fov, ang + sign * rng.normal(25.0, 8.0))
        vessels.append((start, end, 0.035 * fov))
    return _Anatomy(center, radius, rot, pts, spots, vessels)


def _segment_distance(py, px, a, b):
    ay, ax = a
    by, bx = b
    dy, dx = by - ay, bx - ax
    tt = np.clip(((py - ay) * dy + (px - ax) * dx) / (dy * dy + dx * dx), 0.0, 1.0)
    return np.hypot(py - (ay + tt * dy), px - (ax + tt * dx))


def _render(rng, anat: _Anatomy, shape, spacing, shift: DomainShift, morphology: str):
    ys, xs = _cell_centres(shape, spacing)
    py, px = np.meshgrid(ys, xs, indexing="ij")
    extent = (shape[0] * spacing[0], shape[1] * spacing[1])
    fov = min(extent)
    hu = np.full(shape, 40.0)
    # lung-like dark periphery
    rr = np.hypot(py - extent[0] / 2, px - extent[1] / 2)
    hu[rr > 0.48 * fov] = -750.0
    # three sinus lobes, notched at the hinge angles
    blood = 320.0 if morphology == "standard" else 420.0
    inside = np.hypot(py - anat.center[0], px - anat.center[1]) < 0.75 * anat.radius
    for ang in (150.0, 270.0, 30.0):
        c = _polar(anat.center, 0.5 * anat.radius, ang + anat.rotation)
        inside |= np.hypot(py - c[0], px - c[1]) < 0.55 * anat.radius
    hu[inside] = blood
    # septal band between the two septum points
    band = _segment_distance(py, px, anat.points["MS1"], anat.points["MS2"]) < 0.02 * fov + 0.5 * spacing[0]
    hu[band & ~inside] = 130.0
    vessel_mask = np.zeros(shape, dtype=bool)
    for start, end, width in anat.vessels:
        vessel_mask |= _segment_distance(py, px, start, end) < width / 2 + 0.35 * min(spacing)
    hu[vessel_mask] = blood
    calc_mask = np.zeros(shape, dtype=bool)
    for centre, rad in anat.calc_spots:
        calc_mask |= np.hypot(py - centre[0], px - centre[1]) < max(rad, 0.75 * min(spacing))
    hu[calc_mask] = 900.0
    hu = shift.intensity_scale * hu + shift.intensity_offset + rng.normal(0.0, shift.noise_hu, shape)
    return hu.astype(np.float32), calc_mask, vessel_mask


def _annotate(rng, points, names, noise_mm, extent, annotator_id):
    out = {}
    for n in names:
        y, x = points[n]
        y = min(max(y + rng.normal(0, noise_mm), 0.0), extent[0])
        x = min(max(x + rng.normal(0, noise_mm), 0.0), extent[1])
        out[n] = (y, x)
    return LandmarkSet(out, annotator_id)


# Landmarks written for each point task. The septum task also records the
# RCC/NCC reference points the annotator placed, used by geometry QA.
TASK_LANDMARKS = {
    TaskKind.HINGE_OSTIA: ("RCC", "LCC", "NCC", "RCO", "LCO"),
    TaskKind.MEMBRANOUS_SEPTUM: ("MS1", "MS2", "RCC", "NCC"),
}


def client_rng(seed: int, client_id: int, stream: str = "cohort") -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:4], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, int(client_id)]))


def generate_client(spec: CohortSpec, index: int) -> ClientShard:
    cid = spec.client_ids[index]
    rng = client_rng(spec.seed, cid)
    n = spec.samples_per_client[index]
    shift = spec.domain_shift[index]
    shape, spacing = spec.grid_shape, spec.spacing_mm
    extent = (shape[0] * spacing[0], shape[1] * spacing[1])
    annotator = f"site{cid}-a1"
    order = rng.permutation(n)
    assignment = [None] * n
    cursor = 0
    tasks = [t for t in TaskKind if spec.fraction(cid, t) > 0]
    for t in tasks:
        k = labeled_count(spec.fraction(cid, t), n)
        for i in order[cursor:cursor + k]:
            assignment[i] = t
        cursor += k
    shard = ClientShard(cid, {t: [] for t in tasks}, [], {t: [] for t in tasks})
    for i in range(n):
        anat = _sample_anatomy(rng, extent, shift, spec.morphology)
        grid, calc, vessel = _render(rng, anat, shape, spacing, shift, spec.morphology)
        vol = Volume(grid, spacing, cid, f"c{cid}_s{i:04d}")
        t = assignment[i]
        if t is None:
            shard.unlabeled.append(vol)
        elif t.is_landmark:
            lm = _annotate(rng, anat.points, TASK_LANDMARKS[t], spec.landmark_noise_mm[index], extent, annotator)
            shard.labeled[t].append(Sample(vol, t, landmarks=lm))
        elif t is TaskKind.CALCIFICATION:
            shard.labeled[t].append(Sample(vol, t, mask=calc.astype(np.float32)))
        else:
            shard.labeled[t].append(Sample(vol, t, mask=vessel.astype(np.float32)))
    return split_train_test(shard, spec.test_fraction, spec.seed)


def generate_cohort(spec: CohortSpec) -> list:
    """Deterministic list of :class:`ClientShard`, one per client, test splits populated."""
    spec.validate()
    return [generate_client(spec, i) for i in range(spec.n_clients)]


def split_train_test(shard: ClientShard, fraction: float = 0.2, seed: int = 0) -> ClientShard:
    """Stratified per-task split; re-splitting pools train and test first."""
    labeled, test = {}, {}
    for t in sorted(set(shard.labeled) | set(shard.test), key=lambda t: t.value):
        pool = sorted(shard.labeled.get(t, []) + shard.test.get(t, []), key=lambda s: s.volume.sample_id)
        k = test_count(len(pool), fraction)
        rng = client_rng(seed, shard.client_id, f"split:{t.value}")
        perm = rng.permutation(len(pool))
        test_idx = set(perm[:k].tolist())
        test[t] = [s for i, s in enumerate(pool) if i in test_idx]
        labeled[t] = [s for i, s in enumerate(pool) if i not in test_idx]
    return ClientShard(shard.client_id, labeled, list(shard.unlabeled), test)


# --------------------------------------------------------------------------
# shard files


MANIFEST_FORMAT = "fedkd-shard/1"


def _write_f32(path: Path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_f32(path: Path, shape):
    return np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float32).reshape(shape)


def write_shard(shard: ClientShard, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    shape = None

    def add(vol: Volume, split, sample: Optional[Sample]):
        nonlocal shape
        shape = list(vol.grid.shape)
        gfile = f"grids/{vol.sample_id}.f32"
        _write_f32(d / gfile, vol.grid)
        e = {"sample_id": vol.sample_id, "split": split, "task": None,
             "spacing_mm": list(vol.spacing_mm), "grid_file": gfile,
             "landmarks": None, "annotator_id": None, "mask_file": None}
        if sample is not None:
            e["task"] = sample.task.value
            if sample.landmarks is not None:
                e["landmarks"] = sample.landmarks.to_dict()
                e["annotator_id"] = sample.landmarks.annotator_id
            if sample.mask is not None:
                mfile = f"masks/{vol.sample_id}.f32"
                _write_f32(d / mfile, sample.mask)
                e["mask_file"] = mfile
        entries.append(e)

    for split, groups in (("train", shard.labeled), ("test", shard.test)):
        for t, samples in groups.items():
            for s in samples:
                add(s.volume, split, s)
    for v in shard.unlabeled:
        add(v, "unlabeled", None)
    entries.sort(key=lambda e: e["sample_id"])
    manifest = {
        "format": MANIFEST_FORMAT,
        "client_id": shard.client_id,
        "grid_shape": shape,
        "dtype": "<f4",
        "tasks": [t.value for t in sorted(set(shard.labeled) | set(shard.test), key=lambda t: t.value)],
        "samples": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def read_shard(directory) -> ClientShard:
    d = Path(directory)
    m = json.loads((d / "manifest.json").read_text())
    if m.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{d}: not a shard manifest")
    cid = int(m["client_id"])
    tasks = [parse_task(t) for t in m.get("tasks", [])]
    shard = ClientShard(cid, {t: [] for t in tasks}, [], {t: [] for t in tasks})
    shape = tuple(m["grid_shape"])
    for e in m["samples"]:
        vol = Volume(_read_f32(d / e["grid_file"], shape), tuple(e["spacing_mm"]), cid, e["sample_id"])
        if e["split"] == "unlabeled":
            shard.unlabeled.append(vol)
            continue
        t = parse_task(e["task"])
        lm = LandmarkSet(e["landmarks"], e.get("annotator_id")) if e.get("landmarks") else None
        mask = _read_f32(d / e["mask_file"], shape) if e.get("mask_file") else None
        target = shard.labeled if e["split"] == "train" else shard.test
        target.setdefault(t, []).append(Sample(vol, t, landmarks=lm, mask=mask))
    return shard


def client_dir_name(client_id: int) -> str:
    return f"client_{client_id:02d}"


def write_cohort(shards, root, spec: Optional[CohortSpec] = None) -> dict:
    """Write all shards plus ``checksums.json`` (sha256 per file); returns the checksum map."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for sh in shards:
        write_shard(sh, root / client_dir_name(sh.client_id))
    if spec is not None:
        (root / "cohort.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    sums = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = Path(dirpath) / f
            rel = p.relative_to(root).as_posix()
            if rel == "checksums.json":
                continue
            sums[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
    sums = dict(sorted(sums.items()))
    (root / "checksums.json").write_text(json.dumps(sums, indent=1) + "\n")
    return sums


def read_cohort(root) -> list:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no client shards under {root}")
    return [read_shard(p) for p in dirs]


# --------------------------------------------------------------------------
# tensors for training


def task_arrays(samples, task, norm: NormalizationSpec = NormalizationSpec(), sigma_mm: float = 2.0):
    """Stack ``(X, Y)`` for a list of samples: X normalised ``(n, H, W)``, Y ``(n, C, H, W)``."""
    task = parse_task(task)
    if not samples:
        raise ValueError("no samples")
    x = np.stack([normalize_array(s.volume.grid, norm) for s in samples]).astype(np.float32)
    y = np.stack([s.targets(sigma_mm) for s in samples]).astype(np.float32)
    return x, y


def volume_arrays(volumes, norm: NormalizationSpec = NormalizationSpec()) -> np.ndarray:
    return np.stack([normalize_array(v.grid, norm) for v in volumes]).astype(np.float32)
