"""Label-quality analysis on landmark geometry only.

Points are handled as plain coordinate vectors in mm (the (y, x) order of
the shard manifests in 2D, any consistent order in 3D). Nothing here looks
at image intensities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from fedkd.data import nominal_landmarks

HINGE_NAMES = ("RCC", "LCC", "NCC")
# counter-clockwise RCC -> NCC -> LCC, as in the synthetic anatomy
TEMPLATE_DEG = {"RCC": 0.0, "NCC": 120.0, "LCC": 240.0}
MAD_SCALE = 0.6745
DEFAULT_Z = 3.5


class DegenerateGeometryError(ValueError):
    pass


# --------------------------------------------------------------------------
# hinge triplet


@dataclass
class HingeTriplet:
    rcc: np.ndarray
    lcc: np.ndarray
    ncc: np.ndarray

    def __post_init__(self):
        self.rcc, self.lcc, self.ncc = (np.asarray(p, dtype=np.float64) for p in (self.rcc, self.lcc, self.ncc))
        dims = {p.shape for p in (self.rcc, self.lcc, self.ncc)}
        if len(dims) != 1 or self.rcc.shape not in ((2,), (3,)):
            raise DegenerateGeometryError("hinge points must all be 2D or all 3D")
        a, b = self.lcc - self.rcc, self.ncc - self.rcc
        scale = max(np.linalg.norm(a), np.linalg.norm(b))
        if scale == 0 or min(np.linalg.norm(a), np.linalg.norm(b), np.linalg.norm(self.ncc - self.lcc)) <= 1e-12 * scale:
            raise DegenerateGeometryError("hinge points must be distinct")
        area = abs(_cross2(a, b)) if a.size == 2 else np.linalg.norm(np.cross(a, b))
        if area <= 1e-9 * scale * scale:
            raise DegenerateGeometryError("hinge points are collinear")

    @classmethod
    def from_landmarks(cls, points: dict) -> "HingeTriplet":
        return cls(points["RCC"], points["LCC"], points["NCC"])

    def as_dict(self) -> dict:
        return {"RCC": self.rcc, "LCC": self.lcc, "NCC": self.ncc}


@dataclass
class HingeRegistration:
    points: dict
    theta: float
    residual: float
    radius: float


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _plane_coords(pts: np.ndarray, normal_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Project centred 3D points onto their best-fit plane, as 2D coordinates.

    The plane normal is oriented to agree with ``normal_hint`` so that a
    mirrored labelling stays distinguishable from the correct one.
    """
    _, _, vt = np.linalg.svd(pts)
    e1, n = vt[0], vt[2]
    if np.dot(n, normal_hint) < 0:
        n = -n
    e2 = np.cross(n, e1)
    return np.stack([pts @ e1, pts @ e2], axis=1)


def template_points(radius: float, names=HINGE_NAMES) -> np.ndarray:
    ang = np.radians([TEMPLATE_DEG[n] for n in names])
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def alignment_objective(p: np.ndarray, q: np.ndarray, theta) -> np.ndarray:
    """``sum_i |R(theta) p_i - q_i|^2`` for one angle or an array of angles."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta)[..., None], np.sin(theta)[..., None]
    rx = c * p[:, 0] - s * p[:, 1]
    ry = s * p[:, 0] + c * p[:, 1]
    return ((rx - q[:, 0]) ** 2 + (ry - q[:, 1]) ** 2).sum(axis=-1)


def optimal_angle(p: np.ndarray, q: np.ndarray) -> float:
    """Closed-form minimiser of :func:`alignment_objective` (2D Procrustes angle)."""
    dot = float(np.sum(p * q))
    cross = float(np.sum(p[:, 0] * q[:, 1] - p[:, 1] * q[:, 0]))
    return math.atan2(cross, dot) % (2 * math.pi)


def register_hinge_triplet(t: HingeTriplet, normal_hint=(0.0, 0.0, 1.0)) -> HingeRegistration:
    """Centre the triplet and rotate it onto the 120-degree template.

    The template sits at the triplet's own mean radius, so scale survives.
    Labels are matched by name; permutations are deliberately not quotiented.
    """
    pts = np.stack([t.rcc, t.lcc, t.ncc])
    pts = pts - pts.mean(axis=0)
    if pts.shape[1] == 3:
        pts = _plane_coords(pts, np.asarray(normal_hint, dtype=np.float64))
    radius = float(np.linalg.norm(pts, axis=1).mean())
    q = template_points(radius)
    theta = optimal_angle(pts, q)
    aligned = pts @ _rot(theta).T
    residual = float(((aligned - q) ** 2).sum())
    return HingeRegistration(dict(zip(HINGE_NAMES, aligned)), theta, residual, radius)


# --------------------------------------------------------------------------
# membranous septum


@dataclass
class MsPair:
    ms1: np.ndarray
    ms2: np.ndarray
    rcc: np.ndarray
    ncc: np.ndarray

    def __post_init__(self):
        self.ms1, self.ms2, self.rcc, self.ncc = (np.asarray(p, dtype=np.float64)
                                                  for p in (self.ms1, self.ms2, self.rcc, self.ncc))
        if np.allclose(self.rcc, self.ncc, rtol=0, atol=1e-12):
            raise DegenerateGeometryError("RCC and NCC coincide")

    @classmethod
    def from_landmarks(cls, points: dict) -> "MsPair":
        return cls(points["MS1"], points["MS2"], points["RCC"], points["NCC"])


def register_ms_pair(m: MsPair, normal_hint=(0.0, 0.0, 1.0)):
    """``(u1, u2)``: MS1 and MS2 in the similarity frame spanned by RCC -> NCC.

    Origin at the RCC/NCC midpoint, unit length equal to their distance, y
    axis a right-handed quarter turn from x (about ``normal_hint`` in 3D).
    """
    origin = (m.rcc + m.ncc) / 2.0
    axis = m.ncc - m.rcc
    length = float(np.linalg.norm(axis))
    ex = axis / length
    if ex.size == 2:
        ey = np.array([-ex[1], ex[0]])
    else:
        n = np.asarray(normal_hint, dtype=np.float64)
        ey = np.cross(n, ex)
        if np.linalg.norm(ey) < 1e-12:
            raise DegenerateGeometryError("RCC->NCC axis is parallel to the normal hint")
        ey /= np.linalg.norm(ey)

    def frame(p):
        d = p - origin
        return np.array([np.dot(d, ex), np.dot(d, ey)]) / length

    return frame(m.ms1), frame(m.ms2)


def nominal_ms_direction() -> np.ndarray:
    """Expected (u2 - u1) direction for correctly labelled anatomy."""
    u1, u2 = register_ms_pair(MsPair.from_landmarks(nominal_landmarks()))
    d = u2 - u1
    return d / np.linalg.norm(d)


@dataclass
class SwapReport:
    flags: list
    reference: np.ndarray
    ambiguous: bool
    agreement: list
    note: str = ""


def detect_swaps(frame_coords, cohort_reference=None, min_samples: int = 5) -> SwapReport:
    """Flag samples whose MS1 -> MS2 direction opposes the cohort median.

    ``cohort_reference`` is an optional prior direction (for example
    :func:`nominal_ms_direction`). When the cohort median disagrees with it,
    or when too many samples oppose the median, the report is marked
    ambiguous: majority-relative flags cannot tell which side is correct.
    """
    coords = [(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)) for a, b in frame_coords]
    if len(coords) < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {len(coords)}")
    vecs = []
    for i, (u1, u2) in enumerate(coords):
        v = u2 - u1
        n = np.linalg.norm(v)
        if n == 0:
            raise DegenerateGeometryError(f"sample {i}: MS1 and MS2 coincide")
        vecs.append(v / n)
    vecs = np.array(vecs)
    d = np.median(vecs, axis=0)
    if np.linalg.norm(d) < 1e-12:
        d = vecs.mean(axis=0)
    dn = np.linalg.norm(d)
    d = d / dn if dn > 0 else d
    dots = vecs @ d
    # swapping the pair negates the dot product, so a negative dot is always fixable by a swap
    flags = [bool(x < 0) for x in dots]
    note = []
    ambiguous = dn < 1e-12
    if sum(flags) > 0.25 * len(flags):
        ambiguous = True
        note.append("a large share of samples oppose the cohort median")
    if cohort_reference is not None:
        ref = np.asarray(cohort_reference, dtype=np.float64)
        if np.dot(ref, d) < 0:
            ambiguous = True
            note.append("cohort median opposes the reference direction; the majority may be swapped")
    return SwapReport(flags, d, bool(ambiguous), [float(x) for x in dots], "; ".join(note))


# --------------------------------------------------------------------------
# inter-observer


@dataclass
class InterObserverStats:
    per_landmark: dict
    distances: list
    mean: float
    std: float
    n: int


def interobserver_stats(annotations: dict) -> InterObserverStats:
    """``annotations[sample][annotator][landmark] -> point``.

    Every distance is from one annotator's point to the mean over all
    annotators of that landmark on that sample.
    """
    per = {}
    rows = []
    for sid in sorted(annotations):
        by_annot = annotations[sid]
        names = sorted({n for pts in by_annot.values() for n in pts})
        for name in names:
            marks = {a: np.asarray(p[name], dtype=np.float64) for a, p in sorted(by_annot.items(), key=lambda kv: str(kv[0]))
                     if name in p}
            if len(marks) < 2:
                raise ValueError(f"sample {sid} landmark {name}: need at least two annotators")
            mean_pt = np.mean(np.stack(list(marks.values())), axis=0)
            dist = {str(a): float(np.linalg.norm(p - mean_pt)) for a, p in marks.items()}
            per.setdefault(name, []).append({"sample_id": str(sid), "mean_point": mean_pt.tolist(), "distance": dist})
            rows.extend(dist.values())
    if not rows:
        raise ValueError("no annotations")
    v = np.array(rows)
    return InterObserverStats(per, rows, float(v.mean()), float(v.std()), int(v.size))


def expected_distance_from_mean(sigma: float, k: int, dim: int = 2) -> float:
    """E|x_i - mean| for k annotators with isotropic N(0, sigma^2) jitter."""
    s = sigma * math.sqrt(1.0 - 1.0 / k)
    if dim == 2:
        return s * math.sqrt(math.pi / 2.0)
    if dim == 3:
        return 2.0 * s * math.sqrt(2.0 / math.pi)
    # chi distribution mean for general dimension
    return s * math.sqrt(2.0) * math.exp(math.lgamma((dim + 1) / 2) - math.lgamma(dim / 2))


# --------------------------------------------------------------------------
# outliers


@dataclass
class OutlierReport:
    flags: list
    scores: list
    fallback: bool


def detect_outliers(points, threshold: float = DEFAULT_Z, min_points: int = 10) -> OutlierReport:
    """Robust z-score ``0.6745 (x - median) / MAD`` per coordinate; flag when max |z| > threshold.

    A coordinate with zero MAD falls back to "differs from the median"
    (score inf for differing points, 0 otherwise).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if len(pts) < min_points:
        raise ValueError(f"need at least {min_points} points, got {len(pts)}")
    med = np.median(pts, axis=0)
    mad = np.median(np.abs(pts - med), axis=0)
    z = np.zeros_like(pts)
    fallback = bool((mad == 0).any())
    for j in range(pts.shape[1]):
        if mad[j] > 0:
            z[:, j] = MAD_SCALE * (pts[:, j] - med[j]) / mad[j]
        else:
            z[:, j] = np.where(pts[:, j] != med[j], np.inf, 0.0)
    score = np.abs(z).max(axis=1)
    return OutlierReport([bool(s > threshold) for s in score], [float(s) for s in score], fallback)


# --------------------------------------------------------------------------
# report


@dataclass
class LandmarkRecord:
    sample_id: str
    client_id: Optional[int]
    annotator_id: Optional[str]
    points: dict


def load_landmark_records(path) -> list:
    """Read landmark blocks from a shard manifest, a ``{"samples": [...]}`` file or a directory of either."""
    p = Path(path)
    files = sorted(p.rglob("*.json")) if p.is_dir() else [p]
    out = []
    for f in files:
        try:
            obj = json.loads(f.read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{f}: malformed JSON ({e})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("samples"), list):
            continue
        if not all(isinstance(e, dict) for e in obj["samples"]):
            continue  # e.g. pseudo-label indexes, which list bare sample ids
        cid = obj.get("client_id")
        for e in obj["samples"]:
            lm = e.get("landmarks")
            if not lm:
                continue
            if not isinstance(lm, dict) or any(not isinstance(v, (list, tuple)) or len(v) not in (2, 3) for v in lm.values()):
                raise ValueError(f"{f}: malformed landmark block for {e.get('sample_id')}")
            out.append(LandmarkRecord(str(e["sample_id"]), e.get("client_id", cid), e.get("annotator_id"),
                                      {k: np.asarray(v, dtype=np.float64) for k, v in lm.items()}))
    return out


def _r(x, nd=6):
    return [round(float(v), nd) for v in x]


def build_qa_report(records, threshold: float = DEFAULT_Z, cohort_reference="nominal") -> dict:
    """Assemble the JSON-ready QA report from landmark records."""
    if cohort_reference == "nominal":
        cohort_reference = nominal_ms_direction()
    by_sample = {}
    for r in records:
        by_sample.setdefault(r.sample_id, []).append(r)
    hinge, ms = [], []
    for sid in sorted(by_sample):
        for r in by_sample[sid]:
            if all(n in r.points for n in HINGE_NAMES):
                reg = register_hinge_triplet(HingeTriplet.from_landmarks(r.points))
                hinge.append({"sample_id": sid, "client_id": r.client_id, "annotator_id": r.annotator_id,
                              "aligned": {n: _r(reg.points[n]) for n in HINGE_NAMES},
                              "theta": round(reg.theta, 9), "residual": round(reg.residual, 9),
                              "radius": round(reg.radius, 6)})
            if all(n in r.points for n in ("MS1", "MS2", "RCC", "NCC")):
                u1, u2 = register_ms_pair(MsPair.from_landmarks(r.points))
                ms.append({"sample_id": sid, "client_id": r.client_id, "annotator_id": r.annotator_id,
                           "u1": _r(u1), "u2": _r(u2)})
    report = {"format": "fedkd-qa/1", "n_records": len(records), "hinge": hinge, "ms": ms,
              "swaps": None, "outliers": {}, "interobserver": None}
    if len(ms) >= 5:
        sw = detect_swaps([(m["u1"], m["u2"]) for m in ms], cohort_reference)
        report["swaps"] = {"reference": _r(sw.reference), "ambiguous": sw.ambiguous, "note": sw.note,
                           "flagged": [m["sample_id"] for m, f in zip(ms, sw.flags) if f],
                           "flags": [{"sample_id": m["sample_id"], "flag": f, "agreement": round(a, 6)}
                                     for m, f, a in zip(ms, sw.flags, sw.agreement)]}
    locations = {n: [h["aligned"][n] for h in hinge] for n in HINGE_NAMES}
    locations["MS1"] = [m["u1"] for m in ms]
    locations["MS2"] = [m["u2"] for m in ms]
    ids = {n: [h["sample_id"] for h in hinge] for n in HINGE_NAMES}
    ids["MS1"] = ids["MS2"] = [m["sample_id"] for m in ms]
    for name, pts in locations.items():
        if len(pts) >= 10:
            o = detect_outliers(pts, threshold)
            report["outliers"][name] = {
                "fallback": o.fallback,
                "points": [{"sample_id": s, "flag": f, "score": (None if math.isinf(sc) else round(sc, 6))}
                           for s, f, sc in zip(ids[name], o.flags, o.scores)]}
    multi = {}
    for sid, rs in by_sample.items():
        annots = {r.annotator_id for r in rs if r.annotator_id is not None}
        if len(annots) >= 2:
            multi[sid] = {r.annotator_id: r.points for r in rs if r.annotator_id is not None}
    if multi:
        st = interobserver_stats(multi)
        report["interobserver"] = {"mean": round(st.mean, 6), "std": round(st.std, 6), "n": st.n,
                                   "per_landmark": {n: [{"sample_id": e["sample_id"], "mean_point": _r(e["mean_point"]),
                                                         "distance": {a: round(d, 6) for a, d in e["distance"].items()}}
                                                        for e in rows] for n, rows in sorted(st.per_landmark.items())}}
    return report


# Allowed keys per level; anything else (or any long numeric array) is a schema violation.
_QA_KEYS = {
    "": {"format", "n_records", "hinge", "ms", "swaps", "outliers", "interobserver"},
    "hinge[]": {"sample_id", "client_id", "annotator_id", "aligned", "theta", "residual", "radius"},
    "ms[]": {"sample_id", "client_id", "annotator_id", "u1", "u2"},
    "swaps": {"reference", "ambiguous", "note", "flagged", "flags"},
    "swaps.flags[]": {"sample_id", "flag", "agreement"},
    "outliers.*": {"fallback", "points"},
    "outliers.*.points[]": {"sample_id", "flag", "score"},
    "interobserver": {"mean", "std", "n", "per_landmark"},
    "interobserver.per_landmark.*[]": {"sample_id", "mean_point", "distance"},
}
_LANDMARK_KEYS = {"RCC", "LCC", "NCC", "RCO", "LCO", "MS1", "MS2"}


def validate_qa_report(obj: dict) -> list:
    """Schema check: only landmark-derived numbers, ids and flags; no array longer than a point."""
    problems = []

    def keys(d, where, allowed):
        if not isinstance(d, dict):
            problems.append(f"{where}: expected an object")
            return False
        extra = set(d) - allowed
        if extra:
            problems.append(f"{where}: unexpected keys {sorted(extra)}")
        return True

    def leaf_ok(v, where):
        if isinstance(v, list):
            if len(v) > 3:
                problems.append(f"{where}: array of length {len(v)}")
            for x in v:
                if not isinstance(x, (int, float)) or isinstance(x, bool):
                    problems.append(f"{where}: non-numeric point component")
        elif not (v is None or isinstance(v, (str, int, float, bool))):
            problems.append(f"{where}: unexpected value type {type(v).__name__}")

    if not keys(obj, "report", _QA_KEYS[""]):
        return problems
    for i, h in enumerate(obj.get("hinge") or []):
        if keys(h, f"hinge[{i}]", _QA_KEYS["hinge[]"]):
            keys(h.get("aligned", {}), f"hinge[{i}].aligned", set(HINGE_NAMES))
            for k, v in h.items():
                if k == "aligned":
                    for n, p in v.items():
                        leaf_ok(p, f"hinge[{i}].aligned.{n}")
                else:
                    leaf_ok(v, f"hinge[{i}].{k}")
    for i, m in enumerate(obj.get("ms") or []):
        if keys(m, f"ms[{i}]", _QA_KEYS["ms[]"]):
            for k, v in m.items():
                leaf_ok(v, f"ms[{i}].{k}")
    sw = obj.get("swaps")
    if sw is not None and keys(sw, "swaps", _QA_KEYS["swaps"]):
        leaf_ok(sw.get("reference"), "swaps.reference")
        for s in sw.get("flagged", []):
            leaf_ok(s, "swaps.flagged")
        for i, f in enumerate(sw.get("flags", [])):
            if keys(f, f"swaps.flags[{i}]", _QA_KEYS["swaps.flags[]"]):
                for k, v in f.items():
                    leaf_ok(v, f"swaps.flags[{i}].{k}")
    outl = obj.get("outliers") or {}
    keys(outl, "outliers", _LANDMARK_KEYS)
    for n, o in outl.items():
        if keys(o, f"outliers.{n}", _QA_KEYS["outliers.*"]):
            for i, p in enumerate(o.get("points", [])):
                if keys(p, f"outliers.{n}.points[{i}]", _QA_KEYS["outliers.*.points[]"]):
                    for k, v in p.items():
                        leaf_ok(v, f"outliers.{n}.points[{i}].{k}")
    io = obj.get("interobserver")
    if io is not None and keys(io, "interobserver", _QA_KEYS["interobserver"]):
        keys(io.get("per_landmark", {}), "interobserver.per_landmark", _LANDMARK_KEYS)
        for n, rows in io.get("per_landmark", {}).items():
            for i, r in enumerate(rows):
                if keys(r, f"interobserver.{n}[{i}]", _QA_KEYS["interobserver.per_landmark.*[]"]):
                    leaf_ok(r.get("sample_id"), "sample_id")
                    leaf_ok(r.get("mean_point"), "mean_point")
                    for a, d in (r.get("distance") or {}).items():
                        leaf_ok(d, f"interobserver.{n}[{i}].distance.{a}")
    return problems


# --------------------------------------------------------------------------
# SVG panels


def svg_scatter(panels: dict, title: str = "", size: int = 320) -> str:
    """Static scatter plot; ``panels`` maps a series name to an (n, 2) point list."""
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    allpts = np.array([p for pts in panels.values() for p in pts], dtype=np.float64).reshape(-1, 2)
    if allpts.size == 0:
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    else:
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
    span = float(max((hi - lo).max(), 1e-9)) * 1.1
    mid = (hi + lo) / 2
    pad = 20

    def xy(p):
        # first coordinate drawn upwards, second to the right
        x = pad + (p[1] - mid[1] + span / 2) / span * (size - 2 * pad)
        y = size - pad - (p[0] - mid[0] + span / 2) / span * (size - 2 * pad)
        return x, y

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}" viewBox="0 0 {size} {size + 20}">',
           f'<rect width="{size}" height="{size + 20}" fill="white"/>',
           f'<text x="{pad}" y="14" font-family="sans-serif" font-size="12">{title}</text>']
    for k, (name, pts) in enumerate(panels.items()):
        col = colours[k % len(colours)]
        for p in pts:
            x, y = xy(p)
            out.append(f'<circle cx="{x:.2f}" cy="{y + 20:.2f}" r="2.5" fill="{col}" fill-opacity="0.6"/>')
        out.append(f'<text x="{size - 60}" y="{34 + 14 * k}" font-family="sans-serif" font-size="11" fill="{col}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_qa_outputs(report: dict, out_dir, svg: bool = True) -> list:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    files = [d / "qa_report.json"]
    files[0].write_text(json.dumps(report, indent=1, sort_keys=True, allow_nan=False) + "\n")
    if svg:
        if report["hinge"]:
            panels = {n: [h["aligned"][n] for h in report["hinge"]] for n in HINGE_NAMES}
            (d / "qa_hinge.svg").write_text(svg_scatter(panels, "hinge points, aligned"))
            files.append(d / "qa_hinge.svg")
        if report["ms"]:
            panels = {"MS1": [m["u1"] for m in report["ms"]], "MS2": [m["u2"] for m in report["ms"]]}
            (d / "qa_ms.svg").write_text(svg_scatter(panels, "membranous septum, RCC-NCC frame"))
            files.append(d / "qa_ms.svg")
    return files
