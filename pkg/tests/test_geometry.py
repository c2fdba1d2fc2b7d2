import json
import math

import numpy as np
import pytest

from fedkd.geometry import (
    DegenerateGeometryError, HingeTriplet, LandmarkRecord, MsPair, TEMPLATE_DEG, build_qa_report,
    detect_outliers, detect_swaps, expected_distance_from_mean, interobserver_stats, load_landmark_records,
    nominal_ms_direction, optimal_angle, register_hinge_triplet, register_ms_pair, template_points,
    validate_qa_report, write_qa_outputs,
)

from conftest import angle_gap, ms_cohort, scan_angle


def polar(r, deg, centre=(0.0, 0.0)):
    a = math.radians(deg)
    return np.array([centre[0] + r * math.cos(a), centre[1] + r * math.sin(a)])


def test_exact_template_has_zero_residual():
    pts = {n: polar(7.0, d + 33.0, (4.0, -2.0)) for n, d in TEMPLATE_DEG.items()}
    reg = register_hinge_triplet(HingeTriplet.from_landmarks(pts))
    assert reg.residual < 1e-20
    assert reg.radius == pytest.approx(7.0)
    assert angle_gap(reg.theta, math.radians(-33.0) % (2 * math.pi)) < 1e-12


def test_closed_form_matches_scan():
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = rng.normal(size=(3, 2)) * 4
        p -= p.mean(axis=0)
        q = template_points(float(np.linalg.norm(p, axis=1).mean()))
        assert angle_gap(optimal_angle(p, q), scan_angle(p, q)) <= 2 * math.pi / 1_000_000


def test_3d_triplet_matches_its_2d_embedding():
    pts2 = {n: polar(5.0, d + 10.0) + np.array([0.3, -0.2]) * (n == "LCC") for n, d in TEMPLATE_DEG.items()}
    r2 = register_hinge_triplet(HingeTriplet.from_landmarks(pts2))
    # tilt the plane about the x axis; the hint keeps the orientation
    tilt = math.radians(40)
    rot = np.array([[1, 0, 0], [0, math.cos(tilt), -math.sin(tilt)], [0, math.sin(tilt), math.cos(tilt)]])
    pts3 = {n: rot @ np.array([p[0], p[1], 0.0]) + [1, 2, 3] for n, p in pts2.items()}
    r3 = register_hinge_triplet(HingeTriplet.from_landmarks(pts3), normal_hint=rot @ [0, 0, 1])
    assert r3.residual == pytest.approx(r2.residual, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("pts", [
    {"RCC": [0, 0], "LCC": [0, 0], "NCC": [1, 1]},
    {"RCC": [0, 0], "LCC": [1, 1], "NCC": [2, 2]},
    {"RCC": [0, 0], "LCC": [1, 1, 0], "NCC": [2, 0]},
])
def test_degenerate_triplets(pts):
    with pytest.raises(DegenerateGeometryError):
        HingeTriplet.from_landmarks(pts)


def test_ms_frame_is_similarity_invariant():
    pts = ms_cohort(1, noise=0.0)[0]
    u1, u2 = register_ms_pair(MsPair.from_landmarks(pts))
    c, s = math.cos(1.1), math.sin(1.1)
    moved = {k: 3.0 * np.array([[c, -s], [s, c]]) @ v + [10, -4] for k, v in pts.items()}
    v1, v2 = register_ms_pair(MsPair.from_landmarks(moved))
    np.testing.assert_allclose([u1, u2], [v1, v2], atol=1e-12)


def test_swaps_detected_exactly():
    swapped = {3, 17, 41}
    recs = [MsPair.from_landmarks(p) for p in ms_cohort(50, swapped, seed=2)]
    rep = detect_swaps([register_ms_pair(m) for m in recs], nominal_ms_direction())
    assert {i for i, f in enumerate(rep.flags) if f} == swapped
    assert not rep.ambiguous


def test_majority_swapped_cohort_is_ambiguous():
    recs = [MsPair.from_landmarks(p) for p in ms_cohort(20, set(range(12)), seed=1)]
    rep = detect_swaps([register_ms_pair(m) for m in recs], nominal_ms_direction())
    assert rep.ambiguous and "reference" in rep.note
    with pytest.raises(ValueError):
        detect_swaps([register_ms_pair(m) for m in recs[:3]])


def test_interobserver_closed_form_two_annotators():
    # with k = 2 each point sits exactly half the pair distance from the mean
    ann = {"s": {"a": {"P": [0.0, 0.0]}, "b": {"P": [3.0, 4.0]}}}
    st = interobserver_stats(ann)
    assert st.distances == [2.5, 2.5]
    assert expected_distance_from_mean(1.0, 2) == pytest.approx(math.sqrt(0.5) * math.sqrt(math.pi / 2))
    with pytest.raises(ValueError):
        interobserver_stats({"s": {"a": {"P": [0, 0]}}})


def test_expected_distance_dimensions_agree_with_general_formula():
    for dim in (2, 3):
        s = math.sqrt(1 - 1 / 5)
        general = s * math.sqrt(2.0) * math.exp(math.lgamma((dim + 1) / 2) - math.lgamma(dim / 2))
        assert expected_distance_from_mean(1.0, 5, dim) == pytest.approx(general, rel=1e-12)


def test_outliers_mad_rule():
    vals = np.array([1.0, 2, 3, 4, 5, 6, 7, 8, 9, 10, 100])
    rep = detect_outliers(vals)
    # median 6, MAD 3: z(100) = 0.6745 * 94 / 3
    assert rep.scores[-1] == pytest.approx(0.6745 * 94 / 3)
    assert rep.flags == [False] * 10 + [True]
    flat = detect_outliers([5.0] * 10 + [5.5])
    assert flat.fallback and flat.flags[-1] and not any(flat.flags[:-1])
    with pytest.raises(ValueError):
        detect_outliers([1.0, 2.0])


def _records(cohort, annotators=("a1",)):
    recs = []
    for i, pts in enumerate(cohort):
        for a in annotators:
            recs.append(LandmarkRecord(f"s{i:03d}", 1, a, pts))
    return recs


def test_report_schema_and_outputs(tmp_path):
    recs = _records(ms_cohort(30, {4}, seed=3), annotators=("a1", "a2"))
    report = build_qa_report(recs)
    assert validate_qa_report(report) == []
    assert report["swaps"]["flagged"] == ["s004", "s004"]
    assert report["interobserver"]["n"] > 0
    files = write_qa_outputs(report, tmp_path)
    assert [f.name for f in files] == ["qa_report.json", "qa_hinge.svg", "qa_ms.svg"]
    assert validate_qa_report(json.loads(files[0].read_text())) == []
    assert files[1].read_text().startswith("<svg")


def test_schema_rejects_image_like_payloads():
    report = build_qa_report(_records(ms_cohort(12, seed=4)))
    report["hinge"][0]["pixels"] = [0.0] * 64
    report["ms"][0]["u1"] = list(range(10))
    problems = validate_qa_report(report)
    assert any("unexpected keys" in p for p in problems) and any("array of length" in p for p in problems)


def test_load_records_from_shard_dir(tmp_path, small_shards):
    from fedkd.data import write_shard
    write_shard(small_shards[0], tmp_path / "client_01")
    recs = load_landmark_records(tmp_path)
    n = sum(len(small_shards[0].labeled[t]) + len(small_shards[0].test[t]) for t in small_shards[0].tasks()
            if t.is_landmark)
    assert len(recs) == n
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ValueError):
        load_landmark_records(tmp_path / "bad.json")
