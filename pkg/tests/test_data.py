import hashlib
import json

import numpy as np
import pytest

from fedkd import data as D
from fedkd.data import (
    CohortSpec, InfeasibleCohortError, LandmarkOutOfExtentError, LandmarkSet, NormalizationSpec, Volume,
    extract_point, generate_cohort, normalize, rasterize_heatmap, read_cohort, read_shard, task_arrays,
    write_cohort, write_shard,
)
from fedkd.tasks import FEDERATED_TASKS, TaskKind

from conftest import small_spec


def test_normalization_reference_values():
    # (clip(x, -1024, 696) + 438.61) / 520.98 evaluated by hand
    out = normalize(np.array([0.0, 2000.0, -2000.0]))
    np.testing.assert_allclose(out, [438.61 / 520.98, 1134.61 / 520.98, -585.39 / 520.98], rtol=0, atol=1e-12)
    np.testing.assert_allclose(out, [0.84190, 2.17783, -1.12363], atol=1e-4)


def test_normalization_volume_and_guards():
    v = Volume(np.full((2, 2), 696.0, np.float32), (1.0, 1.0), 1, "s")
    nv = normalize(v)
    assert nv.grid.dtype == np.float32 and nv.sample_id == "s"
    assert nv.grid[0, 0] == pytest.approx(NormalizationSpec().output_range[1], rel=1e-6)
    with pytest.raises(ValueError):
        NormalizationSpec(clip_lo=5, clip_hi=5)
    with pytest.raises(ValueError):
        NormalizationSpec(sigma=0)


def test_heatmap_peak_and_decoding():
    lm = LandmarkSet({"A": (7.3, 12.1)})
    hm = rasterize_heatmap(lm, ((16, 16), (1.0, 1.0)), sigma_mm=1.5)
    assert hm.shape == (1, 16, 16) and hm.max() == pytest.approx(1.0)
    p = extract_point(hm[0], (1.0, 1.0)).point
    assert np.linalg.norm(p - [7.3, 12.1]) < 0.5
    am = extract_point(hm[0], (1.0, 1.0), mode="argmax").point
    np.testing.assert_array_equal(am, [7.5, 12.5])


def test_heatmap_rejects_outside_points():
    with pytest.raises(LandmarkOutOfExtentError):
        rasterize_heatmap(LandmarkSet({"A": (20.0, 1.0)}), ((16, 16), (1.0, 1.0)))


def test_constant_channel_decodes_to_centre():
    r = extract_point(np.zeros((4, 6)), (2.0, 1.0))
    assert r.degenerate
    np.testing.assert_array_equal(r.point, [4.0, 3.0])


def test_cohort_is_deterministic_and_seed_sensitive():
    a = generate_cohort(small_spec(seed=3))
    b = generate_cohort(small_spec(seed=3))
    c = generate_cohort(small_spec(seed=4))
    ga = a[0].unlabeled[0].grid
    assert ga.tobytes() == b[0].unlabeled[0].grid.tobytes()
    assert ga.tobytes() != c[0].unlabeled[0].grid.tobytes()


def test_default_participation_pattern(small_shards):
    ho, ms, ca = FEDERATED_TASKS
    have = {s.client_id: {t for t in FEDERATED_TASKS if s.labeled.get(t)} for s in small_shards}
    assert all(ho in v for v in have.values())
    assert have[2] == {ho, ca} and have[5] == {ho, ms}
    for s in small_shards:
        for t in s.tasks():
            n_train, n_test = len(s.labeled[t]), len(s.test[t])
            assert n_test == max(1, (n_train + n_test) // 5)
            ids = {x.volume.sample_id for x in s.labeled[t]} | {x.volume.sample_id for x in s.test[t]}
            assert len(ids) == n_train + n_test


def test_landmark_sets_match_task(small_shards):
    s = small_shards[0]
    assert set(s.labeled[TaskKind.HINGE_OSTIA][0].landmarks.points) == {"RCC", "LCC", "NCC", "RCO", "LCO"}
    assert {"MS1", "MS2"} <= set(s.labeled[TaskKind.MEMBRANOUS_SEPTUM][0].landmarks.points)


def test_task_arrays_shapes(small_shards):
    x, y = task_arrays(small_shards[1].labeled[TaskKind.CALCIFICATION], TaskKind.CALCIFICATION)
    assert x.shape[1:] == (16, 16) and y.shape[1:] == (1, 16, 16)
    assert set(np.unique(y)) <= {0.0, 1.0}


@pytest.mark.parametrize("kw", [
    dict(grid_shape=(8, 8)),
    dict(label_fraction={1: {"HingeOstia": 0.7, "Calcification": 0.5}}),
    dict(label_fraction={1: {"HingeOstia": 0.05}}),  # 3 labels cannot hold a test split
    dict(samples_per_client=(10, 10)),
    dict(label_fraction={9: {"HingeOstia": 0.5}}),
])
def test_infeasible_cohorts_are_rejected(kw):
    with pytest.raises(InfeasibleCohortError):
        CohortSpec(**kw)


def test_shard_round_trip(tmp_path, small_shards):
    sh = small_shards[2]
    back = read_shard(write_shard(sh, tmp_path / "c"))
    assert back.client_id == sh.client_id
    for t in sh.tasks():
        for a, b in zip(sh.labeled[t], back.labeled[t]):
            assert a.volume.sample_id == b.volume.sample_id
            assert a.volume.grid.tobytes() == b.volume.grid.tobytes()
            if a.landmarks:
                assert a.landmarks.points == b.landmarks.points
            else:
                assert a.mask.tobytes() == b.mask.tobytes()
        assert [x.volume.sample_id for x in sh.test[t]] == [x.volume.sample_id for x in back.test[t]]
    assert len(back.unlabeled) == len(sh.unlabeled)


def test_cohort_checksums(tmp_path, small_shards):
    spec = small_spec()
    sums = write_cohort(small_shards, tmp_path, spec)
    listed = json.loads((tmp_path / "checksums.json").read_text())
    assert listed == sums
    for rel, digest in list(sums.items())[:20]:
        assert hashlib.sha256((tmp_path / rel).read_bytes()).hexdigest() == digest
    assert json.loads((tmp_path / "cohort.json").read_text())["seed"] == spec.seed
    assert [s.client_id for s in read_cohort(tmp_path)] == list(range(1, 9))


def test_nominal_layout_has_hinges_on_unit_circle():
    pts = D.nominal_landmarks(2.0)
    for name in ("RCC", "LCC", "NCC"):
        assert np.linalg.norm(pts[name]) == pytest.approx(2.0)
