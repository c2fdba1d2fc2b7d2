import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkd import kernels
from fedkd.federation import (
    ClientUpdate, EmptySelectionError, InProcessTransport, LayoutMismatchError, ParticipationMatrix,
    QuarantineViolation, RoundConfig, TaskMetric, aggregate, evaluate, make_job, run_federated, run_rounds,
    select_participants, stream_rng, train_local, write_history_csv, HELDOUT_SPLIT, TRAIN_CLIENTS_SPLIT,
)
from fedkd.nn import LossConfig, ModelArch, Segment, ParamVector, init_params
from fedkd.tasks import FEDERATED_TASKS

from conftest import tiny_arch

HO, MS, CALC = FEDERATED_TASKS
LAYOUT = (Segment("backbone", "layer0", "weight", 0, 2, (2,)),)


def pv(values, layout=LAYOUT):
    return ParamVector(np.asarray(values, dtype=np.float32), layout)


def up(cid, values, n, r=0):
    layout = (Segment("backbone", "layer0", "weight", 0, len(values), (len(values),)),)
    return ClientUpdate(cid, r, pv(values, layout), n, 0.0)


def exact(a, b):
    # value equality; the accumulator starts at +0.0 so a column of -0.0 comes back as +0.0
    return np.array_equal(np.float32(a), np.float32(b))


def test_weighted_mean_example():
    out = aggregate([up(1, [2, 4], 1), up(2, [4, 8], 3)])
    np.testing.assert_array_equal(out.values, np.float32([3.5, 7.0]))


finite32 = st.floats(-1e3, 1e3, allow_nan=False, width=32)
vectors = st.integers(1, 6).flatmap(lambda k: st.lists(st.lists(finite32, min_size=4, max_size=4), min_size=k, max_size=k))


@settings(max_examples=60, deadline=None)
@given(vectors, st.data())
def test_aggregation_algebra(vals, data):
    n = data.draw(st.lists(st.integers(1, 500), min_size=len(vals), max_size=len(vals)))
    ups = [up(i + 1, v, k) for i, (v, k) in enumerate(zip(vals, n))]
    out = aggregate(ups)
    # identity on one client
    assert exact(aggregate(ups[:1]).values, vals[0])
    # permutation invariance, bitwise
    perm = data.draw(st.permutations(ups))
    assert aggregate(perm).values.tobytes() == out.values.tobytes()
    # scaling all weights by a power of two changes no bit
    assert aggregate([up(u.client_id, u.params.values, 4 * u.n_samples) for u in ups]).values.tobytes() == out.values.tobytes()
    # convex sandwich
    stack = np.float32(vals)
    assert np.all(out.values >= stack.min(axis=0)) and np.all(out.values <= stack.max(axis=0))
    # float64 accumulator against an exact rational oracle
    from fractions import Fraction
    acc = kernels.kahan_weighted_sum(stack, np.float64(n)) / float(sum(n))
    for j in range(4):
        ref = sum(Fraction(float(stack[i, j])) * n[i] for i in range(len(n))) / sum(n)
        assert abs(acc[j] - float(ref)) <= 1e-12 * max(1.0, abs(float(ref)))


@settings(max_examples=30, deadline=None)
@given(st.lists(finite32, min_size=3, max_size=3), st.integers(2, 8), st.integers(1, 100))
def test_mean_of_equals(v, k, n):
    out = aggregate([up(c, v, n + c) for c in range(1, k + 1)])
    assert exact(out.values, v)


def test_arbitrary_weight_scaling_within_tolerance():
    rng = np.random.default_rng(0)
    stack = rng.normal(size=(5, 50)).astype(np.float32)
    n = rng.integers(1, 90, 5).astype(np.float64)
    a = kernels.kahan_weighted_sum(stack, n) / n.sum()
    b = kernels.kahan_weighted_sum(stack, 3.0 * n) / (3.0 * n).sum()
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=0)


def test_aggregate_rejects_mismatch():
    with pytest.raises(LayoutMismatchError):
        aggregate([up(1, [1, 2], 1), up(2, [1, 2, 3], 1)])
    with pytest.raises(LayoutMismatchError):
        aggregate([up(1, [1, 2], 1, r=0), up(2, [1, 2], 1, r=1)])
    with pytest.raises(ValueError):
        aggregate([up(1, [1, 2], 0)])
    with pytest.raises(ValueError):
        aggregate([])


def test_selection_excludes_heldout_clients():
    m = ParticipationMatrix({1: [HO, MS], 2: [HO], 3: [CALC], 7: [HO, MS]}, {HO: {7}, MS: {7}, CALC: {3}})
    assert select_participants(HO, m) == [1, 2]
    assert select_participants(MS, m) == [1]
    with pytest.raises(EmptySelectionError):
        select_participants(CALC, m)


def test_metric_pooling_from_stats_matches_direct():
    a = [1.0, 2.0, 4.0]
    b = [3.0, 5.0]
    st_ = [[len(x), sum(x), sum(v * v for v in x)] for x in (a, b)]
    pooled = TaskMetric.from_stats(st_, "mm")
    direct = TaskMetric.from_values(a + b, "mm")
    assert pooled.mean == pytest.approx(direct.mean, abs=1e-15)
    assert pooled.std == pytest.approx(direct.std, abs=1e-12)
    assert np.isnan(TaskMetric.from_stats([[0, 0.0, 0.0]], "mm").mean)


def test_substreams_are_independent_of_call_order():
    a = stream_rng(0, "teacher", "HingeOstia", 3, 2).integers(1 << 30, size=4)
    stream_rng(0, "teacher", "HingeOstia", 1, 2).integers(1 << 30, size=100)
    b = stream_rng(0, "teacher", "HingeOstia", 3, 2).integers(1 << 30, size=4)
    c = stream_rng(0, "teacher", "HingeOstia", 3, 3).integers(1 << 30, size=4)
    assert list(a) == list(b) and list(a) != list(c)


QUICK = dict(n_rounds=2, local_epochs=1, batch_size=8)


def test_fedprox_zero_equals_fedavg(small_shards):
    arch = tiny_arch([HO])
    m = ParticipationMatrix.from_shards(small_shards)
    tp = InProcessTransport.from_shards(small_shards)
    a, _ = run_federated(HO, small_shards, m, RoundConfig(aggregation="fedprox", mu=0.0, **QUICK), arch,
                         transport=tp, evaluate_each_round=False)
    b, _ = run_federated(HO, small_shards, m, RoundConfig(aggregation="fedavg", mu=0.5, **QUICK), arch,
                         transport=tp, evaluate_each_round=False)
    c, _ = run_federated(HO, small_shards, m, RoundConfig(aggregation="fedprox", mu=0.5, **QUICK), arch,
                         transport=tp, evaluate_each_round=False)
    assert a == b
    assert a != c


def test_one_client_federation_equals_local(small_shards):
    arch = tiny_arch([CALC], taps=(0,))
    cfg = RoundConfig(**QUICK)
    loss = LossConfig(deep_supervision_weights=(0.5,))
    sh = small_shards[1]
    fed, _ = run_federated(CALC, small_shards, cfg=cfg, arch=arch, participants=[sh.client_id], loss_cfg=loss,
                           evaluate_each_round=False)
    loc = train_local(sh, CALC, cfg, arch, loss_cfg=loss)
    assert fed == loc


def test_runs_are_reproducible(small_shards):
    arch = tiny_arch([MS])
    cfg = RoundConfig(**QUICK)
    a, ha = run_federated(MS, small_shards, cfg=cfg, arch=arch)
    b, hb = run_federated(MS, small_shards, cfg=cfg, arch=arch)
    assert a == b and ha == hb
    assert {h.split for h in ha} == {TRAIN_CLIENTS_SPLIT, HELDOUT_SPLIT}
    assert [h.round for h in ha] == [1, 1, 2, 2]


def test_heldout_client_is_never_trained(small_shards):
    arch = tiny_arch([HO])
    tp = InProcessTransport.from_shards(small_shards)
    seen = []
    real = tp.execute

    def spy(job, params, clients):
        if job["job"] == "train":
            seen.extend(clients)
        return real(job, params, clients)

    tp.execute = spy
    run_federated(HO, small_shards, cfg=RoundConfig(**QUICK), arch=arch, transport=tp, evaluate_each_round=False)
    assert seen and not {6, 7} & set(seen)
    job = make_job("train", arch=arch, cfg=RoundConfig(**QUICK), task=HO)
    with pytest.raises(QuarantineViolation):
        run_rounds(tp, job, init_params(0, arch), [1, 6], 1, forbidden={6, 7})


def test_evaluation_on_perfect_mask_prediction(small_shards):
    # a model that outputs the target exactly should score Dice 100; use evaluate on a
    # hand-built head whose bias encodes a fixed mask for a single-sample set
    arch = ModelArch.for_tasks((16, 16), (1,), [CALC])
    sample = small_shards[1].test[CALC][0]
    p = init_params(0, arch)
    p.values[:] = 0
    p.view("head:Calcification", "out", "bias")[:] = np.where(sample.mask.ravel() > 0.5, 20.0, -20.0)
    m = evaluate(p, [sample], CALC, arch)
    assert m.mean == 100.0 and m.n == 1


def test_history_csv(tmp_path, small_shards):
    _, hist = run_federated(MS, small_shards, cfg=RoundConfig(n_rounds=1, local_epochs=1), arch=tiny_arch([MS]))
    write_history_csv(hist, tmp_path / "h.csv")
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert len(rows) == 2 and rows[0]["task"] == "MembranousSeptum"


def test_round_config_validation():
    with pytest.raises(ValueError):
        RoundConfig(aggregation="median")
    with pytest.raises(ValueError):
        RoundConfig(n_rounds=0)
    with pytest.raises(ValueError):
        RoundConfig(mu=-1)
