import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from clog.domain import MetricDirection, TaskSpec
from clog.errors import InsufficientSamplesError, InvalidInputError, QualityError
from clog.metrics import (
    EvalReport,
    MetricMatrix,
    RandomConvEmbedder,
    afq,
    aggregate_orders,
    aiq,
    aq,
    fid,
    fid_from_stats,
    format_mean_std,
    fr,
    quality,
)

from oracles import afq_oracle, aiq_oracle, aq_oracle, fid_oracle, fr_oracle, gaussian_with_exact_stats


def random_rows(rng, T):
    return [list(rng.uniform(0, 200, size=t + 1)) for t in range(T)]


# -- aggregates ---------------------------------------------------------------------


def test_small_matrix_by_hand():
    m = MetricMatrix.from_rows([[10.0], [30.0, 20.0]])
    assert aq(m, 1) == 10.0
    assert aq(m, 2) == 25.0
    assert aiq(m) == 17.5
    assert afq(m) == 25.0
    assert fr(m) == 20.0


def test_fr_sign_follows_direction():
    rows = [[0.8], [0.5, 0.9]]
    assert fr(MetricMatrix.from_rows(rows, MetricDirection.HIGHER_BETTER)) == pytest.approx(0.3)
    assert fr(MetricMatrix.from_rows(rows, MetricDirection.LOWER_BETTER)) == pytest.approx(-0.3)


def test_fr_needs_two_tasks():
    m = MetricMatrix.from_rows([[3.0]])
    assert aiq(m) == afq(m) == 3.0
    with pytest.raises(InvalidInputError):
        fr(m)


@pytest.mark.parametrize("direction", list(MetricDirection))
def test_aggregates_match_oracle(direction):
    rng = np.random.default_rng(1)
    for _ in range(50):
        T = int(rng.integers(2, 8))
        rows = random_rows(rng, T)
        m = MetricMatrix.from_rows(rows, direction)
        for t in range(1, T + 1):
            assert abs(aq(m, t) - aq_oracle(rows, t)) <= 1e-12
        assert abs(aiq(m) - aiq_oracle(rows)) <= 1e-12
        assert abs(afq(m) - afq_oracle(rows)) <= 1e-12
        larger = direction is MetricDirection.HIGHER_BETTER
        assert abs(fr(m) - fr_oracle(rows, larger)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10_000))
def test_report_invariants(T, seed):
    rows = random_rows(np.random.default_rng(seed), T)
    report = EvalReport.from_matrix(MetricMatrix.from_rows(rows))
    assert report.afq == report.aq[-1]
    assert math.isclose(report.aiq, float(np.mean(report.aq)), rel_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.floats(0, 100))
def test_constant_diagonal_history_has_zero_forgetting(T, value):
    rows = [[value] * (t + 1) for t in range(T)]
    assert fr(MetricMatrix.from_rows(rows)) == 0.0


def test_na_poisons_aggregates():
    m = MetricMatrix.from_rows([[1.0], [None, 2.0]])
    assert m.na_mask.tolist() == [[False, False], [True, False]]
    assert math.isnan(afq(m))
    assert math.isnan(fr(m))
    assert not math.isnan(aq(m, 1))


def test_rows_must_be_filled_in_order():
    m = MetricMatrix(3)
    with pytest.raises(InvalidInputError):
        m.set_row(1, [1.0, 2.0])
    m.set_row(0, [1.0])
    with pytest.raises(InvalidInputError):
        m.set_row(1, [1.0])
    assert not m.complete


def test_matrix_json_round_trip():
    m = MetricMatrix.from_rows([[1.5], [None, 2.5], [3.0, 4.0, 5.0]], extractor_id="x")
    back = MetricMatrix.from_json(m.to_json())
    np.testing.assert_array_equal(back.na_mask, m.na_mask)
    np.testing.assert_array_equal(np.nan_to_num(back.values, nan=-1), np.nan_to_num(m.values, nan=-1))
    assert back.extractor_id == "x"


def test_aggregate_orders_mean_and_sample_std():
    reports = [
        EvalReport.from_matrix(MetricMatrix.from_rows([[v], [v + 2, v + 1]]), order_id=k)
        for k, v in [(1, 10.0), (2, 12.0), (3, 14.0)]
    ]
    agg = aggregate_orders(reports)
    mean, std = agg.mean_std["afq"]
    assert mean == pytest.approx(13.5)
    assert std == pytest.approx(2.0)
    assert sorted(agg.per_order) == [1, 2, 3]


def test_aggregate_single_order_has_zero_std():
    r = EvalReport.from_matrix(MetricMatrix.from_rows([[1.0], [2.0, 3.0]]), order_id=1)
    assert aggregate_orders([r]).mean_std["fr"] == (1.0, 0.0)


def test_format_mean_std():
    assert format_mean_std(115.6, 20.51) == "115.60$^{\\pm 20.51}$"
    assert format_mean_std(float("nan"), 0.0) == "NA"


def test_eval_report_json_round_trip():
    r = EvalReport.from_matrix(MetricMatrix.from_rows([[1.0], [2.0, 3.0]]), order_id=2)
    back = EvalReport.from_json(r.to_json())
    assert back.aq == r.aq and back.fr == r.fr and back.order_id == 2


# -- FID ---------------------------------------------------------------------------------


def test_fid_identical_sets_is_zero(rng):
    x = rng.standard_normal((300, 16))
    assert abs(fid(x, x)) <= 1e-6


def test_fid_mean_shift_closed_form(rng):
    cov = np.eye(4)
    a = gaussian_with_exact_stats(np.zeros(4), cov, 200, rng)
    b = gaussian_with_exact_stats(np.array([3.0, 0, 0, 0]), cov, 200, rng)
    assert fid(a, b) == pytest.approx(9.0, abs=1e-6)


def test_fid_commuting_covariances_closed_form(rng):
    # diag(1, 4) vs diag(4, 1): trace term 5 + 5 - 2 * (2 + 2) = 2
    a = gaussian_with_exact_stats(np.zeros(2), np.diag([1.0, 4.0]), 100, rng)
    b = gaussian_with_exact_stats(np.zeros(2), np.diag([4.0, 1.0]), 100, rng)
    assert fid(a, b) == pytest.approx(2.0, abs=1e-6)


def test_fid_matches_scipy_oracle(rng):
    a = rng.standard_normal((200, 8)) @ rng.standard_normal((8, 8))
    b = rng.standard_normal((150, 8)) + 0.5
    assert fid(a, b) == pytest.approx(fid_oracle(a, b), rel=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_fid_symmetric_and_nonnegative(seed, d):
    r = np.random.default_rng(seed)
    a = r.standard_normal((40, d))
    b = r.standard_normal((30, d)) * 2 + 1
    assert abs(fid(a, b) - fid(b, a)) <= 1e-8
    assert fid(a, b) >= -1e-8


def test_fid_scalar_gaussians():
    assert fid_from_stats(0.0, 1.0, 0.0, 4.0) == pytest.approx(1.0)


def test_fid_input_checks():
    with pytest.raises(InsufficientSamplesError):
        fid(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(InvalidInputError):
        fid(np.zeros((5, 3)), np.zeros((5, 2)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fid(np.random.default_rng(0).standard_normal((4, 8)), np.random.default_rng(1).standard_normal((4, 8)))
    assert any("singular" in str(w.message) for w in caught)


# -- feature extractor and quality ------------------------------------------------------------


def test_embedder_is_deterministic_and_frozen():
    a, b = RandomConvEmbedder(1, 16, seed=3), RandomConvEmbedder(1, 16, seed=3)
    x = torch.rand(5, 1, 8, 8)
    np.testing.assert_array_equal(a.embed(x), b.embed(x))
    assert a.embed(x).shape == (5, 16)
    assert not any(p.requires_grad for p in a.parameters())
    assert a.extractor_id == "randconv-c1-d16-s3"


class _ConstantModel:
    def __init__(self, value):
        self.value = value
        self.seen = []

    def sample(self, labels, generator, steps=None):
        self.seen.append(labels.clone())
        out = torch.rand((len(labels), 1, 8, 8), generator=generator) * 2 - 1
        return out if self.value is None else torch.full_like(out, self.value)


def test_quality_balances_classes_and_is_reproducible():
    ext = RandomConvEmbedder(1, 4, seed=0)
    ref = ext.embed(torch.rand(50, 1, 8, 8) * 2 - 1)
    model = _ConstantModel(None)
    task = TaskSpec(0, (2, 5))
    v1 = quality(model, task, ref, 40, ext, torch.Generator().manual_seed(1), batch_size=16)
    v2 = quality(model, task, ref, 40, ext, torch.Generator().manual_seed(1), batch_size=16)
    assert v1 == v2
    labels = torch.cat(model.seen[:3])
    assert (labels == 2).sum() == 20 and (labels == 5).sum() == 20


def test_quality_rejects_nan_samples():
    ext = RandomConvEmbedder(1, 4, seed=0)
    ref = ext.embed(torch.rand(20, 1, 8, 8))
    with pytest.raises(QualityError):
        quality(_ConstantModel(float("nan")), TaskSpec(0, (0,)), ref, 10, ext, torch.Generator())
