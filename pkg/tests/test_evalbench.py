import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cbdae.errors import ContractError
from cbdae.evalbench import (
    CLASSICAL,
    BenchCell,
    BenchConfig,
    BenchReport,
    latent_comparison,
    paper_reference,
    pca_project,
    rmse,
    run_benchmark,
    similar_trajectories,
    smoothness_score,
    trace_pair_distance,
    write_traces_csv,
)
from cbdae.model import CbdaeModel, ModelArch
from cbdae.quadtank import TankParams, generate_dataset

FAST = BenchConfig(windows=(3, 5, 7), particles=200)


@pytest.fixture(scope="module")
def datasets():
    return generate_dataset(TankParams(), [0.5, 2.0], 1500, seed=4)


def test_rmse_cases(rng):
    clean = rng.standard_normal((100, 4))
    assert rmse(clean, clean).average == 0.0
    assert rmse(clean, clean + 1.0).average == pytest.approx(1.0)
    res = rmse(clean, clean + [1.0, 2.0, 0.0, 3.0])
    np.testing.assert_allclose(res.per_channel, [1.0, 2.0, 0.0, 3.0])
    assert res.average == pytest.approx(1.5)


def test_rmse_of_white_noise_equals_sigma():
    rng = np.random.default_rng(8)
    clean = np.zeros((200000, 4))
    assert rmse(clean, clean + rng.standard_normal(clean.shape)).average == pytest.approx(1.0, abs=0.01)


def test_rmse_warmup_and_contract(rng):
    clean = np.zeros((10, 2))
    est = np.ones((10, 2))
    est[:3] = np.nan
    assert rmse(clean, est, warmup=3).average == 1.0
    with pytest.raises(ContractError):
        rmse(clean, est)
    with pytest.raises(ContractError):
        rmse(clean, est[:9], warmup=3)
    with pytest.raises(ContractError):
        rmse(clean, est, warmup=10)


def test_paper_reference_lookup():
    assert paper_reference("noisy", 0.5) == 2.165
    assert math.isnan(paper_reference("noisy", 0.7))
    assert math.isnan(paper_reference("identity", 1.0))


def test_benchmark_grid_is_exhaustive_and_deterministic(datasets):
    methods = list(CLASSICAL) + ["CBDAE"]
    a = run_benchmark(datasets, methods, FAST, seed=1)
    b = run_benchmark(datasets, methods, FAST, seed=1, jobs=3)
    pairs = [(c.method, c.sigma) for c in a.cells]
    assert len(pairs) == len(set(pairs)) == len(methods) * 2
    for ca, cb in zip(a.cells, b.cells):
        assert (ca.method, ca.sigma) == (cb.method, cb.sigma)
        assert ca.rmse == cb.rmse or (math.isnan(ca.rmse) and math.isnan(cb.rmse))
    for sigma in (0.5, 2.0):
        assert a.get("identity", sigma).rmse == a.get("noisy", sigma).rmse
        assert not a.get("CBDAE", sigma).present
        assert a.get("CBDAE", sigma).detail.startswith("absent")
        for m in CLASSICAL:
            assert a.get(m, sigma).present
    assert a.get("noisy", 0.5).paper_reference == 2.165


def test_filters_beat_the_noisy_input(datasets):
    rep = run_benchmark(datasets, ["noisy", "median", "kf"], FAST)
    for sigma in (0.5, 2.0):
        assert rep.get("median", sigma).rmse < rep.get("noisy", sigma).rmse


def test_models_are_scored_on_the_common_range(datasets):
    model = CbdaeModel.create(ModelArch(6, 8, (4,)), 0)
    rep = run_benchmark(datasets, ["noisy", "BDAE_NoReg"], FAST, models={("BDAE_NoReg", 0.5): model})
    assert rep.meta["warmup"] == 7
    assert rep.get("BDAE_NoReg", 0.5).present
    assert not rep.get("BDAE_NoReg", 2.0).present
    test = slice(*datasets[0.5].split_bounds()["test"])
    ds = datasets[0.5]
    assert rep.get("noisy", 0.5).rmse == rmse(ds.y[test], ds.y_noisy[test], 7).average


def test_unknown_method_is_rejected(datasets):
    with pytest.raises(ContractError):
        run_benchmark(datasets, ["wavelet"])


def test_report_csv_round_trip(tmp_path):
    rep = BenchReport([BenchCell("noisy", 0.5, 0.1 + 0.2, 2.165, 0.25), BenchCell("CBDAE", 0.5, math.nan, 0.313, 0.0)])
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "method,sigma,rmse,paper_reference,runtime_s"
    back = BenchReport.from_csv(tmp_path / "r.csv")
    assert back.get("noisy", 0.5).rmse == 0.1 + 0.2
    assert math.isnan(back.get("CBDAE", 0.5).rmse)
    assert "Original Noisy input" in rep.table()


def test_pca_of_a_line_has_one_direction(rng):
    t = rng.standard_normal(50)
    X = np.outer(t, [1.0, 2.0, -1.0]) + [3.0, 0.0, 1.0]
    with pytest.warns(RuntimeWarning):
        tr = pca_project(X)
    assert tr.components.shape == (1, 3)
    full = pca_project(X + 1e-3 * rng.standard_normal(X.shape))
    assert full.explained_variance[1] < 1e-5 * full.explained_variance[0]


def test_pca_isotropic_cloud_has_balanced_components():
    X = np.random.default_rng(3).standard_normal((20000, 4))
    tr = pca_project(X)
    assert tr.explained_variance[1] / tr.explained_variance[0] > 0.95


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), shift=st.floats(-1e3, 1e3))
def test_pca_is_translation_invariant_and_orthonormal(seed, shift):
    X = np.random.default_rng(seed).standard_normal((30, 5)) * [3, 2, 1, 0.5, 0.2]
    a, b = pca_project(X), pca_project(X + shift)
    np.testing.assert_allclose(a.projection, b.projection, atol=1e-8 * max(1.0, abs(shift)))
    np.testing.assert_allclose(a.components @ a.components.T, np.eye(2), atol=1e-10)


def test_pca_contract():
    with pytest.raises(ContractError):
        pca_project(np.zeros((1, 3)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert pca_project(np.zeros((4, 3))).components.shape == (0, 3)


def test_smoothness_of_a_line_is_zero():
    t = np.linspace(0, 1, 40)
    line = pca_project(np.column_stack([t, 2 * t + 1]), dims=1)
    assert smoothness_score(line) == pytest.approx(0.0, abs=1e-12)
    curve = pca_project(np.column_stack([np.cos(3 * t), np.sin(3 * t)]))
    assert smoothness_score(curve) > 0


def test_smoothness_of_white_noise_matches_theory():
    # second difference of iid unit normals has variance 6 per axis; its 2-D norm
    # has mean sqrt(6) sqrt(pi / 2); the RMS spread of the cloud is sqrt(2)
    X = np.random.default_rng(11).standard_normal((100000, 2))
    expected = math.sqrt(6.0) * math.sqrt(math.pi / 2) / math.sqrt(2.0)
    assert smoothness_score(pca_project(X)) == pytest.approx(expected, rel=0.01)


def test_trace_pair_distance(rng):
    A = rng.standard_normal((60, 4))
    assert trace_pair_distance(A, A) == 0.0
    near = trace_pair_distance(A, A + 0.01 * rng.standard_normal(A.shape))
    far = trace_pair_distance(A, rng.standard_normal(A.shape))
    assert near < 0.05 < far
    with pytest.raises(ContractError):
        trace_pair_distance(A, A[:10])


def test_similar_trajectories_share_schedule():
    (u1, y1, n1), (u2, y2, n2) = similar_trajectories(TankParams(), 500, 1.0, seed=0, offset=0.05)
    np.testing.assert_allclose(u2, np.clip(u1 + 0.05, 0, 1))
    assert np.all(y2[-100:] >= y1[-100:] - 1e-9)


def test_latent_comparison_exports_one_trace_per_run(tmp_path):
    model = CbdaeModel.create(ModelArch(6, 10, (5,), proj_dim=3), 0)
    runs = similar_trajectories(TankParams(), 300, 1.0)
    cmp = latent_comparison(model, runs, "CBDAE")
    assert [t.label for t in cmp.traces] == ["CBDAE/run1", "CBDAE/run2"]
    assert cmp.traces[0].projection.shape == (291, 2)
    np.testing.assert_array_equal(cmp.traces[0].components, cmp.traces[1].components)
    assert cmp.smoothness > 0 and cmp.pair_distance > 0
    write_traces_csv(tmp_path / "t.csv", cmp.traces)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t,pc1,pc2,label" and len(lines) == 1 + 2 * 291
