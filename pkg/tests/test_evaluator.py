"""Metrics against closed forms and a brute-force kernel oracle; the
comparison harness against its caching and failure-isolation contracts."""
import numpy as np
import pytest

from d2c.datagen import gen_gauss2d
from d2c.evaluator import (
    CacheStats, ComparisonConfig, ComparisonTable, frechet_distance,
    frechet_per_class, median_heuristic, mmd_rbf, run_comparison,
    variant_name,
)
from d2c.scorer import MCConfig
from d2c.selector import SelectionSpec
from d2c.trainer import TrainConfig


# ------------------------------------------------------------------- Fréchet

def test_frechet_matches_analytic_gaussians():
    # X ~ N(0, I), Y ~ N(mu, s^2 I): d^2 = ||mu||^2 + dim (s-1)^2
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20000, 4))
    y = rng.standard_normal((20000, 4)) * 0.8
    y[:, 0] += 1.5
    want = 1.5 ** 2 + 4 * (0.8 - 1.0) ** 2
    assert frechet_distance(x, y) == pytest.approx(want, rel=0.05)


def test_frechet_symmetric_and_zero_on_self():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((300, 5))
    y = rng.standard_normal((200, 5)) + 0.3
    assert abs(frechet_distance(x, y) - frechet_distance(y, x)) < 1e-8
    assert frechet_distance(x, x) < 1e-10


def test_frechet_rotation_invariant():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((500, 4)) @ np.diag([1.0, 2.0, 0.5, 1.5])
    y = rng.standard_normal((400, 4)) + 1.0
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert frechet_distance(x @ q, y @ q) == \
        pytest.approx(frechet_distance(x, y), abs=1e-6)


def test_frechet_shift_equals_squared_distance():
    # identical shapes, pure translation: d^2 == ||shift||^2 exactly
    rng = np.random.default_rng(3)
    x = rng.standard_normal((800, 3))
    shift = np.array([1.0, -2.0, 0.5])
    got = frechet_distance(x, x + shift)
    assert got == pytest.approx(float((shift ** 2).sum()), rel=1e-6)


def test_frechet_degenerate_covariance_is_stable():
    # rank-1 data must not produce NaN from negative eigenvalue roundoff
    t = np.linspace(0, 1, 50)[:, None]
    x = t * np.array([1.0, 2.0, 3.0])
    y = t * np.array([1.0, 2.0, 3.0]) + 0.1
    v = frechet_distance(x, y)
    assert np.isfinite(v) and v >= 0


def test_frechet_per_class_catches_label_swap():
    # class means swapped between the two samples: pooled mixture moments
    # coincide, so pooled distance is ~0 while per-class stays large
    rng = np.random.default_rng(7)
    a = rng.standard_normal((400, 3))
    b = rng.standard_normal((400, 3))
    mu = np.array([3.0, 0.0, 0.0])
    x = np.vstack([a + mu, b - mu])
    y = np.vstack([a - mu, b + mu])
    lab = np.repeat([0, 1], 400)
    pooled = frechet_distance(x, y)
    pc = frechet_per_class(x, lab, y, lab)
    assert pc > 4 * (mu ** 2).sum() * 0.8
    assert pooled < 0.1 * pc
    # oracle: plain mean of the two class-restricted distances
    want = np.mean([frechet_distance(x[:400], y[:400]),
                    frechet_distance(x[400:], y[400:])])
    assert pc == pytest.approx(float(want), rel=1e-12)


def test_frechet_per_class_label_mismatch():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((40, 3))
    y = rng.standard_normal((40, 3))
    with pytest.raises(ValueError, match="label sets"):
        frechet_per_class(x, np.repeat([0, 1], 20), y, np.repeat([0, 2], 20))


def test_frechet_input_validation():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError, match="dim\\+1"):
        frechet_distance(rng.standard_normal((4, 4)),
                         rng.standard_normal((50, 4)))
    with pytest.raises(ValueError, match="equal width"):
        frechet_distance(rng.standard_normal((50, 3)),
                         rng.standard_normal((50, 4)))
    bad = rng.standard_normal((50, 3))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        frechet_distance(bad, rng.standard_normal((50, 3)))


# ----------------------------------------------------------------------- MMD

def brute_mmd(x, y, sigma):
    g = 1.0 / (2.0 * sigma * sigma)

    def k(a, b):
        return np.exp(-g * float(((a - b) ** 2).sum()))
    m, n = len(x), len(y)
    sx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j)
    sy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j)
    sxy = sum(k(a, b) for a in x for b in y)
    return sx / (m * (m - 1)) + sy / (n * (n - 1)) - 2.0 * sxy / (m * n)


def test_mmd_matches_brute_force_oracle():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((12, 3))
    y = rng.standard_normal((9, 3)) + 0.4
    assert mmd_rbf(x, y, bandwidth=1.3) == \
        pytest.approx(brute_mmd(x, y, 1.3), abs=1e-12)


def test_mmd_frozen_regression_value():
    a = np.random.default_rng(7).standard_normal((40, 3))
    b = np.random.default_rng(8).standard_normal((40, 3)) + 0.5
    assert mmd_rbf(a, b) == pytest.approx(0.12059663519475783, abs=1e-12)
    assert median_heuristic(a, b) == pytest.approx(2.246615074083044,
                                                   abs=1e-12)


def test_mmd_small_on_shared_distribution_grows_with_shift():
    a = np.random.default_rng(10).standard_normal((60, 3))
    base = abs(mmd_rbf(a, np.random.default_rng(11).standard_normal((60, 3))))
    m1 = mmd_rbf(a, np.random.default_rng(11).standard_normal((60, 3)) + 1.0)
    m3 = mmd_rbf(a, np.random.default_rng(11).standard_normal((60, 3)) + 3.0)
    assert base < 0.05
    assert base < m1 < m3


def test_mmd_bandwidth_extremes_vanish():
    a = np.random.default_rng(12).standard_normal((30, 2))
    b = np.random.default_rng(13).standard_normal((30, 2)) + 2.0
    assert abs(mmd_rbf(a, b, bandwidth=1e9)) < 1e-9
    assert abs(mmd_rbf(a, b, bandwidth=1e-9)) < 1e-9
    mid = mmd_rbf(a, b)
    assert mid > 0.1


def test_mmd_validation():
    a = np.random.default_rng(14).standard_normal((5, 2))
    with pytest.raises(ValueError, match="2 rows"):
        mmd_rbf(a[:1], a)
    with pytest.raises(ValueError, match="bandwidth"):
        mmd_rbf(a, a, bandwidth=0.0)


def test_median_heuristic_scale_equivariant():
    a = np.random.default_rng(15).standard_normal((25, 3))
    b = np.random.default_rng(16).standard_normal((20, 3))
    assert median_heuristic(3 * a, 3 * b) == \
        pytest.approx(3 * median_heuristic(a, b), rel=1e-12)
    same = np.zeros((4, 2))
    assert median_heuristic(same, same) == 1.0   # all-zero distances fall back


# ------------------------------------------------------------------- harness

def micro_config(cache_dir=None, extra=()):
    variants = (SelectionSpec("interval", m=3, k=1),
                SelectionSpec("interval", m=3, k=2),
                SelectionSpec("interval", m=3, k=5),
                SelectionSpec("random", m=3, seed=0),
                SelectionSpec("max", m=3)) + tuple(extra)
    return ComparisonConfig(
        variants=variants, seeds=(0,), d_model=8, d_text=16, d_feat=8,
        B=2, h=2, ell=1, L=8,
        attach=__import__("d2c.attacher", fromlist=["AttachConfig"])
        .AttachConfig(L=8, d_text=16, d_feat=8, h=2),
        mc=MCConfig(S_t=2, S_eps=2, base_seed=0),
        ref_train=TrainConfig(steps=25, batch_size=12, lr=3e-3,
                              use_proj=False),
        cond_train=TrainConfig(steps=25, batch_size=6, lr=3e-3,
                               p_null=0.1, use_proj=True),
        n_eval_per_class=8, sample_steps=4,
        cache_dir=str(cache_dir) if cache_dir else None)


@pytest.fixture(scope="module")
def micro_dataset():
    return gen_gauss2d(C=2, n_per_class=24, clutter_max=2.0, seed=0, dim=4)


def test_comparison_grid_completes_with_failure_isolation(micro_dataset,
                                                          tmp_path):
    # one infeasible cell (k so large the class runs out) must fail alone
    cfg = micro_config(extra=(SelectionSpec("interval", m=3, k=9),))
    table, stats = run_comparison(micro_dataset, cfg)
    assert len(table.rows) == 6
    bad = [r for r in table.rows if r["error"]]
    assert len(bad) == 1 and bad[0]["variant"] == "interval-k9"
    assert "BudgetError" in bad[0]["error"]
    for r in table.ok_rows():
        assert np.isfinite(r["frechet"]) and r["frechet"] >= 0
        assert np.isfinite(r["frechet_pc"]) and r["frechet_pc"] >= 0
        assert np.isfinite(r["mmd"])
        assert r["n_condensed"] == 6
    assert stats.misses == 2 and stats.ref_hits == 0  # no cache dir -> all fresh


def test_comparison_cache_resumes_without_retraining(micro_dataset, tmp_path):
    cache = tmp_path / "cache"
    cfg = micro_config(cache_dir=cache)
    t1, s1 = run_comparison(micro_dataset, cfg)
    assert s1.ref_misses == 1 and s1.score_misses == 1
    t2, s2 = run_comparison(micro_dataset, cfg)
    assert s2.misses == 0 and s2.ref_hits == 1 and s2.score_hits == 1
    assert t1.rows == t2.rows         # cache round-trip is bit-faithful
    files = sorted(p.name for p in cache.iterdir())
    assert any(f.startswith("ref-") for f in files)
    assert any(f.startswith("scores-") for f in files)


def test_comparison_table_csv_and_plot_export(micro_dataset, tmp_path):
    cfg = micro_config(cache_dir=tmp_path / "cache")
    table, _ = run_comparison(micro_dataset, cfg)
    p = tmp_path / "grid.csv"
    table.to_csv(p)
    back = ComparisonTable.from_csv(p)
    assert back.rows == table.rows
    agg = table.by_variant("frechet")
    assert set(agg) == {"interval-k1", "interval-k2", "interval-k5",
                        "random", "max"}
    j = tmp_path / "plot.json"
    table.export_plot_data(j)
    import json
    payload = json.loads(j.read_text())
    assert payload["k_curve"]["k"] == [1, 2, 5]
    assert len(payload["k_curve"]["frechet_mean"]) == 3
    assert payload["variants"]["random"]["seeds"] == 1


def test_variant_names():
    assert variant_name(SelectionSpec("interval", m=5, k=3)) == "interval-k3"
    assert variant_name(SelectionSpec("herding", m=5)) == "herding"


def test_cache_stats_misses_property():
    s = CacheStats(ref_hits=1, ref_misses=2, score_hits=3, score_misses=4)
    assert s.misses == 6
