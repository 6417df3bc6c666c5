import csv

import numpy as np
import pytest

from fnonewton import gridsearch
from fnonewton.datagen import build_dataset
from fnonewton.discretization import residual
from fnonewton.fno import FnoConfig, FnoModel
from fnonewton.gridsearch import (
    DEFAULT_GRID, REFERENCE_BEST, HyperGrid, ScoreRecord, grid_search, iteration_ratio, naive_guess,
    score_iterations, score_losses, write_results,
)
from fnonewton.jfnk import NewtonConfig


@pytest.fixture
def val():
    return build_dataset(4, 2.0, [24, 32], 3, seed=5, split="validation")


def patch_forward(monkeypatch, fn):
    monkeypatch.setattr(gridsearch, "forward", lambda model, x: fn(x))


def exact_lookup(ds):
    table = {s.spec.inputs().tobytes(): s.u for s in ds.samples}

    def fn(x):
        x = np.asarray(x)
        if x.ndim == 2:
            return table[x.tobytes()].copy()
        return np.stack([table[xi.tobytes()] for xi in x])
    return fn


def test_grid_defaults_and_validation():
    g = HyperGrid()
    assert len(g) == 3 * 3 * 4 * 3 * 4 * 4 * 4 == 6912
    assert g.ell0 == DEFAULT_GRID["ell0"]
    assert REFERENCE_BEST == {"ell0": 1e-3, "gamma": 0.99, "batch_size": 64, "omega": 0.5,
                              "n_layers": 4, "modes": 30, "n_p": 30}
    for bad in (dict(ell0=[]), dict(n_layers=[0]), dict(modes=[2.5]), dict(gamma=[1.2]), dict(omega=[-0.1]),
                dict(ell0=[0.0])):
        with pytest.raises(ValueError):
            HyperGrid(**bad)
    assert HyperGrid(n_p=8).n_p == [8]


def test_points_are_lexicographic():
    g = HyperGrid(ell0=[1, 2], gamma=[0.5], batch_size=[1], omega=[0, 1], n_layers=[1], modes=[1], n_p=[1])
    pts = list(g.points())
    assert [(p["ell0"], p["omega"]) for p in pts] == [(1, 0), (1, 1), (2, 0), (2, 1)]


def test_score_losses_exact_model(monkeypatch, val):
    patch_forward(monkeypatch, exact_lookup(val))
    s_data, s_dis, per = score_losses(None, val)
    assert s_data == 0.0 and s_dis == 0.0
    assert set(per) == {24, 32}


def test_score_losses_unit_error(monkeypatch):
    ds = build_dataset(4, 2.0, [100], 1, seed=0)
    look = exact_lookup(ds)
    patch_forward(monkeypatch, lambda x: look(x) + 1.0)
    assert score_losses(None, ds)[0] == 100.0


def test_score_dis_matches_loop(monkeypatch, val):
    rng = np.random.default_rng(0)
    noise = {s.spec.inputs().tobytes(): rng.normal(size=s.u.shape) for s in val.samples}

    def fn(x):
        return np.stack([noise[xi.tobytes()] for xi in x])
    patch_forward(monkeypatch, fn)
    _, s_dis, _ = score_losses(None, val)
    # same accumulation order: subtotal per resolution, then the sum
    ref = 0.0
    for n in val.resolutions:
        sub = 0.0
        for s in val.by_resolution(n):
            r = residual(noise[s.spec.inputs().tobytes()], s.spec)
            sub += float(np.sum(r * r))
        ref += sub
    assert s_dis == ref


def test_score_losses_monotone(monkeypatch, val):
    look = exact_lookup(val)
    patch_forward(monkeypatch, lambda x: look(x) + 0.2)
    big = score_losses(None, val)[0]
    patch_forward(monkeypatch, lambda x: look(x) + 0.1)
    assert score_losses(None, val)[0] < big


def test_empty_validation():
    ds = build_dataset(4, 2.0, [24], 1)
    ds.samples.clear()
    with pytest.raises(ValueError):
        score_losses(None, ds)


def test_iteration_ratio_examples():
    assert np.mean([iteration_ratio(100, 50), iteration_ratio(200, 50)]) == 3.0
    assert iteration_ratio(2000, 20) == 100.0
    assert iteration_ratio(7, 0) == 7.0
    assert iteration_ratio(5, 5) == 1.0


def test_score_iterations_equal_guesses(monkeypatch):
    ds = build_dataset(4, 2.0, [40], 2, seed=1, split="test")
    patch_forward(monkeypatch, lambda x: naive_guess(ds.samples[0].spec.grid))
    s, pairs = score_iterations(None, ds.samples)
    assert s == 1.0
    assert all(a == b for a, b in pairs)
    with pytest.raises(ValueError):
        score_iterations(None, [])


def test_score_iterations_exact_guess_and_cap(monkeypatch):
    ds = build_dataset(4, 2.0, [60], 2, seed=1, split="test")
    patch_forward(monkeypatch, exact_lookup(ds))
    cfg = NewtonConfig(max_iter=5)
    s, pairs = score_iterations(None, ds.samples, cfg)
    for kn, km in pairs:
        assert km == 0 and kn <= 5
    assert s == np.mean([kn for kn, _ in pairs])
    ratios = [iteration_ratio(a, b) for a, b in pairs]
    assert min(ratios) <= s <= max(ratios) <= cfg.max_iter


def test_ranking_key():
    a = ScoreRecord({"x": 1}, s_data=5.0, s_iter=3.0, index=1)
    b = ScoreRecord({"x": 2}, s_data=1.0, s_iter=2.0, index=0)
    c = ScoreRecord({"x": 3}, s_data=0.5, s_iter=3.0, index=2)
    assert sorted([a, b, c], key=ScoreRecord.sort_key) == [c, a, b]
    d = ScoreRecord({"x": 4}, s_data=0.1, index=3)
    assert sorted([d, b], key=ScoreRecord.sort_key)[0] is b


def tiny_grid(**kw):
    base = dict(ell0=[1e-2], gamma=[0.99], batch_size=[4], omega=[1.0], n_layers=[1], modes=[3], n_p=[4])
    base.update(kw)
    return HyperGrid(**base)


def test_grid_search_single_point_and_determinism(tmp_path):
    tr = build_dataset(4, 2.0, [24], 8, seed=0)
    va = build_dataset(4, 2.0, [24], 2, seed=0, split="validation")
    runs = [grid_search(tiny_grid(n_p=[4, 6]), tr, va, epochs=2, seed=3, iter_problems=1) for _ in range(2)]
    (r1, best1), (r2, best2) = runs
    assert best1 == best2 and len(r1) == 2
    for a, b in zip(r1, r2):
        assert (a.mu, a.s_data, a.s_dis, a.s_iter) == (b.mu, b.s_data, b.s_dis, b.s_iter)
        assert a.s_iter is not None and np.isfinite(a.s_data) and a.s_dis >= 0
    ranked, best = grid_search(tiny_grid(), tr, va, epochs=1, scores=("data",))
    assert best == next(tiny_grid().points()) and ranked[0].s_iter is None and ranked[0].s_dis is None
    write_results(r1, tmp_path / "res.csv")
    rows = list(csv.DictReader(open(tmp_path / "res.csv")))
    assert [int(r["index"]) for r in rows] == [0, 1]
    assert float(rows[0]["s_data"]) == [r for r in r1 if r.index == 0][0].s_data


def test_grid_search_budget_and_errors():
    tr = build_dataset(4, 2.0, [24], 4, seed=0)
    va = build_dataset(4, 2.0, [24], 1, seed=0, split="validation")
    ranked, _ = grid_search(tiny_grid(n_p=[2, 3, 4]), tr, va, budget=2, epochs=1, scores=("data",))
    assert sorted(r.index for r in ranked) == [0, 1]
    with pytest.raises(ValueError):
        grid_search(tiny_grid(), tr, va, budget=0)
    with pytest.raises(ValueError):
        grid_search(tiny_grid(), tr, va, scores=("speed",))


def test_grid_search_modes_too_large():
    tr = build_dataset(4, 2.0, [12], 4, seed=0)
    with pytest.raises(ValueError):
        grid_search(tiny_grid(modes=[20]), tr, tr, epochs=1, scores=("data",))


def test_model_init_uses_grid_point():
    cfg = FnoConfig(n_p=5, n_layers=2, modes=3)
    assert FnoModel.init(cfg, np.random.default_rng(0)).params["R1"].shape == (3, 5, 5)
