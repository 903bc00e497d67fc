"""Tests for the primal-dual training module.

Hand-computed oracles for the constraint estimates, annealing update, dual
ascent, and convergence metric; finite-difference checks for the Lagrangian
primal gradients; and small end-to-end loop contracts (determinism, fold
splitting, trivial runs).
"""

import copy

import numpy as np
import pytest

from robusthbf import duality as du
from robusthbf import neural as nn
from robusthbf import scenario as sc
from robusthbf import training as tr
from robusthbf import unrolled as un


def make_dataset(seed=0, n=12, n_users=2, gamma_db=(-8.0, -3.0),
                 groups=None):
    cfg = sc.GenConfig(m_x=2, m_y=2, n_users=n_users,
                       gamma_db_range=gamma_db, p_max_db=20.0,
                       mode="statistical",
                       groups=groups or [sc.GroupDef("g0", "none", 1.0)])
    rng = np.random.default_rng(seed)
    instances = []
    g_count = len(cfg.groups)
    k = 0
    while len(instances) < n:
        instances.append(sc.sample_scenario(cfg, rng, group_id=k % g_count))
        k += 1
    return sc.Dataset(config=cfg, instances=instances, seed=seed)


def small_cfg(**kw):
    base = dict(m_rf=2, n_layers=2, width=3, minibatch_size=4,
                max_steps=0, tau_val=2, seed=0, beta_m=5.0)
    base.update(kw)
    return tr.RunConfig(**base)


# ---------------------------------------------------------------------------
# Constraint estimates: hand values
# ---------------------------------------------------------------------------

def test_annealed_step_hand_values():
    assert tr.annealed_unit_step(0.0, 50.0) == pytest.approx(0.5)
    assert tr.annealed_unit_step(0.1, 50.0) == pytest.approx(
        1.0 / (1.0 + np.exp(-5.0)))


def test_constraint_annealed_sharp_limit_hand_value():
    # ratios 2.0, 2.0, 0.5 at huge beta: non-outage rate 2/3
    g = tr.constraint_annealed([2.0, 2.0, 0.5], p_out=0.1, beta_c=1e6)
    assert g == pytest.approx(1.0 - 0.1 - 2.0 / 3.0, abs=1e-9)


def test_constraint_annealed_symmetric_hand_value():
    # all ratios exactly at the boundary: sigmoid = 0.5
    g = tr.constraint_annealed([1.0, 1.0], p_out=0.1, beta_c=50.0)
    assert g == pytest.approx(1.0 - 0.1 - 0.5)


def test_update_beta_hand_value():
    # quantile of (r - 1) at P_out equal to -0.5 -> target 2;
    # beta <- 0.99 * 50 + 0.01 * 2 = 49.52
    ratios = np.array([0.5, 1.5])  # 10% quantile of (-0.5, 0.5) via min side
    b = tr.update_beta(50.0, [0.5] * 100, p_out=0.1, eta_c=0.01,
                       beta_bar=50.0)
    assert b == pytest.approx(49.52)
    del ratios


def test_update_beta_clips_at_beta_bar():
    # tiny quantile gap -> huge target, clipped to beta_bar
    b = tr.update_beta(50.0, [1.0 - 1e-9] * 10, p_out=0.1, eta_c=1.0,
                       beta_bar=50.0)
    assert b == pytest.approx(50.0)


def test_annealed_matches_hard_count_at_large_beta():
    rng = np.random.default_rng(3)
    ratios = rng.uniform(0.2, 3.0, size=500)
    hard = 1.0 - 0.1 - float(np.mean(ratios >= 1.0))
    soft = tr.constraint_annealed(ratios, 0.1, 1e6)
    assert abs(soft - hard) <= 1e-6


def test_quantile_with_weights_reconstructs_value():
    rng = np.random.default_rng(0)
    v = rng.normal(size=17)
    for level in (0.0, 0.25, 0.9, 1.0):
        val, w = tr.quantile_with_weights(v, level)
        assert val == pytest.approx(float(np.quantile(v, level)))
        assert float(w @ v) == pytest.approx(val)
        assert np.count_nonzero(w) <= 2


def test_constraint_quantile_hand_value():
    # gaps gamma - sinr = [-1, 1]; 90% quantile of sorted [-1, 1]
    g = tr.constraint_quantile(sinr_values=[2.0, 0.0], gammas=[1.0, 1.0],
                               p_out=0.1)
    assert g == pytest.approx(np.quantile([-1.0, 1.0], 0.9))


def test_dual_ascent_projection():
    lam = tr.dual_ascent([0.5, 0.0], [0.2, -1.0], 0.1)
    assert lam[0] == pytest.approx(0.52)
    assert lam[1] == 0.0
    lam = tr.dual_ascent([0.05], [-1.0], 0.1)
    assert lam[0] == 0.0


# ---------------------------------------------------------------------------
# Downlink SINR gradients
# ---------------------------------------------------------------------------

def _random_instance(seed, n_users=2):
    ds = make_dataset(seed=seed, n=1, n_users=n_users)
    return ds.instances[0]


def test_downlink_sinr_grads_match_evaluator():
    s = _random_instance(1)
    rng = np.random.default_rng(5)
    a = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    b = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    p = np.array([0.7, 1.3])
    sinr, _, _, _ = tr.downlink_sinr_grads(p, b, a, s.true_cov,
                                           np.zeros(2))
    ref = du.evaluate_downlink_sinr(p, b, a, s.true_cov)
    np.testing.assert_allclose(sinr, ref, rtol=1e-12)


def test_downlink_sinr_grads_fd():
    s = _random_instance(2)
    rng = np.random.default_rng(7)
    a = rng.normal(size=(4, 2)) + 1j * rng.normal(size=(4, 2))
    b = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    p = np.array([0.9, 1.1])
    u = rng.normal(size=2)

    def scalar(pv, bv, av):
        sv = du.evaluate_downlink_sinr(pv, bv, av, s.true_cov)
        return float(u @ sv)

    _, dp, db, da = tr.downlink_sinr_grads(p, b, a, s.true_cov, u)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (scalar(p + e, b, a) - scalar(p - e, b, a)) / (2 * h)
        assert fd == pytest.approx(dp[i], rel=1e-5, abs=1e-8)
    for idx in np.ndindex(b.shape):
        for part, mul in ((1.0, 1.0), (1j, 1.0)):
            bp, bm = b.copy(), b.copy()
            bp[idx] += h * part
            bm[idx] -= h * part
            fd = (scalar(p, bp, a) - scalar(p, bm, a)) / (2 * h)
            want = np.real(db[idx].conjugate() * part) * mul
            assert fd == pytest.approx(want, rel=1e-5, abs=1e-7)
    for idx in [(0, 0), (3, 1)]:
        for part in (1.0, 1j):
            ap, am = a.copy(), a.copy()
            ap[idx] += h * part
            am[idx] -= h * part
            fd = (scalar(p, b, ap) - scalar(p, b, am)) / (2 * h)
            want = np.real(da[idx].conjugate() * part)
            assert fd == pytest.approx(want, rel=1e-5, abs=1e-7)


# ---------------------------------------------------------------------------
# Lagrangian loss and its primal gradient
# ---------------------------------------------------------------------------

def _loss_setup(mode="annealed", seed=0):
    ds = make_dataset(seed=seed, n=4)
    # large beta_m keeps the straight-through softmin bias below the FD gate
    cfg = small_cfg(constraint_mode=mode, beta_m=1e3)
    cfg.codebook = sc.dft_codebook(2, 2)
    net_cfg, ucfg = tr.model_setup(cfg, ds.instances[0])
    params = nn.init_params(net_cfg, np.random.default_rng(cfg.seed))
    lambdas = {0: 0.7}
    beta_c = {0: 8.0}
    return ds, cfg, net_cfg, ucfg, params, lambdas, beta_c


@pytest.mark.parametrize("mode", ["annealed", "quantile"])
def test_lagrangian_primal_gradient_fd(mode):
    ds, cfg, net_cfg, ucfg, params, lambdas, beta_c = _loss_setup(mode)
    batch = ds.instances[:3]

    def run(pp):
        loss, _, _, _ = tr.lagrangian_loss(batch, pp, net_cfg, ucfg,
                                           lambdas, beta_c, cfg,
                                           training=False)
        return loss

    base = {k: v.copy() for k, v in params.items()}
    _, grads, _, diag = tr.lagrangian_loss(batch, params, net_cfg, ucfg,
                                           lambdas, beta_c, cfg,
                                           training=False)
    assert diag["infeasible"] == 0
    h = 1e-6
    num, ana = [], []
    rng = np.random.default_rng(11)
    for key in sorted(grads):
        g = np.atleast_1d(np.asarray(grads[key], dtype=float))
        flat = g.ravel()
        n_probe = min(4, flat.size)
        for j in rng.choice(flat.size, size=n_probe, replace=False):
            pert = {k: v.copy() for k, v in base.items()}
            arr = np.atleast_1d(pert[key]).ravel()
            arr[j] += h
            pert[key] = arr.reshape(np.shape(base[key]))
            lp = run(pert)
            arr2 = np.atleast_1d({k: v.copy() for k, v in base.items()}[key]
                                 ).ravel()
            pert2 = {k: v.copy() for k, v in base.items()}
            arr2[j] -= h
            pert2[key] = arr2.reshape(np.shape(base[key]))
            lm = run(pert2)
            num.append((lp - lm) / (2 * h))
            ana.append(flat[j])
    num, ana = np.asarray(num), np.asarray(ana)
    denom = max(np.linalg.norm(num), 1e-12)
    assert np.linalg.norm(num - ana) / denom <= 1e-3


def test_lagrangian_loss_zero_lambda_is_power(seed=0):
    ds, cfg, net_cfg, ucfg, params, _, beta_c = _loss_setup(seed=seed)
    batch = ds.instances[:3]
    loss, _, _, diag = tr.lagrangian_loss(batch, params, net_cfg, ucfg,
                                          {0: 0.0}, beta_c, cfg,
                                          training=False)
    assert loss == pytest.approx(diag["power"])


def test_lagrangian_loss_empty_batch_raises():
    ds, cfg, net_cfg, ucfg, params, lambdas, beta_c = _loss_setup()
    with pytest.raises(ValueError):
        tr.lagrangian_loss([], params, net_cfg, ucfg, lambdas, beta_c, cfg)


# ---------------------------------------------------------------------------
# Convergence metric
# ---------------------------------------------------------------------------

def test_convergence_metric_arithmetic():
    ds, cfg, net_cfg, ucfg, params, _, _ = _loss_setup()
    cfg.lambda_bar = 100.0
    val = ds.instances[:4]
    jcm, mean_power, per_group = tr.convergence_metric(val, params, net_cfg,
                                                       ucfg, cfg)
    n_i = len(val[0].sinr_targets)
    # recompute by hand from the forwards
    powers, sats = [], []
    for s in val:
        p, a, b, cache = un.forward(s, cfg.codebook, params, net_cfg, ucfg)
        powers.append(cache.solution.w @ p)
        sinr = du.evaluate_downlink_sinr(p, b, a, s.true_cov)
        sats.extend(sinr >= np.asarray(s.sinr_targets) * (1 - 1e-12))
    want_power = float(np.mean(powers))
    ghat = 1.0 - cfg.p_out - float(np.mean(sats))
    want = want_power / n_i + cfg.lambda_bar * max(ghat, 0.0)
    assert mean_power == pytest.approx(want_power)
    assert per_group[0] == pytest.approx(ghat)
    assert jcm == pytest.approx(want)


def test_hard_constraint_boundary_counts_satisfied():
    g = tr.hard_constraint([np.array([1.0, 2.0])], [np.array([1.0, 4.0])],
                           p_out=0.1)
    assert g == pytest.approx(1.0 - 0.1 - 0.5)


# ---------------------------------------------------------------------------
# Fold splitting and loop contracts
# ---------------------------------------------------------------------------

def test_split_fold_contiguous_disjoint():
    items = list(range(10))
    seen = []
    for fold in range(3):
        trn, val = tr.split_fold(items, fold, 3)
        assert sorted(trn + val) == items
        assert val == items[min(val):max(val) + 1]  # contiguous
        seen.extend(val)
    assert sorted(seen) == items


def test_stratified_batch_covers_groups():
    ds = make_dataset(seed=4, n=12, groups=[
        sc.GroupDef("a", "none", 1.0), sc.GroupDef("b", "none", 1.0)])
    by_group = {d: [s for s in ds.instances if s.group_id == d]
                for d in (0, 1)}
    rng = np.random.default_rng(0)
    batch = tr._stratified_batch(by_group, rng, 4)
    assert {s.group_id for s in batch} == {0, 1}


def test_train_zero_steps_returns_init():
    ds = make_dataset(seed=5, n=6)
    cfg = small_cfg(max_steps=0)
    state, history = tr.train(ds, fold=0, cfg=cfg, n_folds=3)
    assert history == []
    assert not state["diverged"]
    for k, v in state["params"].items():
        np.testing.assert_array_equal(v, state["best_params"][k])


def test_train_few_steps_runs_and_is_deterministic():
    ds = make_dataset(seed=6, n=8)
    cfg = small_cfg(max_steps=4, tau_val=2, minibatch_size=3)
    s1, h1 = tr.train(ds, fold=0, cfg=copy.copy(cfg), n_folds=4)
    s2, h2 = tr.train(ds, fold=0, cfg=copy.copy(cfg), n_folds=4)
    assert len(h1) == 4
    for k in s1["params"]:
        np.testing.assert_array_equal(s1["params"][k], s2["params"][k])
    assert h1[-1]["loss"] == h2[-1]["loss"]
    assert np.isfinite(h1[-1]["jcm"])
    assert s1["best_step"] in (2, 4)
    assert s1["lambdas"][0] >= 0.0
    assert 0.0 < s1["beta_c"][0] <= cfg.beta_c_bar


def test_train_divergence_guard(monkeypatch):
    ds = make_dataset(seed=7, n=8)
    cfg = small_cfg(max_steps=6, tau_val=1, minibatch_size=3,
                    divergence_factor=10.0)
    vals = iter([1.0, 0.9, 100.0, 100.0, 100.0, 100.0])

    def fake_metric(*a, **kw):
        return next(vals), 0.0, {0: 0.0}

    monkeypatch.setattr(tr, "convergence_metric", fake_metric)
    state, history = tr.train(ds, fold=0, cfg=cfg, n_folds=4)
    assert state["diverged"]
    assert len(history) == 3


def test_train_patience_stop(monkeypatch):
    ds = make_dataset(seed=8, n=8)
    cfg = small_cfg(max_steps=50, tau_val=1, minibatch_size=3,
                    tau_pat_1=2, tau_pat_2=4)
    vals = iter([1.0] + [2.0] * 100)  # never improves after step 1

    def fake_metric(*a, **kw):
        return next(vals), 0.0, {0: 0.0}

    monkeypatch.setattr(tr, "convergence_metric", fake_metric)
    state, history = tr.train(ds, fold=0, cfg=cfg, n_folds=4)
    assert state["decayed"]
    assert not state["diverged"]
    assert len(history) == 5  # best at 1, stop at 1 + tau_pat_2
    assert state["best_step"] == 1


def test_run_config_roundtrip(tmp_path):
    cfg = small_cfg(constraint_mode="quantile", dual_step_size=0.002)
    path = tmp_path / "run.json"
    cfg.save(path)
    back = tr.RunConfig.load(path)
    assert back == cfg
    assert back.adam_smoothing == (0.9, 0.99)


def test_history_to_csv(tmp_path):
    rows = [{"step": 1, "loss": 2.0, "jcm": np.nan},
            {"step": 2, "loss": 1.5, "jcm": 3.0}]
    path = tmp_path / "h.csv"
    tr.history_to_csv(rows, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "step,loss,jcm"
    assert lines[2].startswith("2,1.5,3.0")


def test_cross_validate_aggregates(monkeypatch):
    ds = make_dataset(seed=9, n=6)
    cfg = small_cfg(max_steps=0)

    results, agg = tr.cross_validate(ds, 3, cfg)
    assert len(results) == 3
    assert np.isinf(agg["jcm_mean"])  # no validation happened at 0 steps
    with pytest.raises(ValueError):
        tr.cross_validate(ds, 1, cfg)
