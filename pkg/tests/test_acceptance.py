"""Acceptance suite. One test per criterion; each prints a single
PASS-style summary line with its pinned tolerance when it succeeds.

Criteria 8-10 are scaled end-to-end runs (dataset generation, margin
bisection, constrained training) and dominate the runtime.
"""

import time

import numpy as np
import pytest

from robusthbf import bench
from robusthbf import duality as du
from robusthbf import implicit_grad as ig
from robusthbf import neural as nn
from robusthbf import scenario as sc
from robusthbf import training as tr
from robusthbf import unrolled as un

from helpers import draw_feasible, perturbed_psi


def _report(line):
    print(f"\n[ACCEPT] {line}")


def _weighted_power(b, psi, p):
    w = np.array([float(np.real(b[i].conj() @ psi.weight[i] @ b[i]))
                  for i in range(psi.n_users)])
    return float(w @ p)


def _draw_solved(n_users, m_rf, rng, min_pivot=0.0):
    while True:
        psi, gamma, res = draw_feasible(n_users, m_rf, rng,
                                        make_psi=perturbed_psi)
        p, ok = du.recover_downlink_power(res.b, psi, gamma)
        if ok and np.min(np.abs(res.b[:, -1])) >= min_pivot:
            return psi, gamma, res, p


def test_criterion_01_duality_gap():
    rng = np.random.default_rng(101)
    combos = [(i, m) for i in (1, 2, 3) for m in (2, 3, 5)]
    n_total, worst = 0, 0.0
    for n_users, m_rf in combos:
        for _ in range(112):
            psi, gamma, res, p = _draw_solved(n_users, m_rf, rng)
            down = _weighted_power(res.b, psi, p)
            up = float(np.sum(res.q))
            gap = abs(down - up) / (1.0 + up)
            worst = max(worst, gap)
            assert gap <= 1e-6
            n_total += 1
    assert n_total >= 1000
    _report(f"criterion 1 PASS: duality gap <= 1e-6 on {n_total} instances "
            f"(worst {worst:.2e})")


def test_criterion_02_kkt_suite():
    rng = np.random.default_rng(102)
    worst_res, worst_psd = 0.0, 0.0
    n = 0
    for n_users, m_rf in [(1, 2), (2, 2), (2, 3), (3, 3), (3, 5)]:
        for _ in range(40):
            psi, gamma, res, p = _draw_solved(n_users, m_rf, rng,
                                              min_pivot=0.02)
            zeta = ig.solution_to_zeta(res.b, res.q, p)
            r = float(np.max(np.abs(ig.snle_residual(zeta, psi, gamma))))
            worst_res = max(worst_res, r)
            assert r <= 1e-7
            for i in range(n_users):
                lam = ig.lambda_matrix(res.q, psi, gamma, i)
                tr_l = float(np.real(np.trace(lam)))
                ev = float(np.min(np.linalg.eigvalsh(lam)))
                worst_psd = max(worst_psd, -ev / max(tr_l, 1e-30))
                assert ev >= -1e-8 * tr_l
                assert np.max(np.abs(lam @ res.b[i])) <= 1e-7 * max(tr_l, 1.0)
            n += 1
    _report(f"criterion 2 PASS: SNLE residual <= 1e-7 "
            f"(worst {worst_res:.2e}), Lambda PSD within -1e-8*trace "
            f"(worst {worst_psd:.2e}), Lambda b = 0, on {n} optima")


def _resolve_output(psi, gamma):
    res = du.uplink_fixed_point(psi, gamma, tol=1e-10, power_cap=1e8)
    p, _ = du.recover_downlink_power(res.b, psi, gamma)
    return ig.normalized_output(ig.solution_to_zeta(res.b, res.q, p),
                                psi.n_users, psi.m_rf)


def test_criterion_03_implicit_gradient_oracle():
    rng = np.random.default_rng(103)
    step = 1e-6
    n, worst = 0, 0.0
    for n_users, m_rf in [(2, 2), (2, 3), (3, 2), (3, 3)]:
        basis = ig._coordinate_basis(m_rf)
        for _ in range(25):
            psi, gamma, res, p = _draw_solved(n_users, m_rf, rng,
                                              min_pivot=0.05)
            zeta = ig.solution_to_zeta(res.b, res.q, p)
            u = rng.standard_normal(len(zeta))
            grads, flag = ig.implicit_vjp(u, zeta, psi, gamma)
            assert not flag
            ana, fd = [], []
            for pr in ig.all_pairs(n_users):
                for c, e_mat in enumerate(basis):
                    yp = _resolve_output(
                        ig.perturb_pair(psi, pr, step * e_mat), gamma)
                    ym = _resolve_output(
                        ig.perturb_pair(psi, pr, -step * e_mat), gamma)
                    fd.append(u @ (yp - ym) / (2 * step))
                    ana.append(grads[pr][c])
            ana, fd = np.array(ana), np.array(fd)
            rel = np.linalg.norm(ana - fd) / max(np.linalg.norm(fd), 1e-9)
            worst = max(worst, rel)
            assert rel <= 1e-4
            n += 1
    assert n >= 100
    _report(f"criterion 3 PASS: implicit VJP vs finite differences "
            f"rel err <= 1e-4 on {n} instances (worst {worst:.2e})")


def test_criterion_04_jacobian_nonsingularity():
    rng = np.random.default_rng(104)
    conds = []
    for n_users, m_rf in [(1, 2), (2, 2), (2, 3), (3, 3)]:
        for _ in range(250):
            psi, gamma, res, p = _draw_solved(n_users, m_rf, rng)
            zeta = ig.solution_to_zeta(res.b, res.q, p)
            conds.append(float(np.linalg.cond(ig.jac_zeta(zeta, psi, gamma))))
    conds = np.array(conds)
    frac = float(np.mean(conds < 1e10))
    assert len(conds) >= 1000
    assert frac >= 0.99
    _report(f"criterion 4 PASS: cond(J) < 1e10 on {100 * frac:.1f}% of "
            f"{len(conds)} instances (median {np.median(conds):.2e})")


def test_criterion_05_greedy_monotone_and_reduction():
    cfg = sc.GenConfig(m_x=2, m_y=2, n_users=2, gamma_db_range=(-8.0, -3.0),
                       p_max_db=20.0, mode="statistical")
    rng = np.random.default_rng(105)
    codebook = sc.dft_codebook(2, 2)
    net_cfg = nn.GcnnConfig(f_in=4, dims=[3, 4], filter_degree=1)
    params = nn.init_params(net_cfg, rng)
    ucfg = un.UnrolledConfig(m_rf=2, l_rf=4)
    n = 0
    for _ in range(40):
        s = sc.sample_scenario(cfg, rng)
        sol = du.greedy_pipeline_plain(s.est_cov, s.sinr_targets, codebook,
                                       2, p_max=s.p_max, record=True)
        trace = np.asarray(sol.power_trace)
        assert np.all(np.diff(trace) <= 1e-9 * (1.0 + np.abs(trace[:-1])))
        if not sol.feasible:
            continue
        z_id = du.identity_augmentation(2)
        p, a, b, cache = un.forward(s, codebook, params, net_cfg, ucfg,
                                    z_override=z_id)
        assert np.array_equal(p, sol.p)
        assert np.array_equal(b, sol.b)
        assert np.array_equal(cache.solution.analog.indices,
                              sol.analog.indices)
        n += 1
    assert n >= 20
    _report(f"criterion 5 PASS: greedy power trace non-increasing; identity "
            f"augmentation reproduces the plain pipeline bit-for-bit "
            f"({n} instances)")


def _feasible_scenario(rng_seed, gamma_db=(-8.0, -3.0)):
    cfg = sc.GenConfig(m_x=2, m_y=2, n_users=2, gamma_db_range=gamma_db,
                       p_max_db=20.0, mode="statistical")
    rng = np.random.default_rng(rng_seed)
    return sc.sample_scenario(cfg, rng)


def test_criterion_06_end_to_end_gradient():
    codebook = sc.dft_codebook(2, 2)
    net_cfg = nn.GcnnConfig(f_in=4, dims=[3, 4], filter_degree=1)
    # large softmin sharpness keeps the straight-through selection estimator
    # within the finite-difference gate at argmin-stable points
    ucfg = un.UnrolledConfig(m_rf=2, l_rf=4, beta_m=1e3)
    rng = np.random.default_rng(106)
    checked = 0
    seed = 0
    while checked < 2 and seed < 200:
        seed += 1
        s = _feasible_scenario(seed)
        params = nn.init_params(net_cfg, np.random.default_rng(seed))
        p0, a0, b0, cache = un.forward(s, codebook, params, net_cfg, ucfg)
        if not cache.solution.feasible:
            continue
        vp = rng.standard_normal(2)
        hs = [rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
              for _ in range(2)]
        hs = [0.5 * (h + h.conj().T) for h in hs]

        def loss(pp):
            p, a, b, c2 = un.forward(s, codebook, pp, net_cfg, ucfg)
            if not c2.solution.feasible:
                return None, None
            val = float(vp @ p)
            val += sum(float(np.real(b[i].conj() @ hs[i] @ b[i]))
                       for i in range(2))
            return val, tuple(c2.solution.analog.indices)

        base_val, base_idx = loss(params)
        d_beams = np.stack([2.0 * hs[i] @ b0[i] for i in range(2)])
        grads, info = un.backward(cache, vp, d_beams=d_beams)
        assert not info["infeasible"]
        h = 1e-6
        num, ana = [], []
        stable = True
        for key in sorted(grads):
            flat = np.asarray(grads[key], dtype=float).ravel()
            idxs = rng.choice(flat.size, size=min(6, flat.size),
                              replace=False)
            for j in idxs:
                def perturbed(delta):
                    pp = {k: v.copy() for k, v in params.items()}
                    arr = pp[key].ravel()
                    arr[j] += delta
                    return pp
                lp, ip = loss(perturbed(h))
                lm, im = loss(perturbed(-h))
                if lp is None or lm is None or ip != base_idx \
                        or im != base_idx:
                    stable = False
                    break
                num.append((lp - lm) / (2 * h))
                ana.append(flat[j])
            if not stable:
                break
        if not stable:
            continue
        num, ana = np.array(num), np.array(ana)
        rel = np.linalg.norm(num - ana) / max(np.linalg.norm(num), 1e-9)
        assert rel <= 1e-3
        checked += 1
    assert checked == 2
    _report("criterion 6 PASS: end-to-end backward matches finite "
            "differences (rel err <= 1e-3) on 2 argmin-stable instances")


def test_criterion_07_gcnn_fd_and_equivariance():
    rng = np.random.default_rng(107)
    config = nn.GcnnConfig(f_in=3, dims=[5, 4], filter_degree=1)
    params = nn.init_params(config, rng)
    n_i = 4
    z0 = rng.normal(size=(n_i, 3))
    shift = rng.uniform(0.0, 1.0, size=(n_i, n_i))
    shift = 0.5 * (shift + shift.T)
    np.fill_diagonal(shift, 0.0)
    upstream = rng.normal(size=(n_i, 4))

    out, cache = nn.gcnn_forward(z0, shift, params, config, training=False)
    grads, dz0 = nn.gcnn_backward(cache, upstream)
    h = 1e-6
    num, ana = [], []
    for key in sorted(grads):
        flat = np.asarray(grads[key], dtype=float).ravel()
        for j in range(flat.size):
            pp = {k: v.copy() for k, v in params.items()}
            pp[key].ravel()[j] += h
            yp = nn.gcnn_forward(z0, shift, pp, config)[0]
            pp[key].ravel()[j] -= 2 * h
            ym = nn.gcnn_forward(z0, shift, pp, config)[0]
            num.append(float(np.sum(upstream * (yp - ym)) / (2 * h)))
            ana.append(flat[j])
    num, ana = np.array(num), np.array(ana)
    rel = np.linalg.norm(num - ana) / max(np.linalg.norm(num), 1e-12)
    assert rel <= 1e-5

    perm = rng.permutation(n_i)
    out_p = nn.gcnn_forward(z0[perm], shift[np.ix_(perm, perm)], params,
                            config, training=True)[0]
    out_t = nn.gcnn_forward(z0, shift, params, config, training=True)[0]
    assert np.array_equal(out_p, out_t[perm])
    _report(f"criterion 7 PASS: GCNN backward FD rel err {rel:.2e} <= 1e-5; "
            f"permutation equivariance exact (bit-for-bit)")


def test_criterion_11_constraint_machinery():
    rng = np.random.default_rng(111)
    # annealed estimate converges to the hard count (ratios away from 1)
    ratios = np.concatenate([rng.uniform(0.2, 0.9, 300),
                             rng.uniform(1.1, 3.0, 700)])
    hard = 1.0 - 0.1 - float(np.mean(ratios >= 1.0))
    soft = tr.constraint_annealed(ratios, 0.1, 1e6)
    assert abs(soft - hard) <= 1e-6
    # annealing update hand value
    beta = tr.update_beta(50.0, [0.5] * 100, p_out=0.1, eta_c=0.01,
                          beta_bar=50.0)
    assert beta == pytest.approx(49.52, abs=1e-9)
    # projection always feasible
    for _ in range(200):
        n = rng.integers(1, 5)
        p = rng.uniform(0.0, 10.0, n)
        w = rng.uniform(0.1, 3.0, n)
        p_max = rng.uniform(0.5, 5.0)
        p_proj = du.project_power(p, w, p_max)
        assert np.all(p_proj >= 0.0)
        assert float(w @ p_proj) <= p_max * (1 + 1e-12)
    _report("criterion 11 PASS: annealed -> hard count at beta=1e6 "
            "(<= 1e-6); update_beta hand value 49.52; projection always "
            "satisfies w^T p <= P_max, p >= 0")


def test_criterion_12_softmin_limit():
    rng = np.random.default_rng(112)
    for _ in range(100):
        n = rng.integers(2, 8)
        scores = rng.uniform(1.0, 10.0, n)
        if np.min(np.diff(np.sort(scores))) < 0.05:
            continue
        w = un.softmin_weights(scores, 1e3)
        onehot = np.zeros(n)
        onehot[np.argmin(scores)] = 1.0
        assert np.max(np.abs(w - onehot)) <= 1e-6
        # scale invariance of finite norms
        w2 = un.softmin_weights(scores * 7.3, 1e3)
        np.testing.assert_allclose(w, w2, atol=1e-12)
        scores_inf = np.concatenate([scores, [np.inf]])
        w3 = un.softmin_weights(scores_inf, 1e3)
        assert w3[-1] == 0.0
    _report("criterion 12 PASS: softmin at beta_M = 1e3 is one-hot "
            "(<= 1e-6) and invariant to uniform scaling")


# ---------------------------------------------------------------------------
# Scaled end-to-end criteria (8-10). These generate data and train models;
# they dominate the suite's runtime.
# ---------------------------------------------------------------------------

def test_criterion_08_margin_bisection_reproduction():
    t_start = time.time()
    cfg = sc.GenConfig(m_x=4, m_y=4, n_users=3, gamma_db_range=(0.0, 6.0),
                       p_max_db=30.0, mode="statistical", n_est_samples=256,
                       groups=[sc.GroupDef("pil", "mmse", 24.0)])
    ds = sc.generate_dataset(cfg, 2000, 11, m_rf=3)
    codebook = sc.dft_codebook(4, 4)
    marg, info = bench.run_ghbf_marg(ds.instances, ds.instances, codebook, 3,
                                     p_out=0.1, bisect_tol=0.1)
    perf = bench.run_ghbf_perf(ds.instances, codebook, 3)
    assert abs(info["val_outage_pct"] - 10.0) <= 0.1
    m_power = float(np.mean([r.mean_power for r in marg]))
    p_power = float(np.mean([r.mean_power for r in perf]))
    assert m_power > p_power
    mins = (time.time() - t_start) / 60.0
    _report(f"criterion 8 PASS: bisected margin {info['margin_db']:.3f} dB "
            f"reaches validation outage {info['val_outage_pct']:.2f}% within "
            f"10.0 +- 0.1% in {info['evals']} evaluations; margin power "
            f"{m_power:.2f} > perfect-CSI power {p_power:.2f} "
            f"({mins:.1f} min)")


def _scaled_gen_config():
    return sc.GenConfig(m_x=2, m_y=2, n_users=2, gamma_db_range=(5.0, 10.0),
                        p_max_db=30.0, mode="statistical", n_est_samples=32,
                        groups=[sc.GroupDef("p10", "mmse", 10.0),
                                sc.GroupDef("p24", "mmse", 24.0)])


def test_criterion_09_scaled_training():
    t_start = time.time()
    ds = sc.generate_dataset(_scaled_gen_config(), 2500, 7, m_rf=2)
    rcfg = tr.RunConfig(m_rf=2, l_rf=2, n_layers=3, width=32,
                        minibatch_size=10, max_steps=8000, tau_val=100,
                        tau_pat_1=3000, tau_pat_2=5000, seed=0)
    state, _ = tr.train(ds, 0, rcfg, n_folds=5)  # 2000 train / 500 val
    assert not state["diverged"]

    _, val = tr.split_fold(ds.instances, 0, 5)
    assert len(val) == 500
    codebook = sc.dft_codebook(2, 2)
    model = {"variant": "gcn", "m_rf": 2, "l_rf": 2, "beta_m": 5.0,
             "weight_mode": "baseband", "net_cfg": state["net_cfg"],
             "params": state["best_params"]}
    learned = bench.run_learned(val, model, codebook)
    marg, info = bench.run_ghbf_marg(val, val, codebook, 2, p_out=0.1,
                                     bisect_tol=0.1)
    for r in learned:
        assert 8.0 <= r.outage_pct <= 12.0
    l_power = float(np.mean([r.mean_power for r in learned]))
    m_power = float(np.mean([r.mean_power for r in marg]))
    assert l_power < m_power
    mins = (time.time() - t_start) / 60.0
    _report(f"criterion 9 PASS: held-out per-group outage "
            f"{[round(r.outage_pct, 2) for r in learned]}% within 10 +- 2%; "
            f"learned mean power {l_power:.2f} < margin baseline "
            f"{m_power:.2f} ({mins:.1f} min)")


def test_criterion_10_annealing_vs_quantile():
    ds = sc.generate_dataset(_scaled_gen_config(), 800, 13, m_rf=2)
    codebook = sc.dft_codebook(2, 2)
    train_set, val_set = tr.split_fold(ds.instances, 0, 4)
    medians = {}
    for mode, dual in [("annealed", 0.1), ("quantile", 0.002)]:
        steps = []
        for seed in range(5):
            rcfg = tr.RunConfig(m_rf=2, l_rf=2, n_layers=3, width=32,
                                minibatch_size=10, max_steps=1500,
                                tau_val=50, tau_pat_1=600, tau_pat_2=1000,
                                constraint_mode=mode, dual_step_size=dual,
                                seed=seed)
            state, _ = tr.train_loop(train_set, val_set, rcfg,
                                     codebook=codebook)
            steps.append(state["best_step"])
        medians[mode] = float(np.median(steps))
    assert medians["annealed"] < medians["quantile"]
    _report(f"criterion 10 PASS: annealed constraint reaches its best J_cm "
            f"in median {medians['annealed']:.0f} steps vs "
            f"{medians['quantile']:.0f} for the quantile constraint "
            f"(5 seeds each)")
