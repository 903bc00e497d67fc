"""End-to-end differentiable hybrid beamforming model.

Composes per-user input features -> graph network -> augmented virtual
channels -> greedy analog selection -> downlink power recovery -> budget
projection, together with a complete reverse pass. The discrete codeword
selection uses a straight-through estimator: the forward pass keeps the hard
argmin while the backward pass routes gradients through softmin weights over
the candidate power scores, each candidate differentiated implicitly through
its uplink solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import duality as du
from . import implicit_grad as ig
from . import neural as nn


@dataclass
class UnrolledConfig:
    m_rf: int
    l_rf: int | None = None  # defaults to 2 * m_rf
    weight_mode: str = "baseband"
    beta_m: float = 5.0  # softmin inverse temperature
    variant: str = "gcn"  # "gcn"/"fcn" (greedy) or "fdbf" (fully digital)
    solver: du.SolverConfig = field(default_factory=du.SolverConfig)

    @property
    def steps(self):
        return 2 * self.m_rf if self.l_rf is None else self.l_rf


@dataclass
class ForwardCache:
    solution: du.BeamformingSolution
    gcnn_cache: object  # None when z was supplied externally
    z: np.ndarray  # I x 4 augmentation coefficients
    features: np.ndarray
    shift: np.ndarray
    est_covs: np.ndarray
    gamma: np.ndarray
    p_max: float
    codebook: object
    cfg: UnrolledConfig


def input_features(scenario):
    """Per-user feature rows (log ||R||_F^2, log gamma, log xi..., log P_max)."""
    covs = np.asarray(scenario.est_cov)
    fro2 = np.real(np.einsum("ikl,ikl->i", covs.conj(), covs))
    if np.any(fro2 <= 0):
        raise ValueError("zero-norm covariance estimate")
    gamma = np.asarray(scenario.sinr_targets, dtype=float)
    xi = np.atleast_2d(np.asarray(scenario.side_info, dtype=float))
    return np.column_stack([
        np.log(fro2), np.log(gamma), np.log(xi),
        np.full(covs.shape[0], np.log(scenario.p_max)),
    ])


def correlation_shift(est_covs):
    """Normalized channel-correlation graph: |tr(R_i R_j)|/(tr R_i tr R_j)."""
    covs = np.asarray(est_covs)
    n_i = covs.shape[0]
    tr = np.real(np.einsum("imm->i", covs))
    s = np.zeros((n_i, n_i))
    for i in range(n_i):
        for j in range(i + 1, n_i):
            val = np.abs(np.einsum("kl,lk->", covs[i], covs[j]))
            s[i, j] = s[j, i] = val / (tr[i] * tr[j])
    return s


def softmin_weights(q_norms, beta_m):
    """Selection weights ~ exp(-beta_m * norm / q_min); +inf entries get 0."""
    n = np.asarray(q_norms, dtype=float)
    finite = np.isfinite(n)
    if not np.any(finite):
        raise ValueError("all candidate scores infinite")
    q_min = np.min(n[finite])
    w = np.zeros_like(n)
    # shift by the minimum so the largest exponent is 0
    w[finite] = np.exp(-beta_m * (n[finite] - q_min) / q_min)
    return w / np.sum(w)


def softmin_vjp(scores, beta_m, dw_vec):
    """Gradient of <dw_vec, softmin_weights(scores)> w.r.t. the scores.

    The instance-adaptive normalizer q_min is treated as a constant
    (gradient stopped).
    """
    w = softmin_weights(scores, beta_m)
    finite = np.isfinite(np.asarray(scores, dtype=float))
    q_min = float(np.min(np.asarray(scores, dtype=float)[finite]))
    return (beta_m / q_min) * w * (float(w @ dw_vec) - np.asarray(dw_vec))


def solve_fixed_analog(est_covs, z, a_mat, gamma, p_max, solver_cfg=None,
                       weight_mode="baseband"):
    """Single uplink solve at a fixed analog matrix (no selection steps)."""
    if solver_cfg is None:
        solver_cfg = du.SolverConfig()
    gamma = np.asarray(gamma, dtype=float)
    n_i = len(gamma)
    psi = du.augmented_psi(est_covs, a_mat, z, weight_mode)
    cap = solver_cfg.power_cap_factor * p_max
    res = du.uplink_fixed_point(psi, gamma, solver_cfg.tol,
                                solver_cfg.max_iter, cap)
    feasible = res.feasible
    if feasible:
        p_raw, ok = du.recover_downlink_power(res.b, psi, gamma)
        feasible = ok
    w = du.power_weights(a_mat, res.b, weight_mode)
    if not feasible:
        w_safe = np.where(w > 0, w, 1.0)
        p_raw = np.full(n_i, p_max) / (n_i * w_safe)
    q = np.where(np.isfinite(res.q), res.q, 0.0)
    return du.BeamformingSolution(
        p=du.project_power(p_raw, w, p_max), p_raw=p_raw, q=q, b=res.b,
        analog=du.AnalogSelection(indices=np.arange(a_mat.shape[1]),
                                  matrix=a_mat),
        w=w, feasible=feasible, power_trace=[float(np.sum(q))], steps=[],
        init_indices=None)


def forward(scenario, codebook, params, net_config, cfg, training=False,
            bn_mode="internal", z_override=None, features=None):
    """Run the full model on one scenario instance.

    Returns (p, analog matrix, baseband beamformers, cache). `z_override`
    bypasses the network (used for reduction checks); `features` with
    bn_mode="skip" lets a caller normalize features across a minibatch.
    """
    est_covs = np.asarray(scenario.est_cov)
    gamma = np.asarray(scenario.sinr_targets, dtype=float)
    if features is None:
        features = input_features(scenario)
    shift = correlation_shift(est_covs)
    if z_override is not None:
        z, gcnn_cache = np.asarray(z_override, dtype=float), None
    else:
        z, gcnn_cache = nn.gcnn_forward(features, shift, params, net_config,
                                        training=training, bn_mode=bn_mode)
    if cfg.variant == "fdbf":
        a_eye = np.eye(est_covs.shape[1], dtype=complex)
        sol = solve_fixed_analog(est_covs, z, a_eye, gamma, scenario.p_max,
                                 cfg.solver, cfg.weight_mode)
    else:
        def builder(a_mat):
            return du.augmented_psi(est_covs, a_mat, z, cfg.weight_mode)

        init = du.init_analog(est_covs, codebook, cfg.m_rf)
        sol = du.greedy_select(builder, codebook, init, cfg.steps, gamma,
                               scenario.p_max, cfg=cfg.solver,
                               weight_mode=cfg.weight_mode, record=True)
    cache = ForwardCache(solution=sol, gcnn_cache=gcnn_cache, z=z,
                         features=features, shift=shift, est_covs=est_covs,
                         gamma=gamma, p_max=scenario.p_max, codebook=codebook,
                         cfg=cfg)
    return sol.p, sol.analog.matrix, sol.b, cache


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _re_trace(g, m):
    """Re trace(G^H M)."""
    return float(np.real(np.sum(g.conj() * m)))


def _solve_vjp(b, q, psi, gamma, g_beams, u_q, weight_mode):
    """VJP through one converged uplink solve.

    g_beams: per-user complex gradients on the unit beamformers with the
    convention dL = Re(g^H db) (or None); u_q: real gradient on q. Returns
    per-user Hermitian matrix gradients (des, intf, weight) and a flag set
    when the implicit solve is unusable.
    """
    n_i, m_rf = psi.n_users, psi.m_rf
    p, ok = du.recover_downlink_power(b, psi, gamma)
    if not ok:
        return None, None, None, True
    zeta = ig.solution_to_zeta(b, q, p)
    nb = 2 * m_rf - 1
    blocks = []
    for i in range(n_i):
        if g_beams is None:
            blocks.append(np.zeros(nb))
            continue
        piv = b[i][-1]
        phase = piv / np.abs(piv) if np.abs(piv) > 1e-12 else 1.0
        blocks.append(ig.realify_vec(np.conj(phase) * g_beams[i]))
    upstream = np.concatenate(blocks + [np.asarray(u_q, dtype=float)])
    include_w = weight_mode == "rf"
    grads, flag = ig.implicit_vjp(upstream, zeta, psi, gamma,
                                  include_weight=include_w)
    if flag:
        return None, None, None, True
    g_des = [ig.hermitian_from_coord_grad(grads[(i + 1, i + 1)], m_rf)
             for i in range(n_i)]
    g_intf = []
    for i in range(n_i):
        acc = np.zeros((m_rf, m_rf), dtype=complex)
        for j in range(n_i):
            if j != i:
                acc += ig.hermitian_from_coord_grad(grads[(i + 1, j + 1)], m_rf)
        g_intf.append(acc)
    g_weight = None
    if include_w:
        g_weight = [ig.hermitian_from_coord_grad(grads[(0, j + 1)], m_rf)
                    for j in range(n_i)]
    return g_des, g_intf, g_weight, False


def _chain_matrix_grads(g_des, g_intf, g_weight, a_mat, est_covs, z):
    """Chain Hermitian matrix gradients into (dz, dA).

    des_i = A^H (z1 R_i + z2 (tr/M) I) A and likewise intf; the weight matrix
    A^H A (rf mode) contributes to dA only.
    """
    est_covs = np.asarray(est_covs)
    n_i, m = est_covs.shape[0], est_covs.shape[1]
    tr = np.real(np.einsum("imm->i", est_covs)) / m
    gram = a_mat.conj().T @ a_mat
    dz = np.zeros((n_i, 4))
    da = np.zeros_like(a_mat, dtype=complex)
    for i in range(n_i):
        ara = a_mat.conj().T @ (est_covs[i] @ a_mat)
        for gmat, k0 in ((g_des[i], 0), (g_intf[i], 2)):
            if gmat is None or not np.any(gmat):
                continue
            dz[i, k0] = _re_trace(gmat, ara)
            dz[i, k0 + 1] = tr[i] * _re_trace(gmat, gram)
            x = z[i, k0] * est_covs[i] + z[i, k0 + 1] * tr[i] * np.eye(m)
            da += 2.0 * (x @ (a_mat @ gmat))
    if g_weight is not None:
        for gw in g_weight:
            da += 2.0 * (a_mat @ gw)
    return dz, da


def backward(cache, dp, d_beams=None, d_analog=None):
    """Reverse pass: upstream gradients on (p, B, A) -> parameter gradients.

    dp: real I-vector on the projected powers; d_beams: complex I x M_rf with
    dL = sum_i Re(g_i^H db_i); d_analog: complex M x M_rf with
    dL = Re tr(g^H dA) for any direct loss dependence on the analog matrix.
    Returns (param_grads, info); info carries singular-solve counts and the
    feature gradient (for externally normalized features).
    """
    sol = cache.solution
    cfg = cache.cfg
    gamma = cache.gamma
    n_i = len(gamma)
    z = cache.z
    info = {"singular": 0, "infeasible": not sol.feasible,
            "d_features": None, "dz": np.zeros((n_i, 4))}
    if not sol.feasible:
        if cache.gcnn_cache is not None:
            grads, _ = nn.gcnn_backward(cache.gcnn_cache, np.zeros((n_i, 4)))
            return grads, info
        return {}, info

    a_final = sol.analog.matrix
    psi_final = du.augmented_psi(cache.est_covs, a_final, z, cfg.weight_mode)
    dp = np.asarray(dp, dtype=float)

    # --- projection subgradient ---
    p_raw = sol.p_raw
    w = sol.w
    p_clip = np.maximum(p_raw, 0.0)
    mask = (p_raw > 0).astype(float)
    denom = float(w @ p_clip)
    g_w = np.zeros(n_i)
    if denom > cache.p_max:
        s = cache.p_max / denom
        inner = float(dp @ p_clip)
        g_pclip = s * dp - (cache.p_max * inner / denom ** 2) * w
        g_w = -(cache.p_max * inner / denom ** 2) * p_clip
    else:
        g_pclip = dp.copy()
    g_praw = g_pclip * mask

    # --- coupling system: p_raw = C^{-1} 1 ---
    c = du.coupling_matrix(sol.b, psi_final, gamma)
    dc = -np.outer(np.linalg.solve(c.T, g_praw), p_raw)
    g_beams = [np.zeros(a_final.shape[1], dtype=complex) for _ in range(n_i)]
    g_des_extra = [np.zeros((a_final.shape[1],) * 2, dtype=complex)
                   for _ in range(n_i)]
    g_intf_extra = [np.zeros((a_final.shape[1],) * 2, dtype=complex)
                    for _ in range(n_i)]
    for i in range(n_i):
        g_beams[i] += dc[i, i] * (2.0 / gamma[i]) * (psi_final.des[i] @ sol.b[i])
        g_des_extra[i] += (dc[i, i] / gamma[i]) * np.outer(sol.b[i],
                                                           sol.b[i].conj())
        for j in range(n_i):
            if j != i:
                g_beams[j] += -dc[i, j] * 2.0 * (psi_final.intf_of(i, j)
                                                 @ sol.b[j])
                g_intf_extra[i] += -dc[i, j] * np.outer(sol.b[j],
                                                        sol.b[j].conj())
    if cfg.weight_mode == "rf" and np.any(g_w):
        gram = a_final.conj().T @ a_final
        for i in range(n_i):
            g_beams[i] += 2.0 * g_w[i] * (gram @ sol.b[i])
    if d_beams is not None:
        for i in range(n_i):
            g_beams[i] = g_beams[i] + np.asarray(d_beams)[i]

    # --- final uplink solve ---
    g_des, g_intf, g_weight, flag = _solve_vjp(
        sol.b, sol.q, psi_final, gamma, g_beams, np.zeros(n_i),
        cfg.weight_mode)
    if flag:
        info["singular"] += 1
        g_des = [np.zeros_like(m) for m in g_des_extra]
        g_intf = [np.zeros_like(m) for m in g_intf_extra]
        g_weight = None
    for i in range(n_i):
        g_des[i] = g_des[i] + g_des_extra[i]
        g_intf[i] = g_intf[i] + g_intf_extra[i]
    dz_total, da = _chain_matrix_grads(g_des, g_intf, g_weight, a_final,
                                       cache.est_covs, z)
    if cfg.weight_mode == "rf" and np.any(g_w):
        for i in range(n_i):
            da += 2.0 * g_w[i] * (a_final @ np.outer(sol.b[i], sol.b[i].conj()))
    if d_analog is not None:
        da = da + np.asarray(d_analog)

    # --- selection steps, straight-through softmin, in reverse ---
    if sol.steps:
        cw = cache.codebook.codewords
        for step in reversed(sol.steps):
            if step.winner < 0:
                continue
            r = step.slot
            dcol = da[:, r].copy()
            da[:, r] = 0.0
            dw_vec = np.real(cw.conj().T @ dcol)
            finite = np.isfinite(step.scores)
            dn = softmin_vjp(step.scores, cfg.beta_m, dw_vec)
            for a in np.nonzero(finite)[0]:
                if dn[a] == 0.0:
                    continue
                trial = step.indices_before.copy()
                trial[r] = a
                a_cand = cw[:, trial]
                psi_c = du.augmented_psi(cache.est_covs, a_cand, z,
                                         cfg.weight_mode)
                out = _solve_vjp(step.cand_b[a], step.cand_q[a], psi_c, gamma,
                                 None, dn[a] * np.ones(n_i), cfg.weight_mode)
                gd, gi, gw, fl = out
                if fl:
                    info["singular"] += 1
                    continue
                dz_c, da_c = _chain_matrix_grads(gd, gi, gw, a_cand,
                                                 cache.est_covs, z)
                dz_total += dz_c
                da_c[:, r] = 0.0  # the candidate's own column is a constant
                da += da_c

    info["dz"] = dz_total
    info["d_analog_init"] = da  # w.r.t. the (constant) initial analog matrix
    if cache.gcnn_cache is None:
        return {}, info
    param_grads, d_feat = nn.gcnn_backward(cache.gcnn_cache, dz_total)
    info["d_features"] = d_feat
    return param_grads, info
