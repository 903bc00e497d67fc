"""Primal-dual constrained training of the unrolled beamforming model.

Minimizes mean transmit power subject to per-CSI-group outage constraints.
The non-outage probability is either smoothed by an annealed logistic whose
sharpness follows the empirical quantile of the SINR ratios, or estimated
directly by an interpolated empirical quantile. Primal Adam steps with
adaptive clipping alternate with projected dual ascent; convergence is
tracked by a penalized validation metric with patience-based step decay.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.special import expit

from . import duality as du
from . import neural as nn
from . import scenario as sc
from . import unrolled as un


@dataclass
class RunConfig:
    # model
    m_rf: int = 2
    l_rf: int | None = None
    variant: str = "gcn"  # gcn | fcn | fdbf
    n_layers: int = 3
    width: int = 32
    filter_degree: int = 1
    out_bound: float = 8.0
    beta_m: float = 5.0
    weight_mode: str = "baseband"
    # optimization
    primal_step_size: float = 5e-4
    dual_step_size: float = 0.1
    weight_decay: float = 0.1
    adam_smoothing: tuple = (0.9, 0.99)
    step_size_decay: float = 0.2
    minibatch_size: int = 10
    beta_c_bar: float = 50.0
    eta_c: float = 0.01
    tau_val: int = 100
    tau_pat_1: int = 5000
    tau_pat_2: int = 10000
    lambda_bar: float = 100.0
    p_out: float = 0.1
    constraint_mode: str = "annealed"  # annealed | quantile
    # output-layer bias init pushing the augmentation toward the identity
    # plug-in (z2, z4 near zero) so initial forwards stay feasible
    out_bias_init: tuple | None = (0.0, -8.0, 0.0, -8.0)
    max_steps: int = 10000
    divergence_factor: float = 10.0
    seed: int = 0

    def to_dict(self):
        d = asdict(self)
        d["adam_smoothing"] = list(self.adam_smoothing)
        if self.out_bias_init is not None:
            d["out_bias_init"] = list(self.out_bias_init)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "adam_smoothing" in d:
            d["adam_smoothing"] = tuple(d["adam_smoothing"])
        if d.get("out_bias_init") is not None:
            d["out_bias_init"] = tuple(d["out_bias_init"])
        return cls(**d)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))


def model_setup(cfg, sample_instance):
    """Network and unrolled-model configuration matching the data dims."""
    f_in = 3 + np.atleast_2d(np.asarray(sample_instance.side_info)).shape[1]
    f_gcn = 0 if cfg.variant == "fcn" else cfg.filter_degree
    net_cfg = nn.GcnnConfig(
        f_in=f_in, dims=[cfg.width] * (cfg.n_layers - 1) + [4],
        filter_degree=f_gcn, out_bound=cfg.out_bound)
    variant = "fdbf" if cfg.variant == "fdbf" else "gcn"
    ucfg = un.UnrolledConfig(m_rf=cfg.m_rf, l_rf=cfg.l_rf,
                             weight_mode=cfg.weight_mode, beta_m=cfg.beta_m,
                             variant=variant)
    return net_cfg, ucfg


# ---------------------------------------------------------------------------
# Constraint estimates
# ---------------------------------------------------------------------------

def annealed_unit_step(x, beta_c):
    """Differentiable logistic approximation of the unit step."""
    return expit(beta_c * np.asarray(x, dtype=float))


def constraint_annealed(sinr_ratios, p_out, beta_c):
    """Smoothed outage-constraint estimate; positive means violation."""
    r = np.asarray(sinr_ratios, dtype=float)
    if r.size == 0:
        raise ValueError("empty batch")
    return 1.0 - p_out - float(np.mean(annealed_unit_step(r - 1.0, beta_c)))


def update_beta(beta_prev, batch_ratios, p_out, eta_c, beta_bar):
    """Anneal the logistic sharpness toward the inverse quantile gap."""
    r = np.asarray(batch_ratios, dtype=float).ravel()
    qv = float(np.quantile(r - 1.0, p_out, method="linear"))
    target = 1.0 / max(-qv, 1.0 / beta_bar)
    return (1.0 - eta_c) * beta_prev + eta_c * target


def quantile_with_weights(values, level):
    """Interpolated empirical quantile and its gradient weights.

    Returns (value, w) with value = sum(w * values); w is nonzero only on
    the (at most two) order statistics adjacent to the interpolation point.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = v.size
    if n == 0:
        raise ValueError("empty batch")
    order = np.argsort(v, kind="stable")
    pos = level * (n - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    w = np.zeros(n)
    w[order[lo]] += 1.0 - frac
    w[order[hi]] += frac
    return float((1.0 - frac) * v[order[lo]] + frac * v[order[hi]]), w


def constraint_quantile(sinr_values, gammas, p_out):
    """Quantile estimate of the QoS gap; positive means violation."""
    gap = (np.asarray(gammas, dtype=float)
           - np.asarray(sinr_values, dtype=float)).ravel()
    val, _ = quantile_with_weights(gap, 1.0 - p_out)
    return val


def dual_ascent(lambdas, dual_grads, eta_d):
    """Projected dual step: lambda <- max(0, lambda + eta * g)."""
    return np.maximum(0.0, np.asarray(lambdas, dtype=float)
                      + eta_d * np.asarray(dual_grads, dtype=float))


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------

def downlink_sinr_grads(p, b, a_mat, true_covs, upstream):
    """Gradients of the true-covariance downlink SINRs.

    upstream[i] multiplies dSINR_i; returns (sinr, dp, d_beams, d_analog)
    using the beamformer/analog conventions of the unrolled backward.
    """
    covs = np.asarray(true_covs)
    n_i = covs.shape[0]
    t = np.einsum("kl,ilm,mn->ikn", a_mat.conj().T, covs, a_mat)
    g = np.real(np.einsum("jk,ikl,jl->ij", b.conj(), t, b))  # g[i, j]
    p = np.asarray(p, dtype=float)
    den = 1.0 + g @ p - np.diag(g) * p
    sinr = p * np.diag(g) / den
    u = np.asarray(upstream, dtype=float)
    dp = np.zeros(n_i)
    d_beams = np.zeros_like(b)
    d_analog = np.zeros_like(a_mat, dtype=complex)
    for i in range(n_i):
        if u[i] == 0.0:
            continue
        coef = np.zeros(n_i)
        coef[i] = u[i] * p[i] / den[i]
        dp[i] += u[i] * g[i, i] / den[i]
        for j in range(n_i):
            if j != i:
                coef[j] = -u[i] * sinr[i] * p[j] / den[i]
                dp[j] += -u[i] * sinr[i] * g[i, j] / den[i]
        g_t = np.zeros_like(t[i])
        for j in range(n_i):
            d_beams[j] += 2.0 * coef[j] * (t[i] @ b[j])
            g_t += coef[j] * np.outer(b[j], b[j].conj())
        d_analog += 2.0 * (covs[i] @ (a_mat @ g_t))
    return sinr, dp, d_beams, d_analog


def _group_ids(instances):
    return sorted({s.group_id for s in instances})


def lagrangian_loss(batch, params, net_cfg, ucfg, lambdas, beta_c, cfg,
                    training=True):
    """Loss, primal parameter gradients and per-group dual gradients.

    `lambdas` and `beta_c` are dicts keyed by group id. Input features are
    normalized jointly across the minibatch (shared batch statistics), so
    gradients couple all instances through the normalization layer.
    """
    if not batch:
        raise ValueError("empty batch")
    groups = _group_ids(batch)
    feats = [un.input_features(s) for s in batch]
    rows = np.cumsum([0] + [f.shape[0] for f in feats])
    stacked = np.vstack(feats)
    normed, bn_cache = nn.input_normalize(stacked, params, training=training)

    fwd = []
    for k, s in enumerate(batch):
        p, a, b, cache = un.forward(s, cfg.codebook, params, net_cfg, ucfg,
                                    features=normed[rows[k]:rows[k + 1]],
                                    bn_mode="skip")
        fwd.append((p, a, b, cache))

    n_b = len(batch)
    power_term = float(np.mean([f[3].solution.w @ f[0] for f in fwd]))

    # true-covariance SINRs per instance
    sinrs = []
    for (p, a, b, cache), s in zip(fwd, batch):
        sinrs.append(du.evaluate_downlink_sinr(p, b, a, s.true_cov))
    sinrs = [np.asarray(x) for x in sinrs]

    # constraint values and per-sample SINR upstream coefficients
    g_vals = {}
    sinr_up = [np.zeros_like(x) for x in sinrs]
    for d in groups:
        idx = [k for k, s in enumerate(batch) if s.group_id == d]
        lam = lambdas[d]
        if cfg.constraint_mode == "annealed":
            ratios = np.concatenate(
                [sinrs[k] / np.asarray(batch[k].sinr_targets) for k in idx])
            beta = beta_c[d]
            g_vals[d] = constraint_annealed(ratios, cfg.p_out, beta)
            sig = annealed_unit_step(ratios - 1.0, beta)
            dg_dr = -(beta / ratios.size) * sig * (1.0 - sig)
            pos = 0
            for k in idx:
                n_u = sinrs[k].size
                sinr_up[k] += lam * dg_dr[pos:pos + n_u] \
                    / np.asarray(batch[k].sinr_targets, dtype=float)
                pos += n_u
        elif cfg.constraint_mode == "quantile":
            gaps = np.concatenate(
                [np.asarray(batch[k].sinr_targets) - sinrs[k] for k in idx])
            g_vals[d], w = quantile_with_weights(gaps, 1.0 - cfg.p_out)
            pos = 0
            for k in idx:
                n_u = sinrs[k].size
                sinr_up[k] += -lam * w[pos:pos + n_u]
                pos += n_u
        else:
            raise ValueError("unknown constraint mode")

    loss = power_term + sum(lambdas[d] * g_vals[d] for d in groups)

    # primal gradients
    total = None
    d_feats = np.zeros_like(stacked)
    n_singular = 0
    n_infeasible = 0
    for k, ((p, a, b, cache), s) in enumerate(zip(fwd, batch)):
        _, dp_s, d_beams, d_analog = downlink_sinr_grads(
            p, b, a, s.true_cov, sinr_up[k])
        dp = dp_s + cache.solution.w / n_b
        grads, info = un.backward(cache, dp, d_beams=d_beams,
                                  d_analog=d_analog)
        n_singular += info["singular"]
        n_infeasible += int(info["infeasible"])
        if info["d_features"] is not None:
            d_feats[rows[k]:rows[k + 1]] = info["d_features"]
        if total is None:
            total = {key: g.copy() for key, g in grads.items()}
        else:
            for key, g in grads.items():
                total[key] += g
    d_in, dgamma, dbeta = nn.input_normalize_backward(bn_cache, d_feats)
    total["bn_gamma"] = total.get("bn_gamma", 0.0) + dgamma
    total["bn_beta"] = total.get("bn_beta", 0.0) + dbeta

    diag = {"power": power_term, "singular": n_singular,
            "infeasible": n_infeasible,
            "sinrs": sinrs}
    return loss, total, g_vals, diag


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------

def _eval_forward(instances, params, net_cfg, ucfg, cfg):
    out = []
    for s in instances:
        p, a, b, cache = un.forward(s, cfg.codebook, params, net_cfg, ucfg)
        out.append((p, a, b, cache.solution))
    return out

def hard_constraint(sinrs_by_instance, targets_by_instance, p_out):
    """1 - P_out - empirical non-outage rate over pooled (instance, user)."""
    sat = np.concatenate([
        (np.asarray(s) >= np.asarray(g) * (1 - 1e-12)).astype(float)
        for s, g in zip(sinrs_by_instance, targets_by_instance)])
    return 1.0 - p_out - float(np.mean(sat))


def convergence_metric(val_instances, params, net_cfg, ucfg, cfg):
    """Penalized validation metric: (1/I) mean power + lambda_bar sum [g]+."""
    groups = _group_ids(val_instances)
    fwd = _eval_forward(val_instances, params, net_cfg, ucfg, cfg)
    n_i = len(val_instances[0].sinr_targets)
    mean_power = float(np.mean([sol.w @ p for p, _, _, sol in fwd]))
    jcm = mean_power / n_i
    per_group = {}
    for d in groups:
        idx = [k for k, s in enumerate(val_instances) if s.group_id == d]
        sinrs = [du.evaluate_downlink_sinr(fwd[k][0], fwd[k][2], fwd[k][1],
                                           val_instances[k].true_cov)
                 for k in idx]
        ghat = hard_constraint(sinrs,
                               [val_instances[k].sinr_targets for k in idx],
                               cfg.p_out)
        per_group[d] = ghat
        jcm += cfg.lambda_bar * max(ghat, 0.0)
    return jcm, mean_power, per_group


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def split_fold(instances, fold, n_folds):
    """Deterministic contiguous fold split; returns (train, val)."""
    n = len(instances)
    edges = np.linspace(0, n, n_folds + 1).astype(int)
    lo, hi = edges[fold], edges[fold + 1]
    return instances[:lo] + instances[hi:], instances[lo:hi]


def _stratified_batch(by_group, rng, batch_size):
    groups = sorted(by_group)
    n_g = len(groups)
    base = max(batch_size // n_g, 1)
    batch = []
    for d in groups:
        pool = by_group[d]
        take = min(base, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        batch.extend(pool[i] for i in idx)
    return batch


def train_loop(train_set, val_set, cfg, codebook=None, fold=0):
    """Primal-dual minibatch training; returns (state, history).

    state holds the best-validation-metric parameters plus optimizer/dual
    state; history rows are dicts (step, loss, per-group constraint, duals,
    beta_c, J_cm). state["diverged"] signals the divergence guard tripped.
    """
    cfg = copy.copy(cfg)
    if codebook is not None:
        cfg.codebook = codebook
    net_cfg, ucfg = model_setup(cfg, train_set[0])
    rng = np.random.default_rng(cfg.seed + 1000 * fold)
    params = nn.init_params(net_cfg, rng)
    if cfg.out_bias_init is not None:
        params[f"bias_{net_cfg.n_layers - 1}"] = np.asarray(
            cfg.out_bias_init, dtype=float).copy()
    opt = nn.make_optimizer_state()
    clip_hist = []
    groups = _group_ids(train_set)
    lambdas = {d: 0.0 for d in groups}
    beta_c = {d: None for d in groups}  # set from the first minibatch
    by_group = {d: [s for s in train_set if s.group_id == d] for d in groups}

    lr_p = cfg.primal_step_size
    lr_d = cfg.dual_step_size
    history = []
    best = {"jcm": np.inf, "step": 0, "params": copy.deepcopy(params)}
    jcm0 = None
    decayed = False
    diverged = False

    state = {"params": params, "net_cfg": net_cfg, "ucfg": ucfg,
             "lambdas": lambdas, "beta_c": beta_c, "opt": opt,
             "diverged": False, "best_jcm": np.inf, "best_step": 0}
    if cfg.max_steps == 0:
        state["best_params"] = copy.deepcopy(params)
        return state, history

    for step in range(1, cfg.max_steps + 1):
        batch = _stratified_batch(by_group, rng, cfg.minibatch_size)
        if any(beta_c[d] is None for d in groups):
            # initialize the sharpness from the first batch's quantile
            for d in groups:
                idx = [s for s in batch if s.group_id == d]
                beta_c[d] = cfg.beta_c_bar
            loss, grads, g_vals, diag = lagrangian_loss(
                batch, params, net_cfg, ucfg, lambdas, beta_c, cfg)
            for d in groups:
                ratios = _batch_ratios(batch, diag["sinrs"], d)
                beta_c[d] = update_beta(cfg.beta_c_bar, ratios, cfg.p_out,
                                        1.0, cfg.beta_c_bar)
        else:
            loss, grads, g_vals, diag = lagrangian_loss(
                batch, params, net_cfg, ucfg, lambdas, beta_c, cfg)
        grads = nn.clip_gradient_adaptive(grads, clip_hist)
        nn.adam_update(params, grads, opt, lr=lr_p,
                       betas=cfg.adam_smoothing,
                       weight_decay=cfg.weight_decay)
        lam_vec = dual_ascent([lambdas[d] for d in groups],
                              [g_vals[d] for d in groups], lr_d)
        for d, v in zip(groups, lam_vec):
            lambdas[d] = float(v)
        for d in groups:
            ratios = _batch_ratios(batch, diag["sinrs"], d)
            beta_c[d] = update_beta(beta_c[d], ratios, cfg.p_out,
                                    cfg.eta_c, cfg.beta_c_bar)

        row = {"step": step, "loss": loss, "jcm": np.nan,
               "power": diag["power"]}
        for d in groups:
            row[f"g_{d}"] = g_vals[d]
            row[f"lambda_{d}"] = lambdas[d]
            row[f"beta_c_{d}"] = beta_c[d]

        if step % cfg.tau_val == 0 or step == cfg.max_steps:
            jcm, _, _ = convergence_metric(val_set, params, net_cfg, ucfg, cfg)
            row["jcm"] = jcm
            if jcm0 is None:
                jcm0 = jcm
            if jcm < best["jcm"]:
                best = {"jcm": jcm, "step": step,
                        "params": copy.deepcopy(params)}
            if jcm0 > 0 and jcm > cfg.divergence_factor * jcm0:
                diverged = True
                history.append(row)
                break
            if (not decayed and step - best["step"] >= cfg.tau_pat_1):
                lr_p *= cfg.step_size_decay
                lr_d *= cfg.step_size_decay
                decayed = True
            if step - best["step"] >= cfg.tau_pat_2:
                history.append(row)
                break
        history.append(row)

    state["best_params"] = best["params"]
    state["best_jcm"] = best["jcm"]
    state["best_step"] = best["step"]
    state["diverged"] = diverged
    state["decayed"] = decayed
    return state, history


def _batch_ratios(batch, sinrs, group):
    return np.concatenate([
        s_val / np.asarray(s.sinr_targets)
        for s, s_val in zip(batch, sinrs) if s.group_id == group])


def train(dataset, fold, cfg, n_folds=5):
    """Train on one contiguous cross-validation fold of a dataset."""
    codebook = sc.dft_codebook(dataset.config.m_x, dataset.config.m_y)
    tr, va = split_fold(dataset.instances, fold, n_folds)
    return train_loop(tr, va, cfg, codebook=codebook, fold=fold)


def history_to_csv(history, path):
    if not history:
        with open(path, "w") as f:
            f.write("step\n")
        return
    keys = list(history[0].keys())
    with open(path, "w") as f:
        f.write(",".join(keys) + "\n")
        for row in history:
            f.write(",".join(f"{row.get(k, np.nan)}" for k in keys) + "\n")


def cross_validate(dataset, k, cfg):
    """k-fold training; returns per-fold states and aggregate statistics."""
    if k < 2:
        raise ValueError("k must be >= 2")
    results = []
    for fold in range(k):
        state, history = train(dataset, fold, cfg, n_folds=k)
        results.append({"fold": fold, "state": state, "history": history,
                        "best_jcm": state["best_jcm"]})
    jcms = np.array([r["best_jcm"] for r in results])
    with np.errstate(invalid="ignore"):
        return results, {"jcm_mean": float(np.mean(jcms)),
                         "jcm_std": float(np.std(jcms))}
