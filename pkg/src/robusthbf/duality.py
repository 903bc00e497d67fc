"""QoS power-minimization beamforming via the virtual uplink dual.

Solves min-power downlink beamforming subject to per-user SINR targets by
alternating principal-generalized-eigenvector beamformer updates with exact
uplink power updates, recovers downlink powers through the coupling matrix,
and selects analog codewords greedily from a discrete codebook.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 2000
    rank_tol: float = 1e-9
    power_cap_factor: float = 1e6  # power_cap = factor * p_max


@dataclass
class VirtualChannels:
    """Per-user quadratic-form matrices after analog projection.

    des[i]    : desired-signal matrix of user i.
    intf      : either (I, M_rf, M_rf), one interference matrix per channel
                owner i (used for every victim j != i), or (I, I, M_rf, M_rf)
                with entry [i, j] the matrix of owner i seen in slot j.
    weight[i] : power-weight matrix (identity or A^H A), never learned.
    """
    des: np.ndarray
    intf: np.ndarray
    weight: np.ndarray

    @property
    def n_users(self):
        return self.des.shape[0]

    @property
    def m_rf(self):
        return self.des.shape[-1]

    @property
    def pairwise(self):
        return self.intf.ndim == 4

    def intf_of(self, owner, victim):
        """Matrix of channel owner `owner` applied to user `victim`'s beam."""
        if self.pairwise:
            return self.intf[owner, victim]
        return self.intf[owner]


@dataclass
class AnalogSelection:
    indices: np.ndarray  # M_rf codebook indices
    matrix: np.ndarray  # M x M_rf


@dataclass
class UplinkResult:
    q: np.ndarray
    b: np.ndarray  # I x M_rf (rows are per-user beamformers, unit norm)
    feasible: bool
    n_iter: int


@dataclass
class StepRecord:
    """Per-greedy-step candidate data kept for the backward pass."""
    slot: int
    indices_before: np.ndarray
    scores: np.ndarray  # size A, +inf for infeasible / rank-deficient trials
    cand_q: list  # per candidate: q vector or None
    cand_b: list  # per candidate: I x M_rf or None
    winner: int  # -1 when no finite trial


@dataclass
class BeamformingSolution:
    p: np.ndarray  # projected downlink powers
    p_raw: np.ndarray  # pre-projection downlink powers
    q: np.ndarray
    b: np.ndarray  # I x M_rf unit-norm rows
    analog: AnalogSelection
    w: np.ndarray
    feasible: bool
    power_trace: list = field(default_factory=list)
    steps: list | None = None
    init_indices: np.ndarray | None = None


def power_weights(analog_matrix, b, mode="baseband"):
    """Per-user power weights w_i = b_i^H Psi_0 b_i."""
    b = np.asarray(b)
    if mode == "baseband":
        return np.ones(b.shape[0])
    if mode == "rf":
        gram = analog_matrix.conj().T @ analog_matrix
        return np.real(np.einsum("ik,kl,il->i", b.conj(), gram, b))
    raise ValueError("mode must be 'baseband' or 'rf'")


def weight_matrices(analog_matrix, n_users, m_rf, mode="baseband"):
    if mode == "baseband":
        w = np.eye(m_rf, dtype=complex)
    elif mode == "rf":
        w = analog_matrix.conj().T @ analog_matrix
    else:
        raise ValueError("mode must be 'baseband' or 'rf'")
    return np.broadcast_to(w, (n_users, m_rf, m_rf)).copy()


def augmented_psi(est_covs, analog_matrix, z, weight_mode="baseband"):
    """Virtual channels from covariance plug-ins with per-user augmentation z.

    des_i  = A^H (z1 R_i + z2 (tr R_i / M) I) A
    intf_i = A^H (z3 R_i + z4 (tr R_i / M) I) A
    z = (1, 0, 1, 0) reduces to the plain plug-in A^H R_i A.
    """
    est_covs = np.asarray(est_covs)
    n_i, m = est_covs.shape[0], est_covs.shape[1]
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = np.broadcast_to(z, (n_i, 4))
    eye = np.eye(m)
    tr = np.real(np.einsum("imm->i", est_covs)) / m
    des_full = z[:, 0, None, None] * est_covs + (z[:, 1] * tr)[:, None, None] * eye
    intf_full = z[:, 2, None, None] * est_covs + (z[:, 3] * tr)[:, None, None] * eye
    ah = analog_matrix.conj().T
    des = np.einsum("kl,ilm,mn->ikn", ah, des_full, analog_matrix)
    intf = np.einsum("kl,ilm,mn->ikn", ah, intf_full, analog_matrix)
    weight = weight_matrices(analog_matrix, n_i, analog_matrix.shape[1], weight_mode)
    return VirtualChannels(des=des, intf=intf, weight=weight)


def identity_augmentation(n_users):
    return np.broadcast_to(np.array([1.0, 0.0, 1.0, 0.0]), (n_users, 4)).copy()


def _phase_fix(b):
    """Rotate each row so its largest-magnitude entry is real positive."""
    idx = np.argmax(np.abs(b), axis=1)
    piv = b[np.arange(b.shape[0]), idx]
    mag = np.abs(piv)
    mag = np.where(mag > 0, mag, 1.0)
    return b * (piv.conj() / mag)[:, None]


def _noise_matrices(psi, q):
    n_i = psi.n_users
    if psi.pairwise:
        mask = 1.0 - np.eye(n_i)
        # N[j] = sum_{i != j} q_i * intf[i, j] + weight[j]
        n = np.einsum("i,ij,ijkl->jkl", q, mask, psi.intf) + psi.weight
    else:
        total = np.einsum("j,jkl->kl", q, psi.intf)
        n = total[None] - q[:, None, None] * psi.intf + psi.weight
    return n


def _beam_update(psi, q):
    """Unit-norm principal generalized eigenvectors of (des_i, noise_i)."""
    noise = _noise_matrices(psi, q)
    try:
        chol = np.linalg.cholesky(noise)
    except np.linalg.LinAlgError:
        return None
    inner = np.linalg.solve(chol, psi.des)
    inner = np.linalg.solve(chol, inner.conj().transpose(0, 2, 1))
    inner = 0.5 * (inner + inner.conj().transpose(0, 2, 1))
    _, vecs = np.linalg.eigh(inner)
    u = vecs[:, :, -1]
    b = np.linalg.solve(chol.conj().transpose(0, 2, 1), u[:, :, None])[:, :, 0]
    b = b / np.linalg.norm(b, axis=1, keepdims=True)
    return _phase_fix(b)


def _uplink_gains(psi, b):
    """Quadratic forms needed by the power update, given beamformers b.

    Returns (d, m_off, sig): d_i = b_i^H des_i b_i, sig_i = b_i^H weight_i b_i,
    m_off[i, j] = b_i^H intf_of(j, i) b_i for j != i (zero diagonal).
    """
    n_i = b.shape[0]
    d = np.real(np.einsum("ik,ikl,il->i", b.conj(), psi.des, b))
    sig = np.real(np.einsum("ik,ikl,il->i", b.conj(), psi.weight, b))
    if psi.pairwise:
        # m_off[i, j] = b_i^H intf[j, i] b_i
        m_off = np.real(np.einsum("ik,jikl,il->ij", b.conj(), psi.intf, b))
    else:
        g = np.real(np.einsum("ik,jkl,il->ij", b.conj(), psi.intf, b))
        m_off = g
    m_off = m_off * (1.0 - np.eye(n_i))
    return d, m_off, sig


def uplink_fixed_point(psi, gamma, tol=1e-10, max_iter=2000, power_cap=np.inf):
    """Solve the virtual uplink problem with all SINR constraints active.

    Alternates beamformer updates (principal generalized eigenvectors of the
    desired/noise pencil) with uplink power updates; powers solve the
    constraint-activity system exactly for the current beamformers, falling
    back to the monotone fixed-point map when that system has no positive
    solution. Declares infeasibility when total power exceeds power_cap or
    the iteration fails to converge.
    """
    gamma = np.asarray(gamma, dtype=float)
    n_i = psi.n_users
    q = np.zeros(n_i)
    b = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        b_new = _beam_update(psi, q)
        if b_new is None:
            return UplinkResult(q=q, b=b if b is not None else np.zeros(
                (n_i, psi.m_rf), dtype=complex), feasible=False, n_iter=it)
        b = b_new
        d, m_off, sig = _uplink_gains(psi, b)
        if np.any(d <= 0):
            return UplinkResult(q=q, b=b, feasible=False, n_iter=it)
        sys = np.diag(d / gamma) - m_off
        q_new = None
        try:
            cand = np.linalg.solve(sys, sig)
            if np.all(np.isfinite(cand)) and np.all(cand > 0):
                q_new = cand
        except np.linalg.LinAlgError:
            pass
        if q_new is None:
            # Monotone interference-function iterations; divergence means the
            # targets are infeasible for these beamformers.
            q_new = q.copy()
            for _ in range(500):
                q_next = gamma * (m_off @ q_new + sig) / d
                if np.sum(q_next) > power_cap:
                    return UplinkResult(q=q_next, b=b, feasible=False, n_iter=it)
                if np.max(np.abs(q_next - q_new) / np.maximum(q_next, 1e-300)) < tol:
                    q_new = q_next
                    break
                q_new = q_next
        if np.sum(q_new) > power_cap:
            return UplinkResult(q=q_new, b=b, feasible=False, n_iter=it)
        delta = np.max(np.abs(q_new - q) / np.maximum(np.abs(q_new), 1e-300))
        q = q_new
        if it >= 2 and delta < tol:
            converged = True
            break
    if not converged:
        return UplinkResult(q=q, b=b, feasible=False, n_iter=it)
    # Polish: a couple of extra sweeps sharpen the KKT residual.
    for _ in range(2):
        b_new = _beam_update(psi, q)
        if b_new is None:
            break
        b = b_new
        d, m_off, sig = _uplink_gains(psi, b)
        try:
            cand = np.linalg.solve(np.diag(d / gamma) - m_off, sig)
        except np.linalg.LinAlgError:
            break
        if np.all(np.isfinite(cand)) and np.all(cand > 0):
            q = cand
    return UplinkResult(q=q, b=b, feasible=True, n_iter=it)


def uplink_sinr(q, b, psi):
    """Achieved virtual uplink SINRs for diagnostics/tests."""
    d, m_off, sig = _uplink_gains(psi, b)
    return q * d / (m_off @ q + sig)


def coupling_matrix(b, psi, gamma):
    """I x I system linking downlink powers to the targets: C p = 1."""
    gamma = np.asarray(gamma, dtype=float)
    n_i = b.shape[0]
    d = np.real(np.einsum("ik,ikl,il->i", b.conj(), psi.des, b))
    c = np.zeros((n_i, n_i))
    for i in range(n_i):
        for j in range(n_i):
            if i == j:
                c[i, i] = d[i] / gamma[i]
            else:
                mat = psi.intf_of(i, j)
                c[i, j] = -np.real(b[j].conj() @ mat @ b[j])
    return c


def recover_downlink_power(b, psi, gamma):
    """Solve the coupling system for downlink powers. Returns (p, ok)."""
    c = coupling_matrix(b, psi, gamma)
    try:
        p = np.linalg.solve(c, np.ones(c.shape[0]))
    except np.linalg.LinAlgError:
        return np.zeros(c.shape[0]), False
    ok = bool(np.all(np.isfinite(p)) and np.all(p >= -1e-10))
    return p, ok


def project_power(p, w, p_max):
    """Project powers onto the budget: clip negatives, rescale if over cap."""
    p = np.maximum(np.asarray(p, dtype=float), 0.0)
    w = np.asarray(w, dtype=float)
    excess = max(np.dot(w, p) - p_max, 0.0)
    return p * (p_max / (p_max + excess))


def init_analog(est_covs, codebook, m_rf):
    """Codewords maximizing the summed normalized beamforming gain."""
    n_code = codebook.size
    if m_rf > n_code:
        raise ValueError("m_rf exceeds codebook size")
    covs = np.asarray(est_covs)
    tr = np.real(np.einsum("imm->i", covs))
    cw = codebook.codewords
    gains = np.real(np.einsum("ma,imn,na->ia", cw.conj(), covs, cw))
    scores = np.sum(gains / tr[:, None], axis=0)
    order = np.argsort(-scores, kind="stable")
    idx = np.sort(order[:m_rf])
    return AnalogSelection(indices=idx, matrix=cw[:, idx].copy())


def greedy_select(psi_builder, codebook, init, l_rf, gamma, p_max,
                  cfg=None, weight_mode="baseband", record=False):
    """Greedy analog codeword selection minimizing total virtual uplink power.

    psi_builder(A) must return the VirtualChannels for analog matrix A.
    Visits RF chains cyclically; at each step every codeword substitution is
    solved and the minimizer of 1^T q wins (+inf score for infeasible or
    rank-deficient trials, lowest index on ties).
    """
    if cfg is None:
        cfg = SolverConfig()
    cap = cfg.power_cap_factor * p_max
    gamma = np.asarray(gamma, dtype=float)
    m_rf = init.matrix.shape[1]
    n_code = codebook.size
    cw = codebook.codewords
    a_idx = np.array(init.indices, dtype=int).copy()
    init_indices = a_idx.copy()

    def solve_at(indices):
        mat = cw[:, indices]
        sv = np.linalg.svd(mat, compute_uv=False)
        if sv[-1] < cfg.rank_tol * sv[0]:
            return None, mat
        res = uplink_fixed_point(psi_builder(mat), gamma, cfg.tol, cfg.max_iter, cap)
        return res, mat

    res0, _ = solve_at(a_idx)
    if res0 is not None and res0.feasible:
        inc_q, inc_b, feasible = res0.q, res0.b, True
    else:
        inc_q = np.full(len(gamma), np.inf)
        inc_b = (res0.b if res0 is not None
                 else np.zeros((len(gamma), m_rf), dtype=complex))
        feasible = False
    power_trace = [float(np.sum(inc_q))]
    steps = [] if record else None

    for ell in range(1, l_rf + 1):
        r = (ell - 1) % m_rf
        scores = np.full(n_code, np.inf)
        cand_q = [None] * n_code
        cand_b = [None] * n_code
        idx_before = a_idx.copy()
        for a in range(n_code):
            trial = a_idx.copy()
            trial[r] = a
            res, _ = solve_at(trial)
            if res is not None and res.feasible:
                scores[a] = float(np.sum(res.q))
                cand_q[a] = res.q
                cand_b[a] = res.b
        if np.any(np.isfinite(scores)):
            win = int(np.argmin(scores))
            a_idx[r] = win
            inc_q, inc_b = cand_q[win], cand_b[win]
            feasible = True
            power_trace.append(scores[win])
        else:
            win = -1
            power_trace.append(power_trace[-1])
        if record:
            steps.append(StepRecord(slot=r, indices_before=idx_before,
                                    scores=scores, cand_q=cand_q, cand_b=cand_b,
                                    winner=win))

    a_mat = cw[:, a_idx].copy()
    analog = AnalogSelection(indices=a_idx, matrix=a_mat)
    n_i = len(gamma)
    w = power_weights(a_mat, inc_b, weight_mode)
    if feasible:
        psi_final = psi_builder(a_mat)
        p_raw, ok = recover_downlink_power(inc_b, psi_final, gamma)
        if not ok:
            feasible = False
    if not feasible:
        # Best effort: spend the full budget split evenly; users will mostly
        # be counted in outage downstream.
        w_safe = np.where(w > 0, w, 1.0)
        p_raw = np.full(n_i, p_max) / (n_i * w_safe)
        inc_q = np.where(np.isfinite(inc_q), inc_q, 0.0)
    p_proj = project_power(p_raw, w, p_max)
    return BeamformingSolution(
        p=p_proj, p_raw=p_raw, q=inc_q, b=inc_b, analog=analog, w=w,
        feasible=feasible, power_trace=power_trace, steps=steps,
        init_indices=init_indices,
    )


def greedy_pipeline_plain(covs, gamma, codebook, m_rf, l_rf=None, p_max=100.0,
                          cfg=None, weight_mode="baseband", record=False):
    """Plain greedy pipeline: covariance plug-in without learned augmentation.

    This is the perfect-CSI / estimated-CSI baseline; l_rf defaults to 2*m_rf.
    """
    covs = np.asarray(covs)
    n_i = covs.shape[0]
    if l_rf is None:
        l_rf = 2 * m_rf
    z_id = identity_augmentation(n_i)

    def builder(a_mat):
        return augmented_psi(covs, a_mat, z_id, weight_mode)

    init = init_analog(covs, codebook, m_rf)
    return greedy_select(builder, codebook, init, l_rf, gamma, p_max,
                         cfg=cfg, weight_mode=weight_mode, record=record)


def evaluate_downlink_sinr(p, b, analog_matrix, true_covs):
    """Downlink SINRs of the hybrid precoder against the given covariances."""
    t = np.einsum("kl,ilm,mn->ikn", analog_matrix.conj().T, np.asarray(true_covs),
                  analog_matrix)
    g = np.real(np.einsum("jk,ikl,jl->ij", b.conj(), t, b))  # g[i, j]
    p = np.asarray(p, dtype=float)
    sig = p * np.diag(g)
    intf = g @ p - np.diag(g) * p
    return sig / (intf + 1.0)
