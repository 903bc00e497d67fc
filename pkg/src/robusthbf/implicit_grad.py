"""Implicit differentiation of the uplink solver through its KKT system.

The solver's first-order optimality conditions are written as a real-valued
system of nonlinear equations (SNLE) in the scaled beamformers and uplink
powers. Hand-assembled Jacobians with respect to the variables and the
quadratic-form matrices give the derivative of the solver output via the
implicit function theorem, exposed as vector-Jacobian products.

Conventions
-----------
* zeta layout: per user a real beamformer block of length 2*M_rf - 1
  (real part in full, imaginary part with the last entry removed; the phase
  gauge fixes Im(b)[M_rf-1] = 0), followed by the I uplink powers.
* psi coordinates per Hermitian M_rf x M_rf matrix: diagonal (ascending),
  upper-triangle real parts (row-major), upper-triangle imaginary parts
  (row-major); M_rf^2 reals in total.
* matrix pairs are labelled (i, j) with 1-based user indices; i == j is the
  desired matrix of user i, i != j (i >= 1) the interference matrix of
  channel owner i at victim j, and i == 0 the power-weight matrix of user j.
"""

from __future__ import annotations

import numpy as np

from .duality import VirtualChannels


# ---------------------------------------------------------------------------
# Real embeddings and coordinate maps
# ---------------------------------------------------------------------------

def realify_vec(b):
    """Complex M_rf vector -> real 2*M_rf-1 vector (drop last imaginary)."""
    return np.concatenate([np.real(b), np.imag(b)[:-1]])


def complexify_vec(x, m_rf):
    """Inverse of realify_vec (last imaginary entry is zero)."""
    im = np.concatenate([x[m_rf:], [0.0]])
    return x[:m_rf] + 1j * im


def realify_mat(psi):
    """Real embedding of a Hermitian matrix acting on realified vectors.

    Satisfies realify_mat(P) @ realify_vec(b) == realify_vec(P @ b) whenever
    Im(b)[-1] == 0, and x^T realify_mat(P) x == Re(b^H P b).
    """
    re = np.real(psi)
    im = np.imag(psi)
    top = np.hstack([re, -im[:, :-1]])
    bot = np.hstack([im[:-1, :], re[:-1, :-1]])
    return np.vstack([top, bot])


def gauge_fix(b):
    """Rotate a complex vector so its last entry is real nonnegative."""
    piv = b[-1]
    if piv == 0:
        return b.copy()
    return b * (piv.conj() / np.abs(piv))


def psi_coords(psi):
    """Hermitian matrix -> coordinate vector (diag, upper re, upper im)."""
    m = psi.shape[0]
    iu = np.triu_indices(m, 1)
    return np.concatenate([np.real(np.diag(psi)),
                           np.real(psi[iu]), np.imag(psi[iu])])


def coords_to_hermitian(v, m_rf):
    """Inverse of psi_coords."""
    m = m_rf
    n_off = m * (m - 1) // 2
    diag = v[:m]
    re = v[m:m + n_off]
    im = v[m + n_off:]
    out = np.zeros((m, m), dtype=complex)
    iu = np.triu_indices(m, 1)
    out[iu] = re + 1j * im
    out = out + out.conj().T
    out[np.diag_indices(m)] = diag
    return out


def coord_grad_from_outer(g):
    """Gradient in psi coordinates of c -> Re(trace(E_c g^H)).

    E_c ranges over the Hermitian coordinate basis implied by psi_coords:
    E_kk = e_k e_k^T, E^re_kl = e_k e_l^T + e_l e_k^T,
    E^im_kl = j (e_k e_l^T - e_l e_k^T).
    """
    m = g.shape[0]
    iu = np.triu_indices(m, 1)
    gd = np.real(np.diag(g))
    gr = np.real(g[iu]) + np.real(g.T[iu])
    gi = np.imag(g[iu]) - np.imag(g.T[iu])
    return np.concatenate([gd, gr, gi])


def hermitian_from_coord_grad(v, m_rf):
    """Assemble a Hermitian matrix G so that for any Hermitian perturbation
    dPsi, Re(trace(G^H dPsi)) equals the coordinate inner product
    <v, psi_coords(dPsi)>. Used to chain psi gradients into matrix form."""
    m = m_rf
    n_off = m * (m - 1) // 2
    iu = np.triu_indices(m, 1)
    out = np.zeros((m, m), dtype=complex)
    out[iu] = 0.5 * (v[m:m + n_off] + 1j * v[m + n_off:])
    out = out + out.conj().T
    out[np.diag_indices(m)] = v[:m]
    return out


def pack_point(b_scaled, q):
    """Stack gauge-fixed scaled beamformers and powers into a zeta vector."""
    blocks = [realify_vec(gauge_fix(np.asarray(bi))) for bi in b_scaled]
    return np.concatenate(blocks + [np.asarray(q, dtype=float)])


def unpack_point(zeta, n_users, m_rf):
    nb = 2 * m_rf - 1
    b = np.stack([complexify_vec(zeta[k * nb:(k + 1) * nb], m_rf)
                  for k in range(n_users)])
    q = zeta[n_users * nb:]
    return b, q


def solution_to_zeta(b_unit, q, p):
    """zeta from a solver output: scale unit beamformers by sqrt(p)."""
    b_scaled = np.sqrt(np.maximum(np.asarray(p, dtype=float), 0.0))[:, None] \
        * np.asarray(b_unit)
    return pack_point(b_scaled, q)


def normalized_output(zeta, n_users, m_rf):
    """Map zeta to the solver's observable output (normalized B, q)."""
    b, q = unpack_point(zeta, n_users, m_rf)
    out = []
    for bi in b:
        nrm = np.linalg.norm(realify_vec(bi))
        out.append(realify_vec(bi) / nrm)
    return np.concatenate(out + [q])


# ---------------------------------------------------------------------------
# Residual and Jacobians
# ---------------------------------------------------------------------------

def lambda_matrix(q, psi, gamma, i):
    """Dual certificate matrix of user i (0-based)."""
    n_i = psi.n_users
    lam = psi.weight[i] - (q[i] / gamma[i]) * psi.des[i]
    for j in range(n_i):
        if j != i:
            lam = lam + q[j] * psi.intf_of(j, i)
    return lam


def snle_residual(zeta, psi, gamma, m_rf=None):
    """Real-valued KKT residual at zeta; zero at the solver optimum."""
    n_i = psi.n_users
    m_rf = psi.m_rf if m_rf is None else m_rf
    b, q = unpack_point(zeta, n_users=n_i, m_rf=m_rf)
    gamma = np.asarray(gamma, dtype=float)
    parts = []
    for i in range(n_i):
        parts.append(realify_vec(lambda_matrix(q, psi, gamma, i) @ b[i]))
    gq = np.empty(n_i)
    for i in range(n_i):
        s = 1.0 - np.real(b[i].conj() @ psi.des[i] @ b[i]) / gamma[i]
        for j in range(n_i):
            if j != i:
                s += np.real(b[j].conj() @ psi.intf_of(i, j) @ b[j])
        gq[i] = q[i] * s
    parts.append(gq)
    return np.concatenate(parts)


def jac_zeta(zeta, psi, gamma):
    """Jacobian of snle_residual with respect to zeta."""
    n_i = psi.n_users
    m_rf = psi.m_rf
    nb = 2 * m_rf - 1
    b, q = unpack_point(zeta, n_i, m_rf)
    gamma = np.asarray(gamma, dtype=float)
    n = n_i * nb + n_i
    jac = np.zeros((n, n))
    des_r = [realify_mat(psi.des[i]) for i in range(n_i)]
    b_r = [realify_vec(b[i]) for i in range(n_i)]
    # upper-left: blockdiag of realified Lambda_i
    for i in range(n_i):
        lam = realify_mat(lambda_matrix(q, psi, gamma, i))
        jac[i * nb:(i + 1) * nb, i * nb:(i + 1) * nb] = lam
    # upper-right: d g_b,i / d q_j
    for i in range(n_i):
        for j in range(n_i):
            if j == i:
                col = -(1.0 / gamma[i]) * (des_r[i] @ b_r[i])
            else:
                col = realify_mat(psi.intf_of(j, i)) @ b_r[i]
            jac[i * nb:(i + 1) * nb, n_i * nb + j] = col
    # lower-left: 2 Diag(q) (upper-right)^T
    ur = jac[:n_i * nb, n_i * nb:]
    jac[n_i * nb:, :n_i * nb] = 2.0 * q[:, None] * ur.T
    # lower-right: diagonal slack terms
    for i in range(n_i):
        s = 1.0 - b_r[i] @ des_r[i] @ b_r[i] / gamma[i]
        for j in range(n_i):
            if j != i:
                s += b_r[j] @ realify_mat(psi.intf_of(i, j)) @ b_r[j]
        jac[n_i * nb + i, n_i * nb + i] = s
    return jac


def jac_psi_vjp(upstream, zeta, gamma, pair, n_users, m_rf):
    """upstream^T d(residual)/d(psi coordinates of the given matrix pair).

    pair = (i, j) with 1-based user indices; i == 0 selects the power-weight
    matrix of user j. The residual is linear in each matrix, so the VJP only
    needs zeta and gamma.
    """
    i, j = pair
    nb = 2 * m_rf - 1
    b, q = unpack_point(zeta, n_users, m_rf)
    gamma = np.asarray(gamma, dtype=float)
    u_b = np.stack([
        complexify_vec(upstream[k * nb:(k + 1) * nb], m_rf)
        for k in range(n_users)])
    u_q = upstream[n_users * nb:]
    g = np.zeros((m_rf, m_rf), dtype=complex)
    if i == 0:
        # weight matrix of user j: coefficient 1 in g_b,j only
        jj = j - 1
        g += np.outer(u_b[jj], b[jj].conj())
    elif i == j:
        ii = i - 1
        coef = -q[ii] / gamma[ii]
        g += coef * np.outer(u_b[ii], b[ii].conj())
        g += u_q[ii] * coef * np.outer(b[ii], b[ii].conj())
    else:
        ii, jj = i - 1, j - 1
        g += q[ii] * np.outer(u_b[jj], b[jj].conj())
        g += u_q[ii] * q[ii] * np.outer(b[jj], b[jj].conj())
    return coord_grad_from_outer(g)


def jac_normalization(zeta, n_users, m_rf):
    """Jacobian of the per-user beamformer normalization map.

    Maps zeta to (b / ||b|| per user, q); the q block is the identity and each
    beamformer block is the radial projector (||x||^2 I - x x^T) / ||x||^3.
    """
    nb = 2 * m_rf - 1
    n = n_users * nb + n_users
    jac = np.zeros((n, n))
    for k in range(n_users):
        x = zeta[k * nb:(k + 1) * nb]
        nrm = np.linalg.norm(x)
        if nrm == 0:
            raise ValueError("zero beamformer: normalization undefined")
        block = (nrm ** 2 * np.eye(nb) - np.outer(x, x)) / nrm ** 3
        jac[k * nb:(k + 1) * nb, k * nb:(k + 1) * nb] = block
    jac[n_users * nb:, n_users * nb:] = np.eye(n_users)
    return jac


def all_pairs(n_users, include_weight=True):
    pairs = []
    for i in range(1, n_users + 1):
        for j in range(1, n_users + 1):
            pairs.append((i, j))
    if include_weight:
        for j in range(1, n_users + 1):
            pairs.append((0, j))
    return pairs


def implicit_vjp(upstream, zeta_opt, psi, gamma, cond_threshold=1e12,
                 include_weight=True):
    """Gradient of <upstream, (normalized B, q)> w.r.t. all psi coordinates.

    Returns (grads, singular_flag) where grads maps each matrix pair (i, j)
    to its coordinate gradient. The implicit function theorem gives
    d zeta / d psi = -J_zeta^{-1} J_psi, chained with the normalization map.
    An ill-conditioned Jacobian yields all-zero gradients and a raised flag.
    """
    n_i = psi.n_users
    m_rf = psi.m_rf
    gamma = np.asarray(gamma, dtype=float)
    pairs = all_pairs(n_i, include_weight)
    jac_n = jac_normalization(zeta_opt, n_i, m_rf)
    v = jac_n.T @ np.asarray(upstream, dtype=float)
    jac = jac_zeta(zeta_opt, psi, gamma)
    cond = np.linalg.cond(jac)
    if not np.isfinite(cond) or cond > cond_threshold:
        zero = np.zeros(m_rf * m_rf)
        return {pr: zero.copy() for pr in pairs}, True
    w = np.linalg.solve(jac.T, v)
    grads = {}
    for pr in pairs:
        grads[pr] = -jac_psi_vjp(w, zeta_opt, gamma, pr, n_i, m_rf)
    return grads, False


# ---------------------------------------------------------------------------
# Finite-difference verification suite
# ---------------------------------------------------------------------------

def _pairwise_from_psi(psi):
    """Expand owner-indexed interference matrices to pairwise form."""
    if psi.pairwise:
        return psi
    n_i = psi.n_users
    intf = np.stack([np.stack([psi.intf[i] for _ in range(n_i)])
                     for i in range(n_i)])
    return VirtualChannels(des=psi.des.copy(), intf=intf, weight=psi.weight.copy())


def perturb_pair(psi, pair, delta):
    """Return a copy of psi with `delta` (Hermitian) added to one matrix."""
    psi = _pairwise_from_psi(psi)
    des = psi.des.copy()
    intf = psi.intf.copy()
    weight = psi.weight.copy()
    i, j = pair
    if i == 0:
        weight[j - 1] = weight[j - 1] + delta
    elif i == j:
        des[i - 1] = des[i - 1] + delta
    else:
        intf[i - 1, j - 1] = intf[i - 1, j - 1] + delta
    return VirtualChannels(des=des, intf=intf, weight=weight)


def _coordinate_basis(m_rf):
    n_c = m_rf * m_rf
    basis = []
    for c in range(n_c):
        e = np.zeros(n_c)
        e[c] = 1.0
        basis.append(coords_to_hermitian(e, m_rf))
    return basis


def fd_jacobian_check(psi, gamma, zeta, step=1e-6):
    """Max relative error of jac_zeta and jac_psi_vjp vs central differences."""
    n_i = psi.n_users
    m_rf = psi.m_rf
    rng = np.random.default_rng(0)
    # jac_zeta
    jac = jac_zeta(zeta, psi, gamma)
    fd = np.zeros_like(jac)
    for c in range(len(zeta)):
        dz = np.zeros_like(zeta)
        dz[c] = step
        fd[:, c] = (snle_residual(zeta + dz, psi, gamma)
                    - snle_residual(zeta - dz, psi, gamma)) / (2 * step)
    err_zeta = np.max(np.abs(jac - fd)) / max(np.max(np.abs(fd)), 1e-12)
    # jac_psi_vjp, every pair and coordinate, random upstream
    u = rng.standard_normal(len(zeta))
    basis = _coordinate_basis(m_rf)
    err_psi = 0.0
    for pr in all_pairs(n_i):
        ana = jac_psi_vjp(u, zeta, gamma, pr, n_i, m_rf)
        fd_v = np.empty_like(ana)
        for c, e_mat in enumerate(basis):
            rp = snle_residual(zeta, perturb_pair(psi, pr, step * e_mat), gamma)
            rm = snle_residual(zeta, perturb_pair(psi, pr, -step * e_mat), gamma)
            fd_v[c] = u @ (rp - rm) / (2 * step)
        scale = max(np.linalg.norm(fd_v), 1e-9)
        err_psi = max(err_psi, np.linalg.norm(ana - fd_v) / scale)
    return err_zeta, err_psi


def fd_normalization_check(zeta, n_users, m_rf, step=1e-7):
    jac = jac_normalization(zeta, n_users, m_rf)
    fd = np.zeros_like(jac)
    for c in range(len(zeta)):
        dz = np.zeros_like(zeta)
        dz[c] = step
        fd[:, c] = (normalized_output(zeta + dz, n_users, m_rf)
                    - normalized_output(zeta - dz, n_users, m_rf)) / (2 * step)
    return np.max(np.abs(jac - fd)) / max(np.max(np.abs(fd)), 1e-12)
