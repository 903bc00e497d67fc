"""Shared test utilities: random feasible problem generation."""

import numpy as np

from robusthbf import duality as du


def separated_psi(n_users, m_rf, rng, loading=0.02):
    """Virtual channels with well-separated dominant directions.

    Desired and interference matrices are identical rank-1-plus-loading
    covariances, weight is the identity, so feasibility mirrors a spatially
    separable multi-user downlink.
    """
    c = rng.standard_normal((n_users, m_rf)) + 1j * rng.standard_normal(
        (n_users, m_rf))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    covs = np.einsum("im,in->imn", c, c.conj()) + loading * np.eye(m_rf)
    weight = np.broadcast_to(np.eye(m_rf, dtype=complex), covs.shape).copy()
    return du.VirtualChannels(des=covs.astype(complex),
                              intf=covs.astype(complex), weight=weight)


def perturbed_psi(n_users, m_rf, rng, loading=0.05, spread=0.02):
    """Like separated_psi, but desired and interference matrices differ."""
    base = separated_psi(n_users, m_rf, rng, loading)
    x = rng.standard_normal((n_users, m_rf, m_rf)) + 1j * rng.standard_normal(
        (n_users, m_rf, m_rf))
    extra = spread * np.einsum("imn,ikn->imk", x, x.conj()) / m_rf
    intf = base.intf + extra
    return du.VirtualChannels(des=base.des, intf=intf, weight=base.weight)


def draw_feasible(n_users, m_rf, rng, gamma_exp=(0.0, 0.8), max_tries=2000,
                  make_psi=separated_psi):
    """Draw (psi, gamma, solver result) until the instance is feasible."""
    for _ in range(max_tries):
        psi = make_psi(n_users, m_rf, rng)
        gamma = 10.0 ** rng.uniform(*gamma_exp, size=n_users)
        res = du.uplink_fixed_point(psi, gamma, power_cap=1e8)
        if res.feasible:
            return psi, gamma, res
    raise RuntimeError("could not draw a feasible instance")
