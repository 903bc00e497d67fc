"""System realizations: correlated channels, CSI degradation, codebooks, datasets.

Channels follow a Kronecker spatial correlation model for a half-wavelength
2D uniform planar array. Per-axis correlation is computed from a truncated
Gaussian angular power spectrum by numerical quadrature. Imperfect CSI is
produced either by a noisy MMSE channel estimator or by DFT feedback
quantization. Datasets are feasibility-filtered and serialized to a
manifest.json + tensors.bin pair.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import toeplitz

_QUAD_NODES = 400


def _axis_correlation(angle_deg, spread_deg, m):
    """Correlation sequence rho(d), d = 0..m-1, for one array axis.

    The angular power spectrum is a Gaussian with mean `angle_deg` and
    standard deviation `spread_deg`, truncated to [-90, 90] degrees.
    rho(d) = E[exp(j*pi*d*sin(phi))] evaluated by Gauss-Legendre quadrature.
    """
    d = np.arange(m)
    if spread_deg <= 0.0:
        phi0 = np.deg2rad(angle_deg)
        return np.exp(1j * np.pi * d * np.sin(phi0))
    nodes, weights = np.polynomial.legendre.leggauss(_QUAD_NODES)
    lo, hi = -np.pi / 2, np.pi / 2
    phi = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    phi0 = np.deg2rad(angle_deg)
    sigma = np.deg2rad(spread_deg)
    pdf = np.exp(-0.5 * ((phi - phi0) / sigma) ** 2)
    w = weights * pdf
    w = w / np.sum(w)
    return np.exp(1j * np.pi * np.outer(d, np.sin(phi))) @ w


def _toeplitz_from_rho(rho):
    return toeplitz(c=rho, r=np.conj(rho))


def build_upa_covariance(azimuth, elevation, spread, m_x, m_y):
    """Spatial covariance R = R_x kron R_y for a half-wavelength UPA.

    Angles and spread in degrees; azimuth drives the x axis, elevation the
    y axis. Unit diagonal per axis factor, so trace(R) = M = m_x*m_y.
    """
    if m_x < 1 or m_y < 1:
        raise ValueError("array dimensions must be >= 1")
    if spread < 0:
        raise ValueError("angular spread must be >= 0")
    if not (-90.0 <= azimuth <= 90.0 and -90.0 <= elevation <= 90.0):
        raise ValueError("angles must lie in [-90, 90] degrees")
    r_x = _toeplitz_from_rho(_axis_correlation(azimuth, spread, m_x))
    r_y = _toeplitz_from_rho(_axis_correlation(elevation, spread, m_y))
    r = np.kron(r_x, r_y)
    r = 0.5 * (r + r.conj().T)
    ev_min = np.linalg.eigvalsh(r)[0]
    if ev_min < -1e-10 * np.real(np.trace(r)):
        raise RuntimeError("covariance model produced a non-PSD matrix")
    return r


def steering_vector(azimuth, elevation, m_x, m_y):
    """Unit-phase UPA steering vector, Kronecker order matching the covariance."""
    ax = np.exp(1j * np.pi * np.arange(m_x) * np.sin(np.deg2rad(azimuth)))
    ay = np.exp(1j * np.pi * np.arange(m_y) * np.sin(np.deg2rad(elevation)))
    return np.kron(ax, ay)


def sample_channel(r, rng):
    """Draw h ~ CN(0, R)."""
    m = r.shape[0]
    w, v = np.linalg.eigh(r)
    w = np.clip(w, 0.0, None)
    g = (rng.standard_normal(m) + 1j * rng.standard_normal(m)) / np.sqrt(2.0)
    return v @ (np.sqrt(w) * g)


def mmse_degrade(r_true, h_true, pilot_power, rng):
    """Noisy MMSE channel estimate from pilots of power `pilot_power` (linear)."""
    if pilot_power <= 0:
        raise ValueError("pilot power must be positive")
    m = r_true.shape[0]
    n = (rng.standard_normal(m) + 1j * rng.standard_normal(m)) / np.sqrt(2.0)
    y = h_true + np.sqrt(1.0 / pilot_power) * n
    return r_true @ np.linalg.solve(r_true + (1.0 / pilot_power) * np.eye(m), y)


def _oversampled_dft_subset(m, offset):
    """Unitary m x m basis: every second column of a 2x-oversampled DFT."""
    n = np.arange(m)[:, None]
    k = np.arange(m)[None, :]
    return np.exp(2j * np.pi * n * k / m + 1j * np.pi * n * offset / m) / np.sqrt(m)


def dft_quantize(h, n_fb, m_x, m_y, quantize=True):
    """Feedback quantization on a 2x2-oversampled 2D-DFT grid.

    For each of the 4 orthogonal column subsets, keeps the n_fb largest
    coefficients, quantizes magnitudes to a 3 dB grid relative to the
    strongest kept coefficient and phases to 8-PSK, and reconstructs.
    Returns the reconstruction of the subset with smallest residual.
    Setting quantize=False keeps the raw coefficients (subset projection).
    """
    m = m_x * m_y
    if not (1 <= n_fb <= m):
        raise ValueError("n_fb must be in [1, M]")
    best = None
    best_err = np.inf
    for ox in (0, 1):
        for oy in (0, 1):
            basis = np.kron(
                _oversampled_dft_subset(m_x, ox), _oversampled_dft_subset(m_y, oy)
            )
            c = basis.conj().T @ h
            keep = np.argsort(np.abs(c))[::-1][:n_fb]
            ck = c[keep]
            if quantize:
                ref = np.max(np.abs(ck))
                if ref > 0:
                    lvl_db = 3.0 * np.round(
                        20.0 * np.log10(np.maximum(np.abs(ck) / ref, 1e-30)) / 3.0
                    )
                    mag = ref * 10.0 ** (lvl_db / 20.0)
                else:
                    mag = np.zeros_like(np.abs(ck))
                ph = (np.pi / 4.0) * np.round(np.angle(ck) / (np.pi / 4.0))
                ck = mag * np.exp(1j * ph)
            rec = basis[:, keep] @ ck
            err = np.linalg.norm(h - rec)
            if err < best_err:
                best_err = err
                best = rec
    return best


def estimate_covariance(samples):
    """Sample second-moment matrix (1/S) sum_s h_s h_s^H."""
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise ValueError("need at least one sample vector")
    return np.einsum("sm,sn->mn", samples, samples.conj()) / samples.shape[0]


@dataclass
class Codebook:
    codewords: np.ndarray  # M x A, unit-norm columns
    m_x: int
    m_y: int
    oversampling: int = 1

    @property
    def size(self):
        return self.codewords.shape[1]


def dft_codebook(m_x, m_y):
    """Non-oversampled 2D-DFT codebook: A = M orthonormal columns."""
    fx = _oversampled_dft_subset(m_x, 0)
    fy = _oversampled_dft_subset(m_y, 0)
    return Codebook(codewords=np.kron(fx, fy), m_x=m_x, m_y=m_y, oversampling=1)


# ---------------------------------------------------------------------------
# Generation configuration
# ---------------------------------------------------------------------------

@dataclass
class GroupDef:
    """One constraint group: a CSI degradation model and its quality level.

    degradation: 'none', 'mmse' (xi = pilot power in dB, scalar or [lo, hi])
    or 'dft' (xi = number of fed-back coefficients, integer).
    """
    name: str
    degradation: str = "none"
    xi: object = 1.0

    def draw_xi(self, rng):
        if isinstance(self.xi, (list, tuple)):
            lo, hi = self.xi
            return float(rng.uniform(lo, hi))
        return float(self.xi)


@dataclass
class GenConfig:
    m_x: int = 4
    m_y: int = 4
    n_users: int = 3
    az_range_deg: tuple = (-60.0, 60.0)
    el_range_deg: tuple = (-60.0, 30.0)
    spread_deg: float = 10.0
    gamma_db_range: tuple = (5.0, 15.0)
    p_max_db: float = 20.0
    groups: list = field(default_factory=lambda: [GroupDef("g0", "none", 1.0)])
    mode: str = "instantaneous"  # or 'statistical'
    n_est_samples: int = 0  # >0: est_cov from degraded channel samples

    def __post_init__(self):
        if self.n_users < 1:
            raise ValueError("n_users must be >= 1")
        if self.m_x < 1 or self.m_y < 1:
            raise ValueError("array dimensions must be >= 1")
        if len(self.groups) < 1:
            raise ValueError("need at least one group")
        if self.mode not in ("instantaneous", "statistical"):
            raise ValueError("mode must be 'instantaneous' or 'statistical'")
        self.groups = [
            g if isinstance(g, GroupDef) else GroupDef(**g) for g in self.groups
        ]

    @property
    def m(self):
        return self.m_x * self.m_y

    @property
    def p_max(self):
        return 10.0 ** (self.p_max_db / 10.0)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("az_range_deg", "el_range_deg", "gamma_db_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ScenarioInstance:
    true_cov: np.ndarray  # I x M x M
    est_cov: np.ndarray  # I x M x M
    sinr_targets: np.ndarray  # I (linear)
    side_info: np.ndarray  # I x k (linear)
    p_max: float
    group_id: int = 0
    h_true: np.ndarray | None = None  # I x M
    h_est_samples: np.ndarray | None = None  # I x S x M

    @property
    def n_users(self):
        return self.true_cov.shape[0]

    @property
    def m(self):
        return self.true_cov.shape[1]


def _degrade_channel(group, r_stat, h, m_x, m_y, xi, rng):
    if group.degradation == "none":
        return h
    if group.degradation == "mmse":
        return mmse_degrade(r_stat, h, xi, rng)
    if group.degradation == "dft":
        return dft_quantize(h, int(round(xi)), m_x, m_y)
    raise ValueError(f"unknown degradation '{group.degradation}'")


def sample_scenario(config, rng, group_id=0):
    """Draw one ScenarioInstance from the configured distribution."""
    group = config.groups[group_id]
    n_i = config.n_users
    m = config.m
    r_stat = np.empty((n_i, m, m), dtype=complex)
    for i in range(n_i):
        az = rng.uniform(*config.az_range_deg)
        el = rng.uniform(*config.el_range_deg)
        r_stat[i] = build_upa_covariance(az, el, config.spread_deg, config.m_x, config.m_y)
    gamma_db = rng.uniform(*config.gamma_db_range, size=n_i)
    gamma = 10.0 ** (gamma_db / 10.0)
    xi_vals = np.array([group.draw_xi(rng) for _ in range(n_i)])
    if group.degradation == "mmse":
        xi_lin = 10.0 ** (xi_vals / 10.0)
    else:
        xi_lin = xi_vals
    if config.mode == "statistical":
        true_cov = r_stat
        h_true = None
        if config.n_est_samples > 0:
            s = config.n_est_samples
            h_samp = np.empty((n_i, s, m), dtype=complex)
            for i in range(n_i):
                for k in range(s):
                    h = sample_channel(r_stat[i], rng)
                    h_samp[i, k] = _degrade_channel(
                        group, r_stat[i], h, config.m_x, config.m_y, xi_lin[i], rng
                    )
            est_cov = np.stack([estimate_covariance(h_samp[i]) for i in range(n_i)])
            h_est_samples = h_samp
        else:
            est_cov = r_stat.copy()
            h_est_samples = None
        return ScenarioInstance(
            true_cov=true_cov, est_cov=est_cov, sinr_targets=gamma,
            side_info=xi_lin[:, None], p_max=config.p_max, group_id=group_id,
            h_true=h_true, h_est_samples=h_est_samples,
        )
    # instantaneous mode
    h_true = np.empty((n_i, m), dtype=complex)
    h_est = np.empty((n_i, m), dtype=complex)
    for i in range(n_i):
        h_true[i] = sample_channel(r_stat[i], rng)
        h_est[i] = _degrade_channel(
            group, r_stat[i], h_true[i], config.m_x, config.m_y, xi_lin[i], rng
        )
    true_cov = np.einsum("im,in->imn", h_true, h_true.conj())
    est_cov = np.einsum("im,in->imn", h_est, h_est.conj())
    return ScenarioInstance(
        true_cov=true_cov, est_cov=est_cov, sinr_targets=gamma,
        side_info=xi_lin[:, None], p_max=config.p_max, group_id=group_id,
        h_true=h_true, h_est_samples=None,
    )


# ---------------------------------------------------------------------------
# Dataset assembly and serialization
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    config: GenConfig
    instances: list
    seed: int = 0
    keep_rate: float = 1.0

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, k):
        return self.instances[k]

    def group_ids(self):
        return np.array([s.group_id for s in self.instances])


def feasibility_filter(instances, codebook, solver_config=None, m_rf=None, n_jobs=1):
    """Keep instances the perfect-CSI greedy pipeline can serve within budget.

    Runs the plain greedy solver (exact CSI, 2*M_rf selections) and keeps
    instances with a feasible solution whose recovered power satisfies
    w^T p <= P_max. Returns (kept, rejection_rate).
    """
    from . import duality

    if solver_config is None:
        solver_config = duality.SolverConfig()
    kept = []
    for s in instances:
        sol = duality.greedy_pipeline_plain(
            s.true_cov, s.sinr_targets, codebook,
            m_rf=m_rf if m_rf is not None else min(s.m, codebook.size),
            l_rf=None, p_max=s.p_max, cfg=solver_config,
        )
        if sol.feasible and np.dot(sol.w, sol.p) <= s.p_max * (1 + 1e-9):
            kept.append(s)
    rate = 1.0 - len(kept) / max(len(instances), 1)
    return kept, rate


def generate_dataset(config, n_instances, seed, codebook=None, m_rf=None,
                     filter_feasible=True, oversample_factor=3):
    """Generate a feasibility-filtered dataset of n_instances realizations.

    Groups are assigned round-robin so contiguous fold splits stay balanced.
    Deterministic given (config, seed).
    """
    from . import duality

    if codebook is None:
        codebook = dft_codebook(config.m_x, config.m_y)
    n_groups = len(config.groups)
    ss = np.random.SeedSequence(seed)
    instances = []
    n_drawn = 0
    n_rejected = 0
    budget = n_instances * oversample_factor if filter_feasible else n_instances
    child_seeds = ss.spawn(budget)
    while len(instances) < n_instances and n_drawn < budget:
        rng = np.random.default_rng(child_seeds[n_drawn])
        gid = len(instances) % n_groups
        inst = sample_scenario(config, rng, group_id=gid)
        n_drawn += 1
        if filter_feasible:
            kept, _ = feasibility_filter([inst], codebook, m_rf=m_rf)
            if not kept:
                n_rejected += 1
                continue
        instances.append(inst)
    if len(instances) < n_instances:
        raise RuntimeError(
            f"could not generate {n_instances} feasible instances "
            f"({n_rejected} rejected out of {n_drawn})"
        )
    keep = 1.0 - n_rejected / max(n_drawn, 1)
    return Dataset(config=config, instances=instances, seed=seed, keep_rate=keep)


_SCHEMA_VERSION = 1


def _pack_array(arr):
    """Serialize an array as little-endian float64 bytes.

    Complex arrays are stored as interleaved (re, im) pairs, row-major.
    """
    arr = np.ascontiguousarray(arr)
    if np.iscomplexobj(arr):
        flat = np.empty(arr.size * 2, dtype="<f8")
        flat[0::2] = arr.real.ravel()
        flat[1::2] = arr.imag.ravel()
        return flat.tobytes(), "complex"
    return arr.astype("<f8").ravel().tobytes(), "real"


def _unpack_array(buf, shape, kind):
    flat = np.frombuffer(buf, dtype="<f8")
    if kind == "complex":
        arr = flat[0::2] + 1j * flat[1::2]
    else:
        arr = flat.copy()
    return arr.reshape(shape)


def save_dataset(dataset, path):
    os.makedirs(path, exist_ok=True)
    n = len(dataset)
    arrays = {
        "true_cov": np.stack([s.true_cov for s in dataset.instances]),
        "est_cov": np.stack([s.est_cov for s in dataset.instances]),
        "sinr_targets": np.stack([s.sinr_targets for s in dataset.instances]),
        "side_info": np.stack([s.side_info for s in dataset.instances]),
        "p_max": np.array([s.p_max for s in dataset.instances]),
        "group_id": np.array([float(s.group_id) for s in dataset.instances]),
    }
    if dataset.instances and dataset.instances[0].h_true is not None:
        arrays["h_true"] = np.stack([s.h_true for s in dataset.instances])
    if dataset.instances and dataset.instances[0].h_est_samples is not None:
        arrays["h_est_samples"] = np.stack(
            [s.h_est_samples for s in dataset.instances]
        )
    entries = []
    blob = bytearray()
    for name, arr in arrays.items():
        data, kind = _pack_array(arr)
        entries.append({"name": name, "shape": list(arr.shape), "kind": kind,
                        "nbytes": len(data)})
        blob.extend(data)
    manifest = {
        "schema_version": _SCHEMA_VERSION,
        "n_instances": n,
        "seed": dataset.seed,
        "keep_rate": dataset.keep_rate,
        "config": dataset.config.to_dict(),
        "arrays": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(os.path.join(path, "tensors.bin"), "wb") as f:
        f.write(bytes(blob))


def load_dataset(path):
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(path, "tensors.bin"), "rb") as f:
        blob = f.read()
    arrays = {}
    off = 0
    for e in manifest["arrays"]:
        arrays[e["name"]] = _unpack_array(
            blob[off:off + e["nbytes"]], e["shape"], e["kind"]
        )
        off += e["nbytes"]
    config = GenConfig.from_dict(manifest["config"])
    n = manifest["n_instances"]
    instances = []
    for t in range(n):
        instances.append(ScenarioInstance(
            true_cov=arrays["true_cov"][t],
            est_cov=arrays["est_cov"][t],
            sinr_targets=arrays["sinr_targets"][t].real.astype(float),
            side_info=arrays["side_info"][t].real.astype(float),
            p_max=float(arrays["p_max"][t].real),
            group_id=int(round(float(arrays["group_id"][t].real))),
            h_true=arrays["h_true"][t] if "h_true" in arrays else None,
            h_est_samples=(arrays["h_est_samples"][t]
                           if "h_est_samples" in arrays else None),
        ))
    return Dataset(config=config, instances=instances,
                   seed=manifest["seed"], keep_rate=manifest["keep_rate"])


def dataset_checksum(path):
    with open(os.path.join(path, "tensors.bin"), "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
