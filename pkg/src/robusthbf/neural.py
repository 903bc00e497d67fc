"""Graph convolutional network with explicit reverse-mode derivatives.

A small per-user GCNN maps input features through polynomial graph filters
Z <- phi(sum_f S^f Z Theta_f + 1 b^T). Hidden activations are ReLU; the
output activation is a soft-bounded exponential exp(beta_o * tanh(x/beta_o))
keeping coefficients in [e^-beta_o, e^beta_o]. Includes input batch
normalization, a decoupled-weight-decay Adam optimizer, adaptive gradient
clipping, and checkpoint serialization.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

BN_KEYS = ("bn_gamma", "bn_beta")
BN_STATE_KEYS = ("bn_run_mean", "bn_run_var")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class GcnnConfig:
    f_in: int
    dims: list  # per-layer output widths, last entry is the output width
    filter_degree: int = 1  # F_gcn; 0 disables graph mixing (per-user FCN)
    out_bound: float = 8.0

    @property
    def n_layers(self):
        return len(self.dims)

    def layer_dims(self):
        return [self.f_in] + list(self.dims)


def make_config(f_in, n_layers=3, width=32, f_out=4, filter_degree=1,
                out_bound=8.0):
    dims = [width] * (n_layers - 1) + [f_out]
    return GcnnConfig(f_in=f_in, dims=dims, filter_degree=filter_degree,
                      out_bound=out_bound)


def init_params(config, rng):
    """Uniform fan-in initialization; biases zero; identity batchnorm."""
    params = {
        "bn_gamma": np.ones(config.f_in),
        "bn_beta": np.zeros(config.f_in),
        "bn_run_mean": np.zeros(config.f_in),
        "bn_run_var": np.ones(config.f_in),
    }
    dims = config.layer_dims()
    n_taps = config.filter_degree + 1
    for layer in range(config.n_layers):
        fan_in = dims[layer] * n_taps
        bound = 1.0 / np.sqrt(fan_in)
        for f in range(n_taps):
            params[f"theta_{layer}_{f}"] = rng.uniform(
                -bound, bound, size=(dims[layer], dims[layer + 1]))
        params[f"bias_{layer}"] = np.zeros(dims[layer + 1])
    return params


def zero_like_params(params):
    return {k: np.zeros_like(v) for k, v in params.items()
            if k not in BN_STATE_KEYS}


def _exact_matmul(a, b):
    """Matrix product with correctly rounded inner sums.

    Reductions over the user axis must be independent of summation order so
    that permutation equivariance holds bit-for-bit, not just to rounding.
    Only used for the small I x I mixing products.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.empty((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        prods = a[i][:, None] * b
        for l in range(b.shape[1]):
            out[i, l] = math.fsum(prods[:, l])
    return out


def _exact_column_stats(x):
    """Per-column mean and biased variance, summation-order invariant."""
    n, f = x.shape
    mean = np.array([math.fsum(x[:, l]) for l in range(f)]) / n
    var = np.array([math.fsum((x[:, l] - mean[l]) ** 2) for l in range(f)]) / n
    return mean, var


# ---------------------------------------------------------------------------
# Input normalization
# ---------------------------------------------------------------------------

def input_normalize(z0, params, training, update_running=True,
                    eps=BN_EPS, momentum=BN_MOMENTUM):
    """Batch normalization over rows with learnable affine transform.

    Training mode uses batch statistics (falling back to running statistics
    for batches smaller than 2) and updates the running estimates in place.
    Returns (normalized, cache).
    """
    z0 = np.asarray(z0, dtype=float)
    n = z0.shape[0]
    use_batch = training and n >= 2
    if use_batch:
        mean, var = _exact_column_stats(z0)
        if update_running:
            params["bn_run_mean"][...] = ((1 - momentum) * params["bn_run_mean"]
                                          + momentum * mean)
            params["bn_run_var"][...] = ((1 - momentum) * params["bn_run_var"]
                                         + momentum * var)
    else:
        mean = params["bn_run_mean"]
        var = params["bn_run_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (z0 - mean) * inv_std
    out = params["bn_gamma"] * xhat + params["bn_beta"]
    cache = {"xhat": xhat, "inv_std": inv_std, "use_batch": use_batch,
             "gamma": params["bn_gamma"].copy(), "n": n}
    return out, cache


def input_normalize_backward(cache, dy):
    """Gradients of input_normalize: returns (dz0, dgamma, dbeta)."""
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * cache["gamma"]
    if cache["use_batch"]:
        n = cache["n"]
        dz0 = (inv_std / n) * (n * dxhat - np.sum(dxhat, axis=0)
                               - xhat * np.sum(dxhat * xhat, axis=0))
    else:
        dz0 = dxhat * inv_std
    return dz0, dgamma, dbeta


# ---------------------------------------------------------------------------
# GCNN forward / backward
# ---------------------------------------------------------------------------

def _out_activation(x, beta):
    t = np.tanh(x / beta)
    y = np.exp(beta * t)
    return y, y * (1.0 - t * t)


def gcnn_forward(z0, shift, params, config, training=False,
                 bn_mode="internal", update_running=True):
    """Forward pass. bn_mode 'internal' normalizes z0 here; 'skip' assumes
    the caller already normalized (used for minibatch-shared statistics)."""
    z0 = np.asarray(z0, dtype=float)
    n_i = z0.shape[0]
    if z0.shape[1] != config.f_in:
        raise ValueError("feature dimension mismatch")
    n_taps = config.filter_degree + 1
    sp = [np.eye(n_i)]
    for _ in range(1, n_taps):
        sp.append(_exact_matmul(sp[-1], shift))
    if bn_mode == "internal":
        z, bn_cache = input_normalize(z0, params, training,
                                      update_running=update_running)
    elif bn_mode == "skip":
        z, bn_cache = z0, None
    else:
        raise ValueError("bn_mode must be 'internal' or 'skip'")
    zs = [z]
    dacts = []
    for layer in range(config.n_layers):
        pre = np.tile(params[f"bias_{layer}"], (n_i, 1)).astype(float)
        for f in range(n_taps):
            mixed = zs[-1] if f == 0 else _exact_matmul(sp[f], zs[-1])
            pre += mixed @ params[f"theta_{layer}_{f}"]
        if layer < config.n_layers - 1:
            zs.append(np.maximum(pre, 0.0))
            dacts.append((pre > 0).astype(float))
        else:
            y, dy = _out_activation(pre, config.out_bound)
            zs.append(y)
            dacts.append(dy)
    thetas = {(layer, f): params[f"theta_{layer}_{f}"].copy()
              for layer in range(config.n_layers) for f in range(n_taps)}
    cache = {"zs": zs, "dacts": dacts, "sp": sp, "config": config,
             "bn_cache": bn_cache, "n_taps": n_taps, "thetas": thetas}
    return zs[-1], cache


def gcnn_backward(cache, dz_out):
    """Reverse pass; returns (param gradients, gradient w.r.t. the z0 input)."""
    config = cache["config"]
    sp = cache["sp"]
    n_taps = cache["n_taps"]
    grads = {}
    dz = np.asarray(dz_out, dtype=float)
    for layer in range(config.n_layers - 1, -1, -1):
        dpre = dz * cache["dacts"][layer]
        z_in = cache["zs"][layer]
        grads[f"bias_{layer}"] = np.sum(dpre, axis=0)
        dz = np.zeros_like(z_in)
        for f in range(n_taps):
            sz = sp[f] @ z_in
            grads[f"theta_{layer}_{f}"] = sz.T @ dpre
            dz += sp[f].T @ dpre @ cache["thetas"][(layer, f)].T
    if cache["bn_cache"] is not None:
        dz0, dgamma, dbeta = input_normalize_backward(cache["bn_cache"], dz)
        grads["bn_gamma"] = dgamma
        grads["bn_beta"] = dbeta
    else:
        dz0 = dz
        grads["bn_gamma"] = np.zeros_like(cache["zs"][0][0])
        grads["bn_beta"] = np.zeros_like(cache["zs"][0][0])
    return grads, dz0


# ---------------------------------------------------------------------------
# Optimizer and clipping
# ---------------------------------------------------------------------------

def make_optimizer_state():
    return {"m": {}, "v": {}, "t": 0, "skipped": 0}


def adam_update(params, grads, state, lr, betas=(0.9, 0.99), eps=1e-8,
                weight_decay=0.0):
    """Adam with decoupled weight decay; skips non-finite gradient steps."""
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state["skipped"] += 1
        return params
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for k, g in grads.items():
        if k in BN_STATE_KEYS or k not in params:
            continue
        if k not in state["m"]:
            state["m"][k] = np.zeros_like(params[k])
            state["v"][k] = np.zeros_like(params[k])
        state["m"][k] = b1 * state["m"][k] + (1 - b1) * g
        state["v"][k] = b2 * state["v"][k] + (1 - b2) * g * g
        mhat = state["m"][k] / (1 - b1 ** t)
        vhat = state["v"][k] / (1 - b2 ** t)
        params[k] = params[k] * (1 - lr * weight_decay) \
            - lr * mhat / (np.sqrt(vhat) + eps)
    return params


def grad_inf_norm(grads):
    vals = [np.max(np.abs(g)) for g in grads.values() if g.size]
    return float(max(vals)) if vals else 0.0


def clip_gradient_adaptive(grads, history, quantile=0.9, maxlen=1000):
    """Clip the gradient's inf-norm to the history quantile; record the norm.

    `history` is a mutable list managed here as a bounded ring buffer. The
    pre-clip norm is always appended. Returns the (possibly rescaled) grads.
    """
    norm = grad_inf_norm(grads)
    if history:
        bound = float(np.quantile(np.asarray(history), quantile,
                                  method="linear"))
        if norm > bound > 0:
            scale = bound / norm
            grads = {k: g * scale for k, g in grads.items()}
    history.append(norm)
    if len(history) > maxlen:
        del history[:len(history) - maxlen]
    return grads


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params, config, meta=None):
    """Binary checkpoint: length-prefixed JSON header + float64 LE blob.

    Parameter arrays are concatenated in sorted key order, row-major.
    """
    keys = sorted(params.keys())
    header = {
        "config": {"f_in": config.f_in, "dims": list(config.dims),
                   "filter_degree": config.filter_degree,
                   "out_bound": config.out_bound},
        "params": [{"name": k, "shape": list(np.shape(params[k]))}
                   for k in keys],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(params[k], dtype="<f8").tobytes()
                    for k in keys)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        blob = f.read()
    config = GcnnConfig(**header["config"])
    params = {}
    off = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob[off:off + 8 * n], dtype="<f8").reshape(shape)
        params[entry["name"]] = arr.copy()
        off += 8 * n
    return params, config, header["meta"]
