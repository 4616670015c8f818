"""Spectral-normalised feed-forward feature extractor with manual backprop."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPECTRAL_BOUND = 2.65


@dataclass(eq=False)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"  # "relu" | "identity"
    u: np.ndarray | None = None  # left power-iteration vector (out,)
    v: np.ndarray | None = None  # right power-iteration vector (in,)
    # weights at the last exact norm computation and that norm (not persisted)
    ref_weight: np.ndarray | None = field(default=None, repr=False)
    ref_sigma: float = 0.0


@dataclass(eq=False)
class EncoderState:
    layers: list[Layer]
    bound: float = SPECTRAL_BOUND

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def copy(self) -> "EncoderState":
        return EncoderState(
            [
                Layer(l.weight.copy(), l.bias.copy(), l.activation, None if l.u is None else l.u.copy(), None if l.v is None else l.v.copy())
                for l in self.layers
            ],
            self.bound,
        )

    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)


def init_encoder(sizes, rng: np.random.Generator, bound: float = SPECTRAL_BOUND, final_activation: str = "identity") -> EncoderState:
    """Glorot-uniform weights, zero biases; ReLU on every layer but the last."""
    layers = []
    for j, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        act = final_activation if j == len(sizes) - 2 else "relu"
        u = rng.standard_normal(fan_out)
        v = rng.standard_normal(fan_in)
        layers.append(Layer(W, np.zeros(fan_out), act, u / np.linalg.norm(u), v / np.linalg.norm(v)))
    return EncoderState(layers, bound)


def forward(state: EncoderState, x: np.ndarray, return_cache: bool = False):
    """Map inputs ``(B, d)`` (or ``(d,)``) to hidden features ``(B, d_h)``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None] if single else x
    if a.shape[1] != state.in_dim:
        raise ValueError(f"expected input dimension {state.in_dim}, got {a.shape[1]}")
    cache = [a]
    for layer in state.layers:
        z = a @ layer.weight.T + layer.bias
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
        cache.append(z)
        cache.append(a)
    out = a[0] if single else a
    return (out, cache) if return_cache else out


def backward(state: EncoderState, cache: list, upstream: np.ndarray):
    """Reverse-mode gradients.

    Returns ``(grads, dx)`` with ``grads`` a list of ``(dW, db)`` per layer.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if g.ndim == 1:
        g = g[None]
    grads = [None] * len(state.layers)
    for j in range(len(state.layers) - 1, -1, -1):
        layer = state.layers[j]
        a_in = cache[2 * j]
        z = cache[2 * j + 1]
        if layer.activation == "relu":
            g = g * (z > 0)
        grads[j] = (g.T @ a_in, g.sum(axis=0))
        g = g @ layer.weight
    return grads, g


def flatten(state: EncoderState) -> np.ndarray:
    return np.concatenate([np.concatenate([l.weight.ravel(), l.bias]) for l in state.layers])


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


def assign(state: EncoderState, flat: np.ndarray) -> None:
    """Write a flat parameter vector back into ``state`` in place."""
    i = 0
    for l in state.layers:
        n = l.weight.size
        l.weight[...] = flat[i : i + n].reshape(l.weight.shape)
        i += n
        l.bias[...] = flat[i : i + l.bias.size]
        i += l.bias.size
    if i != flat.size:
        raise ValueError(f"parameter vector has {flat.size} entries, encoder needs {i}")


def power_iteration(W: np.ndarray, u: np.ndarray, v: np.ndarray, n_iter: int = 1):
    for _ in range(n_iter):
        v = W.T @ u
        v /= max(np.linalg.norm(v), 1e-12)
        u = W @ v
        u /= max(np.linalg.norm(u), 1e-12)
    sigma = float(u @ W @ v)
    return sigma, u, v


def _norm_upper_bound(W: np.ndarray) -> float:
    """Cheap certificate: min of Frobenius norm and sqrt(||W||_1 ||W||_inf)."""
    a = np.abs(W)
    return float(min(np.sqrt(np.sum(W * W)), np.sqrt(a.sum(axis=0).max() * a.sum(axis=1).max())))


def exact_spectral_norm(W: np.ndarray) -> float:
    G = W.T @ W if W.shape[0] >= W.shape[1] else W @ W.T
    return float(np.sqrt(max(np.linalg.eigvalsh(G)[-1], 0.0)))


def spectral_normalize(state: EncoderState, n_iter: int = 1, exact_near_bound: bool = True) -> EncoderState:
    """Clip each layer's spectral norm at ``state.bound`` (in place).

    A warm-started power-iteration step tracks the top singular pair. Its
    estimate never exceeds the true value and can lag badly after a large
    update, so with ``exact_near_bound`` the exact norm is used whenever no
    cheap certificate shows the layer is within the bound. Certificates are
    the Frobenius and sqrt(||W||_1 ||W||_inf) bounds and
    ``sigma(W_ref) + ||W - W_ref||_F`` for the weights of the last exact
    computation. The result equals clipping against the exact norm.
    """
    c = state.bound
    for layer in state.layers:
        if layer.u is None or layer.v is None:
            rng = np.random.default_rng(0)
            layer.u = rng.standard_normal(layer.weight.shape[0])
            layer.v = rng.standard_normal(layer.weight.shape[1])
            layer.u /= np.linalg.norm(layer.u)
        sigma, layer.u, layer.v = power_iteration(layer.weight, layer.u, layer.v, n_iter)
        if not exact_near_bound:
            if sigma > c:
                layer.weight *= c / sigma
            continue
        W = layer.weight
        if layer.ref_weight is not None and layer.ref_weight.shape == W.shape:
            drift = W - layer.ref_weight
            if layer.ref_sigma + float(np.sqrt(np.sum(drift * drift))) <= c:
                continue
        if _norm_upper_bound(W) <= c:
            continue
        sigma = max(sigma, exact_spectral_norm(W))
        if sigma > c:
            W *= c / sigma
            sigma = c
        # small slack covers rounding in the eigenvalue solver and the rescale
        layer.ref_weight = W.copy()
        layer.ref_sigma = sigma * (1 + 1e-12)
    return state


def l2_bind_penalty(state: EncoderState, prior_mean: np.ndarray, lam: float):
    """``(lam/2) ||theta - prior||^2`` and its gradient."""
    theta = flatten(state)
    prior_mean = np.asarray(prior_mean, dtype=np.float64)
    if prior_mean.shape != theta.shape:
        raise ValueError(f"prior has shape {prior_mean.shape}, parameters {theta.shape}")
    diff = theta - prior_mean
    return 0.5 * lam * float(diff @ diff), lam * diff

