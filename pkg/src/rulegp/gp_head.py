"""Heteroscedastic random-feature GP output layer.

The layer maps hidden features ``h`` to random Fourier features
``phi = sqrt(2/m) cos(W h + b)``, per-class logits ``g = theta_g phi`` and a
sample-specific low-rank-plus-diagonal logit noise ``V eps1 + d * eps2``.
Epistemic uncertainty lives in a per-class Laplace posterior over ``theta_g``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla
from scipy.special import expit, log_softmax, softmax


class PosteriorNotPositiveDefinite(np.linalg.LinAlgError):
    pass


@dataclass(eq=False)
class RFFProjection:
    W: np.ndarray  # (m, d_h)
    b: np.ndarray  # (m,)
    sigma: float = 1.0

    @property
    def m(self) -> int:
        return self.W.shape[0]


def make_rff(d_h: int, m: int, sigma: float, rng: np.random.Generator) -> RFFProjection:
    if m < 1 or sigma <= 0:
        raise ValueError("need m >= 1 and sigma > 0")
    W = rng.normal(0.0, 1.0 / sigma, size=(m, d_h))
    b = rng.uniform(0.0, 2.0 * np.pi, size=m)
    return RFFProjection(W, b, float(sigma))


def rff_features(proj: RFFProjection, h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return np.sqrt(2.0 / proj.m) * np.cos(h @ proj.W.T + proj.b)


def rff_backward(proj: RFFProjection, h: np.ndarray, dphi: np.ndarray) -> np.ndarray:
    z = h @ proj.W.T + proj.b
    return (-np.sqrt(2.0 / proj.m) * np.sin(z) * dphi) @ proj.W


@dataclass(eq=False)
class GPOutputWeights:
    theta: np.ndarray  # (K, m)
    prior_mean: np.ndarray  # (K, m)
    prior_precision: np.ndarray  # (K, m, m) or (1, m, m) when shared

    @property
    def K(self) -> int:
        return self.theta.shape[0]


def logits(weights, phi: np.ndarray) -> np.ndarray:
    theta = weights.theta if isinstance(weights, GPOutputWeights) else weights
    return np.asarray(phi) @ theta.T


def gp_prior_penalty(weights: GPOutputWeights, lam: float):
    """``(lam/2) sum_c (theta_c - mean_c)^T P_c (theta_c - mean_c)`` and its gradient."""
    if weights.theta.shape != weights.prior_mean.shape:
        raise ValueError(f"theta {weights.theta.shape} vs prior mean {weights.prior_mean.shape}")
    P = weights.prior_precision
    if P.shape[-2:] != (weights.theta.shape[1],) * 2 or P.shape[0] not in (1, weights.K):
        raise ValueError(f"prior precision has shape {P.shape}")
    diff = weights.theta - weights.prior_mean
    Pd = np.matmul(P, diff[:, :, None])[:, :, 0]
    return 0.5 * lam * float(np.sum(diff * Pd)), lam * Pd


@dataclass(eq=False)
class HetNoiseHead:
    A_V: np.ndarray  # (K*R, d_h)
    c_V: np.ndarray  # (K*R,)
    A_d: np.ndarray  # (K, d_h)
    c_d: np.ndarray  # (K,)
    rank: int

    @property
    def K(self) -> int:
        return self.A_d.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.A_V, self.c_V, self.A_d, self.c_d]

    def copy(self) -> "HetNoiseHead":
        return HetNoiseHead(self.A_V.copy(), self.c_V.copy(), self.A_d.copy(), self.c_d.copy(), self.rank)


def init_het_head(d_h: int, K: int, rank: int, rng: np.random.Generator, scale: float = 0.1) -> HetNoiseHead:
    return HetNoiseHead(
        rng.normal(0.0, scale / np.sqrt(d_h), size=(K * rank, d_h)),
        np.zeros(K * rank),
        rng.normal(0.0, scale / np.sqrt(d_h), size=(K, d_h)),
        np.zeros(K),
        int(rank),
    )


def softplus(x):
    return np.logaddexp(0.0, x)


def het_outputs(head: HetNoiseHead, h: np.ndarray):
    """Factor loadings ``V`` (B, K, R) and diagonal scales ``d`` (B, K)."""
    h = np.atleast_2d(h)
    B = h.shape[0]
    V = (h @ head.A_V.T + head.c_V).reshape(B, head.K, head.rank)
    d = softplus(h @ head.A_d.T + head.c_d)
    return V, d


def het_backward(head: HetNoiseHead, h: np.ndarray, dV: np.ndarray, dd: np.ndarray):
    """Gradients w.r.t. head parameters (same order as ``params()``) and ``h``."""
    B = h.shape[0]
    dVf = dV.reshape(B, -1)
    zd = h @ head.A_d.T + head.c_d
    dz = dd * expit(zd)
    grads = [dVf.T @ h, dVf.sum(axis=0), dz.T @ h, dz.sum(axis=0)]
    dh = dVf @ head.A_V + dz @ head.A_d
    return grads, dh


def draw_noise(rng: np.random.Generator, shape_lead, K: int, R: int):
    eps1 = rng.standard_normal(tuple(shape_lead) + (R,))
    eps2 = rng.standard_normal(tuple(shape_lead) + (K,))
    return eps1, eps2


def sample_logits(g, V, d, w_het: float, rng: np.random.Generator | None = None, eps=None):
    """Reparameterised draw ``u = g + w_het (V eps1 + d * eps2)``.

    Either pass ``rng`` or fixed ``eps=(eps1, eps2)``.
    """
    g = np.asarray(g, dtype=np.float64)
    if w_het == 0.0:
        return g.copy()
    V = np.asarray(V, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if eps is None:
        eps = draw_noise(rng, g.shape[:-1], g.shape[-1], V.shape[-1])
    eps1, eps2 = eps
    return g + w_het * (np.einsum("...kr,...r->...k", V, eps1) + d * eps2)


def sample_logits_backward(du, w_het: float, eps):
    """Gradients of a scalar w.r.t. ``g``, ``V`` and ``d`` given ``dL/du``."""
    eps1, eps2 = eps
    dg = du
    dV = w_het * du[..., :, None] * eps1[..., None, :]
    dd = w_het * du * eps2
    return dg, dV, dd


# ---------------------------------------------------------------------------
# Laplace posterior


@dataclass(eq=False)
class LaplacePosterior:
    theta_map: np.ndarray  # (K, m)
    precision: np.ndarray  # (K, m, m) or (1, m, m)
    _chol: np.ndarray | None = None

    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            out = np.empty_like(self.precision)
            for c in range(self.precision.shape[0]):
                try:
                    out[c] = np.linalg.cholesky(self.precision[c])
                except np.linalg.LinAlgError:
                    raise PosteriorNotPositiveDefinite(f"precision of class {c} is not positive definite") from None
            self._chol = out
        return self._chol


def link_probabilities(g: np.ndarray, link: str) -> np.ndarray:
    if link == "softmax":
        return softmax(g, axis=-1)
    if link == "sigmoid":
        return expit(g)
    raise ValueError(f"unknown link {link!r}")


def laplace_precision(theta_map, phi, prior_precision, gamma: float = 1.0, link: str = "softmax", shared: bool = False) -> np.ndarray:
    """``gamma * prior_c + sum_i p_ic (1 - p_ic) phi_i phi_i^T`` for every class.

    ``p`` is evaluated at the noise-free MAP logits. With ``shared=True`` the
    per-class curvature terms are summed into one matrix.
    """
    phi = np.asarray(phi, dtype=np.float64)
    K, m = theta_map.shape
    prior_precision = np.asarray(prior_precision, dtype=np.float64)
    if prior_precision.ndim == 2:
        prior_precision = prior_precision[None]
    for c in range(prior_precision.shape[0]):
        if not np.allclose(prior_precision[c], prior_precision[c].T):
            raise PosteriorNotPositiveDefinite(f"prior precision of class {c} is not symmetric")
        try:
            np.linalg.cholesky(prior_precision[c])
        except np.linalg.LinAlgError:
            raise PosteriorNotPositiveDefinite(f"prior precision of class {c} is not positive definite") from None
    p = link_probabilities(phi @ theta_map.T, link) if len(phi) else np.zeros((0, K))
    w = p * (1.0 - p)
    if shared:
        prior = prior_precision.sum(axis=0) if prior_precision.shape[0] > 1 else prior_precision[0]
        out = gamma * prior + (phi * w.sum(axis=1, keepdims=True)).T @ phi
        return 0.5 * (out + out.T)[None]
    out = np.empty((K, m, m))
    for c in range(K):
        P = prior_precision[c if prior_precision.shape[0] > 1 else 0]
        A = gamma * P + (phi * w[:, c : c + 1]).T @ phi
        out[c] = 0.5 * (A + A.T)
    return out


def laplace_update(theta_map, phi, prior_precision=None, gamma: float = 1.0, link: str = "softmax", shared: bool = False) -> LaplacePosterior:
    K, m = theta_map.shape
    if prior_precision is None:
        prior_precision = np.eye(m)[None]
    return LaplacePosterior(theta_map.copy(), laplace_precision(theta_map, phi, prior_precision, gamma, link, shared))


# ---------------------------------------------------------------------------
# predictive distribution


@dataclass(frozen=True)
class InferenceConfig:
    S: int = 16
    tau: float = 20.0
    w_sngp: float = 0.1
    w_het: float = 0.2

    def __post_init__(self):
        if self.S < 1 or self.tau <= 0 or self.w_sngp < 0 or self.w_het < 0:
            raise ValueError(f"invalid inference config {self}")


def draw_weights(posterior: LaplacePosterior, S: int, w_sngp: float, rng: np.random.Generator) -> np.ndarray:
    """``S`` draws of ``theta_g`` from ``N(theta*, w_sngp * precision^-1)``."""
    K, m = posterior.theta_map.shape
    z = rng.standard_normal((S, K, m))
    if w_sngp == 0.0:
        return np.broadcast_to(posterior.theta_map, (S, K, m)).copy()
    L = posterior.cholesky()
    out = np.empty((S, K, m))
    scale = np.sqrt(w_sngp)
    for c in range(K):
        Lc = L[c if L.shape[0] > 1 else 0]
        # L^-T z has covariance (L L^T)^-1
        out[:, c, :] = posterior.theta_map[c] + scale * sla.solve_triangular(Lc, z[:, c, :].T, lower=True, trans="T").T
    return out


def predictive_from_features(phi, V, d, posterior: LaplacePosterior, config: InferenceConfig, seed: int, indices=None) -> np.ndarray:
    """MC predictive ``(1/S) sum_s softmax(u_s / tau)`` for each row of ``phi``.

    Weight draws come from one stream keyed on ``seed``; the logit noise of
    sample ``i`` comes from its own stream keyed on ``(seed, indices[i])`` so
    any evaluation order gives identical results.
    """
    phi = np.atleast_2d(phi)
    B = phi.shape[0]
    K = posterior.theta_map.shape[0]
    if indices is None:
        indices = np.arange(B)
    thetas = draw_weights(posterior, config.S, config.w_sngp, np.random.default_rng([int(seed), 0]))
    g = np.einsum("bm,skm->bsk", phi, thetas)  # (B, S, K)
    if config.w_het > 0 and V is not None and V.shape[-1] > 0:
        R = V.shape[-1]
        u = np.empty_like(g)
        for i in range(B):
            rng = np.random.default_rng([int(seed), 1, int(indices[i])])
            eps = draw_noise(rng, (config.S,), K, R)
            u[i] = sample_logits(g[i], np.broadcast_to(V[i], (config.S, K, R)), np.broadcast_to(d[i], (config.S, K)), config.w_het, eps=eps)
    else:
        u = g
    p = softmax(u / config.tau, axis=-1).mean(axis=1)
    return p / p.sum(axis=1, keepdims=True)


def cross_entropy(g: np.ndarray, y: np.ndarray):
    """Mean categorical CE and its gradient w.r.t. logits."""
    B = g.shape[0]
    lsm = log_softmax(g, axis=1)
    loss = -float(np.mean(lsm[np.arange(B), y]))
    grad = np.exp(lsm)
    grad[np.arange(B), y] -= 1.0
    return loss, grad / B


def binary_cross_entropy(g: np.ndarray, Y: np.ndarray):
    """Mean over samples of the summed per-anchor BCE, and its gradient."""
    B = g.shape[0]
    Y = Y.astype(np.float64)
    loss = float(np.sum(softplus(g) - Y * g)) / B
    return loss, (expit(g) - Y) / B
