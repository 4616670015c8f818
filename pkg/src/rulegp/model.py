"""Full classifier: input standardisation, encoder, GP head and noise head."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from . import gp_head as gp

CHECKPOINT_MAGIC = b"RGPCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (64, 64)
    d_h: int = 32
    m: int = 256
    rff_sigma: float = 1.0
    rank: int = 2
    bound: float = enc.SPECTRAL_BOUND
    w_het: float = 0.2  # noise weight during training
    shared_precision: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.m < 1 or self.d_h < 1 or self.rank < 0 or self.rff_sigma <= 0 or self.bound <= 0 or self.w_het < 0:
            raise ValueError(f"invalid model config {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(eq=False)
class Model:
    config: ModelConfig
    encoder: enc.EncoderState
    rff: gp.RFFProjection
    theta: np.ndarray  # (K, m)
    het: gp.HetNoiseHead
    x_mean: np.ndarray
    x_std: np.ndarray
    posterior: gp.LaplacePosterior | None = None
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.theta.shape[0]

    @property
    def in_dim(self) -> int:
        return self.encoder.in_dim

    def copy(self) -> "Model":
        post = None
        if self.posterior is not None:
            post = gp.LaplacePosterior(self.posterior.theta_map.copy(), self.posterior.precision.copy())
        return Model(
            self.config,
            self.encoder.copy(),
            self.rff,
            self.theta.copy(),
            self.het.copy(),
            self.x_mean.copy(),
            self.x_std.copy(),
            post,
            dict(self.meta),
        )


def init_model(d: int, K: int, config: ModelConfig, seed: int, x_mean=None, x_std=None) -> Model:
    """Seeded initialisation; each component draws from its own substream."""
    ss = np.random.SeedSequence([int(seed), 7])
    r_enc, r_rff, r_het = (np.random.default_rng(s) for s in ss.spawn(3))
    encoder = enc.init_encoder((d, *config.hidden, config.d_h), r_enc, config.bound)
    rff = gp.make_rff(config.d_h, config.m, config.rff_sigma, r_rff)
    het = gp.init_het_head(config.d_h, K, config.rank, r_het)
    x_mean = np.zeros(d) if x_mean is None else np.asarray(x_mean, dtype=np.float64)
    x_std = np.ones(d) if x_std is None else np.asarray(x_std, dtype=np.float64)
    return Model(config, encoder, rff, np.zeros((K, config.m)), het, x_mean, x_std)


def standardizer(X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
    std = X.std(axis=0) if len(X) else np.ones(X.shape[1])
    return mean, np.where(std > 1e-8, std, 1.0)


def hidden(model: Model, X: np.ndarray, return_cache: bool = False):
    Z = (np.atleast_2d(X) - model.x_mean) / model.x_std
    return enc.forward(model.encoder, Z, return_cache=return_cache)


def features(model: Model, X: np.ndarray):
    """Hidden features, random features and noise-head outputs."""
    h = hidden(model, X)
    V, d = gp.het_outputs(model.het, h)
    return h, gp.rff_features(model.rff, h), V, d


def map_logits(model: Model, X: np.ndarray) -> np.ndarray:
    return gp.logits(model.theta, gp.rff_features(model.rff, hidden(model, X)))


# ---------------------------------------------------------------------------
# flat parameter handling for the optimiser


def get_params(model: Model) -> np.ndarray:
    parts = [enc.flatten(model.encoder), model.theta.ravel()]
    parts += [p.ravel() for p in model.het.params()]
    return np.concatenate(parts)


def set_params(model: Model, flat: np.ndarray) -> None:
    n_enc = model.encoder.n_params()
    enc.assign(model.encoder, flat[:n_enc])
    i = n_enc
    model.theta[...] = flat[i : i + model.theta.size].reshape(model.theta.shape)
    i += model.theta.size
    for p in model.het.params():
        p[...] = flat[i : i + p.size].reshape(p.shape)
        i += p.size
    if i != flat.size:
        raise ValueError(f"parameter vector has {flat.size} entries, model needs {i}")


def bind_flat(model: Model) -> np.ndarray:
    """Move every trainable array into one flat buffer and return it.

    Afterwards the model's arrays are views of the buffer, so in-place updates
    of the buffer update the model without copying.
    """
    flat = get_params(model)
    i = 0

    def view(shape):
        nonlocal i
        n = int(np.prod(shape))
        v = flat[i : i + n].reshape(shape)
        i += n
        return v

    for l in model.encoder.layers:
        l.weight = view(l.weight.shape)
        l.bias = view(l.bias.shape)
    model.theta = view(model.theta.shape)
    h = model.het
    h.A_V, h.c_V, h.A_d, h.c_d = (view(p.shape) for p in h.params())
    return flat


def param_slices(model: Model) -> dict:
    n_enc = model.encoder.n_params()
    n_th = model.theta.size
    n_het = sum(p.size for p in model.het.params())
    return {"encoder": slice(0, n_enc), "theta": slice(n_enc, n_enc + n_th), "het": slice(n_enc + n_th, n_enc + n_th + n_het)}


def loss_and_grad(model: Model, X: np.ndarray, target: np.ndarray, loss: str, w_het: float, eps=None):
    """Data loss on one batch and its gradient as a flat vector.

    ``loss`` is ``"ce"`` (``target`` class indices) or ``"bce"`` (``target``
    an (B, K) 0/1 matrix). ``eps`` fixes the noise draw ``(eps1, eps2)``; with
    ``w_het == 0`` it is ignored.
    """
    h, cache = hidden(model, X, return_cache=True)
    zr = h @ model.rff.W.T + model.rff.b
    scale = np.sqrt(2.0 / model.rff.m)
    phi = scale * np.cos(zr)
    g = phi @ model.theta.T
    use_noise = w_het > 0 and model.het.rank > 0 and eps is not None
    if use_noise:
        V, d = gp.het_outputs(model.het, h)
        u = gp.sample_logits(g, V, d, w_het, eps=eps)
    else:
        u = g
    if loss == "ce":
        value, du = gp.cross_entropy(u, np.asarray(target))
    elif loss == "bce":
        value, du = gp.binary_cross_entropy(u, np.asarray(target))
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if use_noise:
        dg, dV, dd = gp.sample_logits_backward(du, w_het, eps)
        het_grads, dh = gp.het_backward(model.het, h, dV, dd)
    else:
        dg = du
        het_grads = [np.zeros_like(p) for p in model.het.params()]
        dh = np.zeros_like(h)
    dtheta = dg.T @ phi
    dphi = dg @ model.theta
    dh = dh + (-scale * np.sin(zr) * dphi) @ model.rff.W
    enc_grads, _ = enc.backward(model.encoder, cache, dh)
    flat = np.concatenate([enc.flatten_grads(enc_grads), dtheta.ravel()] + [gr.ravel() for gr in het_grads])
    return value, flat


def task_loss(model: Model, X: np.ndarray, target: np.ndarray, loss: str) -> float:
    """Noise-free data loss (used for validation)."""
    g = map_logits(model, X)
    if loss == "ce":
        return gp.cross_entropy(g, np.asarray(target))[0]
    return gp.binary_cross_entropy(g, np.asarray(target))[0]


def predict(model: Model, X: np.ndarray, config: gp.InferenceConfig, seed: int, indices=None) -> np.ndarray:
    if model.posterior is None:
        raise ValueError("model has no Laplace posterior; train it first")
    _, phi, V, d = features(model, X)
    if model.het.rank == 0:
        V = None
    return gp.predictive_from_features(phi, V, d, model.posterior, config, seed, indices)


# ---------------------------------------------------------------------------
# checkpoints


def _pack_upper(P: np.ndarray) -> np.ndarray:
    iu = np.triu_indices(P.shape[-1])
    return P[:, iu[0], iu[1]]


def _unpack_upper(packed: np.ndarray, m: int) -> np.ndarray:
    iu = np.triu_indices(m)
    out = np.zeros((packed.shape[0], m, m))
    out[:, iu[0], iu[1]] = packed
    out[:, iu[1], iu[0]] = packed
    return out


def _checkpoint_arrays(model: Model) -> list[tuple[str, np.ndarray]]:
    arrays = []
    for j, layer in enumerate(model.encoder.layers):
        arrays += [(f"layer{j}.weight", layer.weight), (f"layer{j}.bias", layer.bias), (f"layer{j}.u", layer.u), (f"layer{j}.v", layer.v)]
    arrays += [("rff.W", model.rff.W), ("rff.b", model.rff.b), ("theta", model.theta)]
    arrays += [(f"het.{n}", p) for n, p in zip(("A_V", "c_V", "A_d", "c_d"), model.het.params())]
    arrays += [("x_mean", model.x_mean), ("x_std", model.x_std)]
    if model.posterior is not None:
        arrays += [("posterior.theta_map", model.posterior.theta_map), ("posterior.precision_upper", _pack_upper(model.posterior.precision))]
    return arrays


def checkpoint_bytes(model: Model) -> bytes:
    arrays = _checkpoint_arrays(model)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "activations": [l.activation for l in model.encoder.layers],
        "bound": model.encoder.bound,
        "rff_sigma": model.rff.sigma,
        "rank": model.het.rank,
        "meta": model.meta,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(hb)) + hb + body


def save_checkpoint(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a model checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')} is not {CHECKPOINT_VERSION}")
    pos = 16 + n
    arrays = {}
    for name, shape in header["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(raw):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    layers = [
        enc.Layer(arrays[f"layer{j}.weight"], arrays[f"layer{j}.bias"], act, arrays[f"layer{j}.u"], arrays[f"layer{j}.v"])
        for j, act in enumerate(header["activations"])
    ]
    config = ModelConfig.from_dict(header["config"])
    het = gp.HetNoiseHead(arrays["het.A_V"], arrays["het.c_V"], arrays["het.A_d"], arrays["het.c_d"], int(header["rank"]))
    posterior = None
    if "posterior.theta_map" in arrays:
        posterior = gp.LaplacePosterior(arrays["posterior.theta_map"], _unpack_upper(arrays["posterior.precision_upper"], config.m))
    return Model(
        config,
        enc.EncoderState(layers, float(header["bound"])),
        gp.RFFProjection(arrays["rff.W"], arrays["rff.b"], float(header["rff_sigma"])),
        arrays["theta"],
        het,
        arrays["x_mean"],
        arrays["x_std"],
        posterior,
        header.get("meta", {}),
    )
