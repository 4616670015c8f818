"""Sequential prior-regularised training.

Rule-compliance tasks (multilabel BCE) produce a Laplace posterior that is
handed on as the prior of the next task; the final task fits ground-truth
anchor classes with categorical cross-entropy.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as enc
from . import gp_head as gp
from .model import Model, ModelConfig, bind_flat, hidden, init_model, loss_and_grad, param_slices, standardizer, task_loss

MODES = ("chained", "unified", "uninformed")


class DivergenceError(FloatingPointError):
    def __init__(self, step: int, task: str = ""):
        super().__init__(f"non-finite loss at step {step}" + (f" of task {task!r}" if task else ""))
        self.step = step


class MissingLabelsError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str  # "rules" | "ground_truth"
    epochs_max: int = 100
    patience: int = 15
    learning_rate: float = 0.02
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in ("rules", "ground_truth"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.epochs_max < 1 or self.patience < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError(f"invalid task settings {self}")

    @property
    def loss(self) -> str:
        return "bce" if self.kind == "rules" else "ce"


@dataclass(frozen=True)
class RegularizationConfig:
    lam_gp: float = 1.0
    gamma_gp: float = 0.5
    lam_nn: float = 0.625

    def __post_init__(self):
        if self.lam_gp < 0 or self.lam_nn < 0 or not 0 < self.gamma_gp <= 1:
            raise ValueError(f"invalid regularization {self}")


@dataclass(eq=False)
class PriorState:
    theta_nn: np.ndarray
    theta_g: np.ndarray  # (K, m)
    precision: np.ndarray  # (K, m, m) or (1, m, m)
    provenance: tuple = ()
    identity: bool = False  # precision is exactly I (enables a cheaper penalty)

    @property
    def informed(self) -> bool:
        return len(self.provenance) > 0


def uninformed_prior(model: Model) -> PriorState:
    """Zero GP means, identity precision, encoder mean at its current weights."""
    m = model.config.m
    return PriorState(enc.flatten(model.encoder), np.zeros_like(model.theta), np.eye(m)[None], (), True)


@dataclass
class TrainLog:
    task: str
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    trace: list = field(default_factory=list)  # per-step total objective
    best_epoch: int = -1
    steps: int = 0


def _penalty(model: Model, prior: PriorState, reg: RegularizationConfig, slices):
    value = 0.0
    grad = None
    if reg.lam_gp > 0:
        if prior.identity:
            diff = model.theta - prior.theta_g
            pen, g_th = 0.5 * reg.lam_gp * float(np.sum(diff * diff)), reg.lam_gp * diff
        else:
            pen, g_th = gp.gp_prior_penalty(gp.GPOutputWeights(model.theta, prior.theta_g, prior.precision), reg.lam_gp)
        value += pen
        grad = np.zeros(slices["het"].stop)
        grad[slices["theta"]] = g_th.ravel()
    if reg.lam_nn > 0:
        pen, g_nn = enc.l2_bind_penalty(model.encoder, prior.theta_nn, reg.lam_nn)
        value += pen
        if grad is None:
            grad = np.zeros(slices["het"].stop)
        grad[slices["encoder"]] = g_nn
    return value, grad


def train_task(
    model: Model,
    task: TaskSpec,
    prior: PriorState,
    reg: RegularizationConfig,
    X: np.ndarray,
    target: np.ndarray,
    X_val: np.ndarray | None = None,
    target_val: np.ndarray | None = None,
    seed: int = 0,
    stream: int = 0,
    prior_terms: bool = True,
    on_step=None,
):
    """Train one task starting from ``prior``; returns ``(model, posterior_prior, log)``.

    The input model is not modified. ``prior_terms=False`` removes the penalty
    code path entirely (used to check that zero weights are a true no-op).
    ``on_step(step, model)`` is called after every optimiser step.
    """
    X = np.asarray(X, dtype=np.float64)
    target = np.asarray(target)
    if task.kind == "rules":
        if target.ndim != 2 or target.shape[1] != model.K:
            raise ValueError(f"rule task needs an (N, {model.K}) label matrix, got {target.shape}")
    elif target.ndim != 1:
        raise ValueError("ground-truth task needs a vector of class indices")
    if len(X) != len(target):
        raise ValueError("inputs and labels differ in length")
    if prior.theta_g.shape != model.theta.shape:
        raise ValueError(f"prior GP weights {prior.theta_g.shape} do not match model {model.theta.shape}")

    model = model.copy()
    model.posterior = None
    enc.assign(model.encoder, prior.theta_nn)
    model.theta = prior.theta_g.copy()
    slices = param_slices(model)
    w_het = model.config.w_het if model.het.rank > 0 else 0.0
    rng = np.random.default_rng([int(seed), 100 + int(stream)])
    log = TrainLog(task.name)

    params = bind_flat(model)
    velocity = np.zeros_like(params)
    has_val = X_val is not None and len(X_val) > 0
    best_val = np.inf
    best_params = params.copy()
    since_best = 0
    step = 0
    N = len(X)
    for epoch in range(task.epochs_max):
        perm = rng.permutation(N)
        losses = []
        for start in range(0, N, task.batch_size):
            idx = perm[start : start + task.batch_size]
            eps = gp.draw_noise(rng, (len(idx),), model.K, model.het.rank) if w_het > 0 else None
            value, grad = loss_and_grad(model, X[idx], target[idx], task.loss, w_het, eps)
            if prior_terms:
                pen, pgrad = _penalty(model, prior, reg, slices)
                value += pen
                if pgrad is not None:
                    grad = grad + pgrad
            # a sum is finite only if every entry is (an overflowing sum also counts as divergence)
            if not np.isfinite(value) or not np.isfinite(grad.sum()):
                raise DivergenceError(step, task.name)
            velocity *= task.momentum
            velocity += grad
            params -= task.learning_rate * velocity
            enc.spectral_normalize(model.encoder)
            log.trace.append(value)
            losses.append(value)
            step += 1
            if on_step is not None:
                on_step(step, model)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss = task_loss(model, X_val, target_val, task.loss) if has_val else train_loss
        if not np.isfinite(val_loss):
            raise DivergenceError(step, task.name)
        log.rows.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_params = params.copy()
            log.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= task.patience:
                break
    log.steps = step
    params[...] = best_params

    phi = gp.rff_features(model.rff, _hidden(model, X))
    link = "sigmoid" if task.loss == "bce" else "softmax"
    gamma = reg.gamma_gp if prior.informed else 1.0
    precision = gp.laplace_precision(model.theta, phi, prior.precision, gamma, link, model.config.shared_precision)
    model.posterior = gp.LaplacePosterior(model.theta.copy(), precision)
    provenance = prior.provenance + (task.name,)
    model.meta = {"provenance": list(provenance)}
    posterior = PriorState(enc.flatten(model.encoder), model.theta.copy(), precision, provenance, False)
    return model, posterior, log


def _hidden(model, X):
    return hidden(model, X) if len(X) else np.zeros((0, model.config.d_h))


# ---------------------------------------------------------------------------
# two-stage protocol


@dataclass(frozen=True)
class TwoStageConfig:
    mode: str = "unified"
    rules: tuple = ()
    reg: RegularizationConfig = RegularizationConfig()
    rule_task: TaskSpec = TaskSpec("rules", "rules")
    gt_task: TaskSpec = TaskSpec("ground_truth", "ground_truth")
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "rules", tuple(self.rules))
        if self.mode == "chained" and not self.rules:
            raise ValueError("chained mode needs an explicit rule order")
        if self.mode == "unified" and not self.rules:
            raise ValueError("unified mode needs at least one rule")


@dataclass(eq=False)
class RuleData:
    """Rule-compliance targets for the rule stage.

    ``matrices`` maps rule name to ``(train (N, K), val (N_val, K))`` boolean
    matrices aligned with ``X`` and ``X_val``.
    """

    X: np.ndarray
    X_val: np.ndarray
    matrices: dict


def rule_tasks(config: TwoStageConfig, data: RuleData | None):
    """``[(task_name, train_target, val_target)]`` for the configured mode."""
    if config.mode == "uninformed":
        return []
    if data is None:
        raise MissingLabelsError(f"{config.mode} mode needs rule-compliance matrices")
    missing = [r for r in config.rules if r not in data.matrices]
    if missing:
        raise MissingLabelsError(f"no compliance matrix for rules {missing}")
    if config.mode == "chained":
        return [(f"rule:{r}", data.matrices[r][0], data.matrices[r][1]) for r in config.rules]
    tr = np.logical_and.reduce([np.asarray(data.matrices[r][0], dtype=bool) for r in config.rules])
    va = np.logical_and.reduce([np.asarray(data.matrices[r][1], dtype=bool) for r in config.rules])
    return [("rule:" + "+".join(config.rules), tr, va)]


def run_rule_stage(config: TwoStageConfig, data: RuleData | None, d: int, K: int, seed: int, x_stats=None):
    """Stage 1. Returns ``(model, prior, logs)``; for uninformed mode the prior is the initial one."""
    tasks = rule_tasks(config, data)
    if x_stats is None:
        x_stats = standardizer(data.X) if tasks else None
    mean, std = x_stats if x_stats is not None else (None, None)
    model = init_model(d, K, config.model, seed, mean, std)
    prior = uninformed_prior(model)
    logs = []
    for i, (name, tr, va) in enumerate(tasks):
        spec = replace(config.rule_task, name=name)
        model, prior, log = train_task(model, spec, prior, config.reg, data.X, tr.astype(np.float64), data.X_val, va.astype(np.float64), seed, i)
        logs.append(log)
    return model, prior, logs


def run_ground_truth_stage(config: TwoStageConfig, model: Model, prior: PriorState, X, y, X_val, y_val, seed: int, stream: int):
    return train_task(model, config.gt_task, prior, config.reg, X, y, X_val, y_val, seed, stream)


def run_two_stage(config: TwoStageConfig, X, y, X_val, y_val, rule_data: RuleData | None, K: int, seed: int, x_stats=None):
    """Both stages end to end; returns ``(model, posterior_prior, logs)``."""
    d = np.asarray(X).shape[1]
    if x_stats is None and config.mode == "uninformed":
        x_stats = standardizer(X)
    model, prior, logs = run_rule_stage(config, rule_data, d, K, seed, x_stats)
    n_rule = len(logs)
    model, post, log = run_ground_truth_stage(config, model, prior, X, y, X_val, y_val, seed, n_rule)
    return model, post, logs + [log]
