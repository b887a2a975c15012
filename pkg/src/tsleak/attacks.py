"""Gradient-matching reconstruction of private observation/target windows.

Given a captured client gradient, dummy windows are optimized so that the
gradient they induce (differentiated through the client's own loss,
second-order) matches the capture under a chosen distance, optionally
shaped by sequence regularizers: total variation, periodicity, trend and
learned quantile bounds. A closed-form shortcut recovers the target
window exactly from the output head's gradients when the batch is one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .federation import GradientCapture
from .inversion import QuantileBounds
from .models import Model, ParamVector
from .optim import Adam, LBFGS, LineSearchError

DISTANCES = ("l2", "cosine", "cosine_tv", "l1", "cosine_l1", "cosine_l2")
OPTIMIZERS = ("adam", "lbfgs")
INITS = ("uniform01", "half_constant")


class AttackError(ValueError):
    pass


class OneShotInfeasible(RuntimeError):
    """Closed-form target recovery does not apply to this capture."""


class AttackAborted(RuntimeError):
    """Optimization hit a non-finite loss; carries the partial result."""

    def __init__(self, message: str, partial: "AttackResult | None" = None):
        super().__init__(message)
        self.partial = partial


# -- gradient distances ----------------------------------------------------


def gradient_l2(g_dummy: ad.Node, g_captured: ad.Node) -> ad.Node:
    """Euclidean norm of the gradient difference over the flat vector."""
    _check_lengths(g_dummy, g_captured)
    diff = ad.sub(g_dummy, g_captured)
    return ad.sqrt(ad.sum_(ad.mul(diff, diff)))


def gradient_l1(g_dummy: ad.Node, g_captured: ad.Node) -> ad.Node:
    """Sum of absolute differences."""
    _check_lengths(g_dummy, g_captured)
    return ad.sum_(ad.absolute(ad.sub(g_dummy, g_captured)))


def gradient_cosine(g_dummy: ad.Node, g_captured: ad.Node) -> ad.Node:
    """1 - cos(angle); scale-invariant, blind to magnitude."""
    _check_lengths(g_dummy, g_captured)
    captured_norm = float(np.linalg.norm(g_captured.value))
    if captured_norm == 0.0:
        raise AttackError("captured gradient has zero norm; cosine distance undefined")
    dot = ad.sum_(ad.mul(g_dummy, g_captured))
    dummy_norm = ad.sqrt(ad.sum_(ad.mul(g_dummy, g_dummy)))
    return ad.sub(1.0, ad.div(dot, ad.mul(dummy_norm, captured_norm)))


def _check_lengths(a: ad.Node, b: ad.Node) -> None:
    if a.value.shape != b.value.shape:
        raise AttackError(f"gradient lengths differ: {a.value.shape} vs {b.value.shape}")


def gradient_distance(name: str, g_dummy: ad.Node, g_captured: ad.Node) -> ad.Node:
    if name == "l2":
        return gradient_l2(g_dummy, g_captured)
    if name == "l1":
        return gradient_l1(g_dummy, g_captured)
    if name in ("cosine", "cosine_tv"):
        return gradient_cosine(g_dummy, g_captured)
    if name == "cosine_l1":
        return ad.add(gradient_cosine(g_dummy, g_captured), gradient_l1(g_dummy, g_captured))
    if name == "cosine_l2":
        return ad.add(gradient_cosine(g_dummy, g_captured), gradient_l2(g_dummy, g_captured))
    raise AttackError(f"unknown distance {name!r}")


# -- sequence regularizers --------------------------------------------------


def total_variation(seq: ad.Node) -> ad.Node:
    """Sum of absolute first differences along time, mean over the batch."""
    t = seq.value.shape[1]
    diff = ad.sub(seq[:, 1:t, :], seq[:, 0 : t - 1, :])
    return ad.mean_(ad.sum_(ad.absolute(diff), axis=(1, 2)))


def periodicity_penalty(seq: ad.Node, period: int) -> ad.Node:
    """Mean absolute error between points one period apart.

    Applied to the concatenated observation+target sequence so the cycle
    must hold across the boundary; mean over the batch.
    """
    t = seq.value.shape[1]
    if period >= t:
        raise AttackError(f"period {period} must be shorter than the sequence ({t})")
    if period < 1:
        raise AttackError("period must be >= 1")
    diff = ad.sub(seq[:, 0 : t - period, :], seq[:, period:t, :])
    per_sample = ad.sum_(ad.absolute(diff), axis=(1, 2))
    return ad.mul(ad.mean_(per_sample), 1.0 / (t - period))


def trend_penalty(seq: ad.Node) -> ad.Node:
    """L1 deviation from the per-sample least-squares line, mean over batch."""
    b, t, d = seq.value.shape
    if t < 2:
        raise AttackError("trend needs at least two timesteps")
    s = np.arange(t, dtype=np.float64)
    s_centered = ad.constant((s - s.mean()).reshape(1, t, 1))
    denom = float(((s - s.mean()) ** 2).sum())
    seq_mean = ad.mean_(seq, axis=1, keepdims=True)
    centered = ad.sub(seq, seq_mean)
    slope = ad.mul(ad.sum_(ad.mul(s_centered, centered), axis=1, keepdims=True), 1.0 / denom)
    trend = ad.add(ad.mul(slope, s_centered), seq_mean)
    per_sample = ad.sum_(ad.absolute(ad.sub(seq, trend)), axis=(1, 2))
    return ad.mean_(per_sample)


def bounds_penalty(seq: ad.Node, bounds: np.ndarray, levels: tuple[float, ...]) -> ad.Node:
    """One-sided hinge on symmetric quantile pairs; zero inside the band.

    ``bounds`` is (T, d, Q) with levels sorted ascending and symmetric
    around 0.5; pair q goes with pair Q-1-q.
    """
    q_count = len(levels)
    _validate_levels(levels)
    if bounds.shape[:2] != seq.value.shape[1:] or bounds.shape[2] != q_count:
        raise AttackError(
            f"bounds shape {bounds.shape} does not match sequence {seq.value.shape} / Q={q_count}"
        )
    total = None
    for q in range(q_count // 2):
        lower = ad.constant(bounds[None, :, :, q])
        upper = ad.constant(bounds[None, :, :, q_count - 1 - q])
        viol = ad.add(ad.relu(ad.sub(seq, upper)), ad.relu(ad.sub(lower, seq)))
        per_sample = ad.sum_(viol, axis=(1, 2))
        total = per_sample if total is None else ad.add(total, per_sample)
    return ad.mean_(total)


def _validate_levels(levels: tuple[float, ...]) -> None:
    if len(levels) % 2 != 0 or len(levels) < 2:
        raise AttackError("quantile levels must come in symmetric pairs")
    if list(levels) != sorted(levels):
        raise AttackError(f"quantile levels must be sorted: {levels}")
    for q in range(len(levels) // 2):
        if abs(levels[q] + levels[len(levels) - 1 - q] - 1.0) > 1e-9:
            raise AttackError(f"quantile levels not symmetric around 0.5: {levels}")


# -- configuration / result --------------------------------------------------


@dataclass
class AttackConfig:
    distance: str = "l1"
    lambda_tv_obs: float = 0.0
    lambda_tv_tar: float = 0.0
    lambda_periodicity: float = 0.0
    period: int = 1
    lambda_trend: float = 0.0
    lambda_q_obs: float = 0.0
    lambda_q_tar: float = 0.0
    bounds: QuantileBounds | None = None
    steps: int = 5000
    optimizer: str = "adam"
    learning_rate: float = 0.01
    lr_end: float = 0.001
    init: str = "uniform01"
    clamp01: bool = True
    seed: int = 0
    one_shot_targets: bool = False
    dia_masks: bool = False

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise AttackError(f"unknown distance {self.distance!r}")
        if self.optimizer not in OPTIMIZERS:
            raise AttackError(f"unknown optimizer {self.optimizer!r}")
        if self.init not in INITS:
            raise AttackError(f"unknown init {self.init!r}")
        lambdas = (
            self.lambda_tv_obs,
            self.lambda_tv_tar,
            self.lambda_periodicity,
            self.lambda_trend,
            self.lambda_q_obs,
            self.lambda_q_tar,
        )
        if any(lam < 0 for lam in lambdas):
            raise AttackError("regularization weights must be >= 0")
        if (self.lambda_q_obs > 0 or self.lambda_q_tar > 0) and self.bounds is None:
            raise AttackError("quantile-bound weights require bounds")
        if self.period < 1:
            raise AttackError("period must be >= 1")
        if self.steps < 1:
            raise AttackError("steps must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.bounds is not None:
            d["bounds"] = {"levels": list(self.bounds.levels), "attached": True}
        return d


@dataclass
class AttackResult:
    recon_obs: np.ndarray
    recon_tar: np.ndarray
    loss_trace: list[float]
    distance_trace: list[float]
    wall_time: float
    config: AttackConfig
    best_step: int
    best_loss: float
    fallback_step: int | None = None
    one_shot_used: bool = False

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = np.concatenate([self.recon_obs.reshape(-1), self.recon_tar.reshape(-1)])
        Path(str(path) + ".bin").write_bytes(blob.astype("<f8").tobytes())
        meta = {
            "config": self.config.to_dict(),
            "obs_shape": list(self.recon_obs.shape),
            "tar_shape": list(self.recon_tar.shape),
            "loss_trace": self.loss_trace,
            "distance_trace": self.distance_trace,
            "wall_time": self.wall_time,
            "best_step": self.best_step,
            "best_loss": self.best_loss,
            "fallback_step": self.fallback_step,
            "one_shot_used": self.one_shot_used,
        }
        path.write_text(json.dumps(meta))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "AttackResult":
        path = Path(path)
        meta = json.loads(path.read_text())
        raw = np.frombuffer(Path(str(path) + ".bin").read_bytes(), dtype="<f8")
        obs_shape = tuple(meta["obs_shape"])
        tar_shape = tuple(meta["tar_shape"])
        n_obs = int(np.prod(obs_shape))
        cfg = dict(meta["config"])
        if isinstance(cfg.get("bounds"), dict):
            cfg["bounds"] = None  # arrays are not persisted in the echo
        config = AttackConfig(**cfg)
        return cls(
            recon_obs=np.array(raw[:n_obs]).reshape(obs_shape),
            recon_tar=np.array(raw[n_obs:]).reshape(tar_shape),
            loss_trace=list(meta["loss_trace"]),
            distance_trace=list(meta["distance_trace"]),
            wall_time=meta["wall_time"],
            config=config,
            best_step=meta["best_step"],
            best_loss=meta["best_loss"],
            fallback_step=meta["fallback_step"],
            one_shot_used=meta["one_shot_used"],
        )


# -- one-shot target recovery -------------------------------------------------


def one_shot_targets(capture: GradientCapture, model: Model, params: ParamVector) -> np.ndarray:
    """Recover the target window from the output head's gradients (B=1).

    For a linear head y_hat = W x + b under mean-MSE, grad_W = grad_b x^T
    is rank one, so any coordinate of grad_b with nonzero magnitude
    determines x; the largest-magnitude pivot keeps the division stable.
    Then y = W x + b - (N/2) grad_b with N the number of target elements.
    """
    if capture.batch_size != 1:
        raise OneShotInfeasible(f"needs batch size 1, capture has {capture.batch_size}")
    if model.head_name is None:
        raise OneShotInfeasible("model has no whole-sequence fully connected head")
    slices = model.param_slices()
    w_lo, w_hi, w_shape = slices[f"{model.head_name}.w"]
    b_lo, b_hi, _ = slices[f"{model.head_name}.b"]
    grad_w = capture.grads[w_lo:w_hi].reshape(w_shape)
    grad_b = capture.grads[b_lo:b_hi]
    pivot = int(np.argmax(np.abs(grad_b)))
    if abs(grad_b[pivot]) <= 1e-12:
        raise OneShotInfeasible("head bias gradient vanishes (zero residual or aggregation)")
    x = grad_w[pivot] / grad_b[pivot]
    named = params.as_dict()
    weight = named[f"{model.head_name}.w"]
    bias = named[f"{model.head_name}.b"]
    n = capture.f * capture.d
    return weight @ x + bias - 0.5 * n * grad_b


def rank1_head_residual(capture: GradientCapture, model: Model) -> float:
    """Max deviation of the head weight gradient from grad_b x^T."""
    slices = model.param_slices()
    w_lo, w_hi, w_shape = slices[f"{model.head_name}.w"]
    b_lo, b_hi, _ = slices[f"{model.head_name}.b"]
    grad_w = capture.grads[w_lo:w_hi].reshape(w_shape)
    grad_b = capture.grads[b_lo:b_hi]
    pivot = int(np.argmax(np.abs(grad_b)))
    x = grad_w[pivot] / grad_b[pivot]
    return float(np.max(np.abs(grad_w - np.outer(grad_b, x))))


# -- the optimization loop -----------------------------------------------------


def _init_array(rng: np.random.Generator, shape: tuple[int, ...], kind: str) -> np.ndarray:
    if kind == "uniform01":
        return rng.uniform(0.0, 1.0, size=shape)
    return np.full(shape, 0.5)


def run_attack(
    capture: GradientCapture,
    model: Model,
    params: ParamVector,
    config: AttackConfig,
    init_obs: np.ndarray | None = None,
    init_tar: np.ndarray | None = None,
) -> AttackResult:
    """Optimize dummy windows against a captured gradient.

    Returns the best-loss iterate, never the last one. ``init_obs`` and
    ``init_tar`` override the configured initialization (useful for warm
    starts and sanity checks).
    """
    if capture.m != params.m:
        raise AttackError(f"capture has {capture.m} gradient entries, model wants {params.m}")
    if (capture.h, capture.f, capture.d) != (model.spec.h, model.spec.f, model.spec.d):
        raise AttackError("capture geometry does not match the model spec")
    if config.dia_masks and not model.has_dropout:
        raise AttackError("dropout-mask co-optimization needs an architecture with dropout")
    if config.bounds is not None:
        _validate_levels(tuple(config.bounds.levels))

    b = capture.batch_size
    spec = model.spec
    rng = np.random.default_rng(config.seed)
    g_captured = ad.constant(capture.grads)
    if config.distance.startswith("cosine"):
        gradient_cosine(ad.constant(capture.grads), g_captured)  # raises on zero norm

    obs0 = _init_array(rng, (b, spec.h, spec.d), config.init) if init_obs is None else np.asarray(init_obs, dtype=float).copy()
    tar0 = _init_array(rng, (b, spec.f, spec.d), config.init) if init_tar is None else np.asarray(init_tar, dtype=float).copy()

    one_shot_used = False
    tar_fixed: np.ndarray | None = None
    if config.one_shot_targets:
        try:
            tar_fixed = one_shot_targets(capture, model, params).reshape(b, spec.f, spec.d)
            one_shot_used = True
        except OneShotInfeasible:
            tar_fixed = None  # fall back to joint optimization

    names = ["obs"]
    values = [obs0]
    if tar_fixed is None:
        names.append("tar")
        values.append(tar0)
    mask_scale = 1.0
    if config.dia_masks:
        rate = spec.dropout_rate
        mask_scale = 1.0 if rate == 0.0 else 1.0 / (1.0 - rate)
        for name, shape in model.dropout_mask_shapes(b).items():
            names.append(f"mask:{name}")
            values.append(np.ones(shape))

    state = {
        "best_loss": np.inf,
        "best_obs": obs0.copy(),
        "best_tar": tar_fixed.copy() if tar_fixed is not None else tar0.copy(),
        "best_step": 0,
        "step": 0,
        "first_eval": None,  # (loss, dist) of the first eval in the current step
    }

    def closure(current: list[np.ndarray]) -> tuple[float, list[np.ndarray], float]:
        named = dict(zip(names, current))
        var_nodes: dict[str, ad.Node] = {k: ad.variable(v) for k, v in named.items()}
        obs_node = var_nodes["obs"]
        tar_node = var_nodes["tar"] if "tar" in var_nodes else ad.constant(tar_fixed)

        masks = None
        training = True
        if model.has_dropout:
            if config.dia_masks:
                masks = {
                    key.split(":", 1)[1]: ad.mul(ad.clamp01(node), mask_scale)
                    for key, node in var_nodes.items()
                    if key.startswith("mask:")
                }
            else:
                training = False  # masks are the client's secret; attack the plain net

        param_nodes = models.params_to_nodes(params, requires_grad=True)
        pred = model.forward(param_nodes, obs_node, masks=masks, training=training)
        inner_loss = models.mse_loss(pred, tar_node)
        grad_map = ad.backward(inner_loss, list(param_nodes.values()), create_graph=True)
        g_dummy = models.flatten_grad_nodes(grad_map, param_nodes, params.entries)

        dist = gradient_distance(config.distance, g_dummy, g_captured)
        total = dist
        if config.lambda_tv_obs > 0:
            total = ad.add(total, ad.mul(total_variation(obs_node), config.lambda_tv_obs))
        if config.lambda_tv_tar > 0:
            total = ad.add(total, ad.mul(total_variation(tar_node), config.lambda_tv_tar))
        if config.lambda_periodicity > 0 or config.lambda_trend > 0:
            seq = ad.concat([obs_node, tar_node], axis=1)
            if config.lambda_periodicity > 0:
                total = ad.add(
                    total,
                    ad.mul(periodicity_penalty(seq, config.period), config.lambda_periodicity),
                )
            if config.lambda_trend > 0:
                total = ad.add(total, ad.mul(trend_penalty(seq), config.lambda_trend))
        if config.lambda_q_obs > 0:
            pen = bounds_penalty(obs_node, config.bounds.obs_bounds, tuple(config.bounds.levels))
            total = ad.add(total, ad.mul(pen, config.lambda_q_obs))
        if config.lambda_q_tar > 0:
            pen = bounds_penalty(tar_node, config.bounds.tar_bounds, tuple(config.bounds.levels))
            total = ad.add(total, ad.mul(pen, config.lambda_q_tar))

        grads = ad.backward(total, [var_nodes[k] for k in names])
        loss_val = total.item()
        dist_val = dist.item()
        if state["first_eval"] is None:
            state["first_eval"] = (loss_val, dist_val)
        if loss_val < state["best_loss"]:
            state["best_loss"] = loss_val
            state["best_obs"] = named["obs"].copy()
            state["best_tar"] = tar_fixed.copy() if tar_fixed is not None else named["tar"].copy()
            state["best_step"] = state["step"]
        return loss_val, [grads[var_nodes[k]].value for k in names], dist_val

    def project(vals: list[np.ndarray]) -> list[np.ndarray]:
        out = []
        for name, v in zip(names, vals):
            if name.startswith("mask:"):
                out.append(np.clip(v, 0.0, 1.0))
            elif config.clamp01:
                out.append(np.clip(v, 0.0, 1.0))
            else:
                out.append(v)
        return out

    loss_trace: list[float] = []
    dist_trace: list[float] = []
    started = time.perf_counter()

    def partial_result() -> AttackResult:
        return AttackResult(
            recon_obs=state["best_obs"],
            recon_tar=state["best_tar"],
            loss_trace=loss_trace,
            distance_trace=dist_trace,
            wall_time=time.perf_counter() - started,
            config=config,
            best_step=state["best_step"],
            best_loss=state["best_loss"],
            fallback_step=fallback_step,
            one_shot_used=one_shot_used,
        )

    adam = Adam(
        lr=config.learning_rate,
        lr_end=config.lr_end,
        total_steps=config.steps,
    )
    lbfgs = LBFGS(lr=1.0) if config.optimizer == "lbfgs" else None
    fallback_step: int | None = None

    for step in range(config.steps):
        state["step"] = step
        state["first_eval"] = None
        try:
            if lbfgs is not None:

                def lbfgs_closure(vals: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
                    try:
                        loss, grads, _ = closure(vals)
                        return loss, grads
                    except ad.NonFiniteError:
                        if state["first_eval"] is None:
                            raise  # the step's own iterate is broken: abort
                        return np.inf, [np.zeros_like(v) for v in vals]

                try:
                    values, _ = lbfgs.step(values, lbfgs_closure)
                except LineSearchError:
                    fallback_step = step
                    lbfgs = None  # continue with Adam from the current iterate
                values = project(values)
            else:
                loss, grads, _ = closure(values)
                values = project(adam.step(values, grads))
        except ad.NonFiniteError as exc:
            raise AttackAborted(f"non-finite loss at step {step}: {exc}", partial_result()) from exc
        loss_trace.append(state["first_eval"][0])
        dist_trace.append(state["first_eval"][1])

    return partial_result()


# -- method presets -----------------------------------------------------------

OPTIMIZATION_METHODS = ("dlg-lbfgs", "dlg-adam", "invg", "dia", "ts-inverse", "ts-inverse-oneshot")
METHODS = OPTIMIZATION_METHODS + ("lti",)


def config_for_method(method: str, model: Model, **overrides) -> AttackConfig:
    """Translate a named attack method into an AttackConfig.

    The dropout-mask co-optimization of ``dia`` only engages when the
    target architecture actually has dropout; on other models it reduces
    to its underlying cosine+TV attack.
    """
    if method not in OPTIMIZATION_METHODS:
        raise AttackError(f"{method!r} is not an optimization method")
    base: dict = {}
    if method == "dlg-lbfgs":
        base = {"distance": "l2", "optimizer": "lbfgs"}
    elif method == "dlg-adam":
        base = {"distance": "l2"}
    elif method == "invg":
        base = {"distance": "cosine_tv", "lambda_tv_obs": 1e-3, "lambda_tv_tar": 1e-3}
    elif method == "dia":
        base = {
            "distance": "cosine_tv",
            "lambda_tv_obs": 1e-3,
            "lambda_tv_tar": 1e-3,
            "dia_masks": model.has_dropout,
        }
    elif method == "ts-inverse":
        base = {"distance": "l1"}
    elif method == "ts-inverse-oneshot":
        base = {"distance": "l1", "one_shot_targets": True}
    base.update(overrides)
    return AttackConfig(**base)
