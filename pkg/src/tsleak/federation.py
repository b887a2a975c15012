"""Single-round FedSGD simulation: per-client gradients plus defenses.

A client computes the gradient of the mean-MSE forecast loss on one batch
and ships it. The resulting :class:`GradientCapture` is the only artifact
an attack may consume; the hidden ``true_batch`` rides along strictly for
evaluation and never feeds any attack computation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .models import Model, ParamVector

DEFENSE_KINDS = ("none", "gauss", "prune", "sign")


class FederationError(ValueError):
    pass


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    noise_std: float | None = None
    prune_ratio: float | None = None

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise FederationError(f"unknown defense {self.kind!r}")
        if self.kind == "gauss":
            if self.noise_std is None or self.noise_std < 0:
                raise FederationError("gauss defense needs noise_std >= 0")
            if self.prune_ratio is not None:
                raise FederationError("prune_ratio is not a gauss parameter")
        elif self.kind == "prune":
            if self.prune_ratio is None or not 0.0 <= self.prune_ratio < 1.0:
                raise FederationError("prune defense needs prune_ratio in [0, 1)")
            if self.noise_std is not None:
                raise FederationError("noise_std is not a prune parameter")
        else:
            if self.noise_std is not None or self.prune_ratio is not None:
                raise FederationError(f"{self.kind} defense takes no parameters")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "noise_std": self.noise_std, "prune_ratio": self.prune_ratio}

    @classmethod
    def from_dict(cls, d: dict | None) -> "DefenseSpec":
        if d is None:
            return cls()
        return cls(**d)


@dataclass
class GradientCapture:
    """What the server sees from one client round (plus eval-only truth)."""

    grads: np.ndarray  # flat, canonical parameter order
    model_ref: str
    batch_size: int
    h: int
    f: int
    d: int
    defense: DefenseSpec
    seed: int
    dropout_seed: int | None = None
    true_batch: tuple[np.ndarray, np.ndarray] | None = None  # eval only

    @property
    def m(self) -> int:
        return int(self.grads.size)


def sample_dropout_masks(model: Model, batch: int, seed: int) -> dict[str, np.ndarray]:
    """Inverted-dropout masks: Bernoulli(1-rate)/(1-rate), seeded per round."""
    rate = model.spec.dropout_rate
    rng = np.random.default_rng(seed)
    masks = {}
    for name, shape in model.dropout_mask_shapes(batch).items():
        keep = (rng.random(shape) < (1.0 - rate)).astype(np.float64)
        masks[name] = keep if rate == 0.0 else keep / (1.0 - rate)
    return masks


def client_gradient(
    model: Model,
    params: ParamVector,
    batch: tuple[np.ndarray, np.ndarray],
    seed: int,
    model_ref: str = "",
    dropout_seed: int | None = None,
) -> GradientCapture:
    """Gradient of mean-MSE over one batch; deterministic under seeds."""
    obs, tar = np.asarray(batch[0], dtype=np.float64), np.asarray(batch[1], dtype=np.float64)
    if obs.ndim != 3 or tar.ndim != 3 or obs.shape[0] != tar.shape[0]:
        raise FederationError(f"batch shapes {obs.shape}/{tar.shape} are not (B,H,d)/(B,F,d)")
    if obs.min() < -1e-9 or obs.max() > 1 + 1e-9 or tar.min() < -1e-9 or tar.max() > 1 + 1e-9:
        raise FederationError("batch values must lie in [0, 1] (normalize first)")
    b = obs.shape[0]
    masks = None
    if model.has_dropout:
        if dropout_seed is None:
            dropout_seed = seed
        masks = sample_dropout_masks(model, b, dropout_seed)

    nodes = models.params_to_nodes(params, requires_grad=True)
    pred = model.forward(nodes, ad.constant(obs), masks=masks)
    loss = models.mse_loss(pred, tar)
    if not np.isfinite(loss.value):
        raise ad.NonFiniteError("client loss is not finite")
    grad_map = ad.backward(loss, list(nodes.values()))
    flat = models.flatten_grad_nodes(grad_map, nodes, params.entries).value
    if not np.all(np.isfinite(flat)):
        raise ad.NonFiniteError("client gradient contains non-finite values")
    return GradientCapture(
        grads=flat,
        model_ref=model_ref,
        batch_size=b,
        h=model.spec.h,
        f=model.spec.f,
        d=model.spec.d,
        defense=DefenseSpec(),
        seed=seed,
        dropout_seed=dropout_seed,
        true_batch=(obs.copy(), tar.copy()),
    )


def apply_defense(capture: GradientCapture, spec: DefenseSpec) -> GradientCapture:
    """Apply exactly one defense to a fresh capture.

    Gaussian noise is seeded from the capture's round seed so defended
    captures stay reproducible.
    """
    if capture.defense.kind != "none":
        raise FederationError("capture already carries a defense; defenses apply singly")
    g = capture.grads
    if spec.kind == "none":
        out = g.copy()
    elif spec.kind == "gauss":
        rng = np.random.default_rng([capture.seed, 0xD3F])
        out = g + rng.normal(0.0, spec.noise_std, size=g.shape)
    elif spec.kind == "prune":
        out = g.copy()
        k = int(spec.prune_ratio * g.size)
        if k > 0:
            order = np.argsort(np.abs(g), kind="stable")  # ties break by index
            out[order[:k]] = 0.0
    elif spec.kind == "sign":
        out = np.sign(g)
    else:  # pragma: no cover - DefenseSpec validates kinds
        raise FederationError(f"unknown defense {spec.kind!r}")
    return replace(capture, grads=out, defense=spec)


def aggregate_round(
    params: ParamVector, captures: list[GradientCapture], alpha: float
) -> ParamVector:
    """FedSGD server update: params - alpha * mean(client gradients)."""
    if not captures:
        raise FederationError("no captures to aggregate")
    refs = {c.model_ref for c in captures}
    if len(refs) != 1:
        raise FederationError(f"captures reference different models: {sorted(refs)}")
    mean = np.mean([c.grads for c in captures], axis=0)
    flat = params.flatten() - alpha * mean
    return ParamVector.unflatten(params.entries, flat)


# -- persistence -------------------------------------------------------------


def save_capture(capture: GradientCapture, path: str | Path) -> Path:
    """JSON manifest + f64 gradient blob; truth goes to a separate file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Path(str(path) + ".bin").write_bytes(capture.grads.astype("<f8").tobytes())
    meta = {
        "model_ref": capture.model_ref,
        "batch_size": capture.batch_size,
        "h": capture.h,
        "f": capture.f,
        "d": capture.d,
        "defense": capture.defense.to_dict(),
        "seed": capture.seed,
        "dropout_seed": capture.dropout_seed,
        "m": capture.m,
        "has_truth": capture.true_batch is not None,
    }
    path.write_text(json.dumps(meta, indent=2))
    if capture.true_batch is not None:
        obs, tar = capture.true_batch
        blob = np.concatenate([obs.reshape(-1), tar.reshape(-1)]).astype("<f8").tobytes()
        Path(str(path) + ".truth.bin").write_bytes(blob)
    return path


def load_capture(path: str | Path, include_truth: bool = False) -> GradientCapture:
    """Attack consumers keep the default and never see the true batch."""
    path = Path(path)
    meta = json.loads(path.read_text())
    grads = np.array(np.frombuffer(Path(str(path) + ".bin").read_bytes(), dtype="<f8"))
    if grads.size != meta["m"]:
        raise FederationError(f"gradient blob size {grads.size} != recorded m {meta['m']}")
    true_batch = None
    if include_truth and meta["has_truth"]:
        raw = np.frombuffer(Path(str(path) + ".truth.bin").read_bytes(), dtype="<f8")
        b, h, f, d = meta["batch_size"], meta["h"], meta["f"], meta["d"]
        obs = np.array(raw[: b * h * d]).reshape(b, h, d)
        tar = np.array(raw[b * h * d :]).reshape(b, f, d)
        true_batch = (obs, tar)
    return GradientCapture(
        grads=grads,
        model_ref=meta["model_ref"],
        batch_size=meta["batch_size"],
        h=meta["h"],
        f=meta["f"],
        d=meta["d"],
        defense=DefenseSpec.from_dict(meta["defense"]),
        seed=meta["seed"],
        dropout_seed=meta["dropout_seed"],
        true_batch=true_batch,
    )
