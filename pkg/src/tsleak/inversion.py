"""Learned gradient-inversion components.

Two nets share one residual-MLP recipe over standardized flat gradients:

* the quantile net maps a gradient to per-timestep quantile bounds of the
  batch it came from (trained with pinball loss, one output module each
  for observations and targets);
* the direct regressor maps a gradient straight to the batch samples
  (trained with squared error) and needs no optimization loop at attack
  time, which keeps it usable under gradient defenses.

Both train on captures generated from the auxiliary split with the same
model, parameters and defense the attack will face.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import federation
from . import models
from .federation import DefenseSpec, GradientCapture
from .models import LayerEntry, Model, ParamVector
from .optim import Adam

DEFAULT_LEVELS = (0.1, 0.3, 0.7, 0.9)
TRUNK_WIDTHS = (768, 512)


class InversionError(ValueError):
    pass


@dataclass(frozen=True)
class QuantileBounds:
    """Per-timestep bound sequences at symmetric quantile levels."""

    levels: tuple[float, ...]
    obs_bounds: np.ndarray  # (H, d, Q)
    tar_bounds: np.ndarray  # (F, d, Q)

    def __post_init__(self):
        q = len(self.levels)
        if q % 2 != 0 or q < 2:
            raise InversionError("quantile levels must come in symmetric pairs")
        if list(self.levels) != sorted(self.levels):
            raise InversionError(f"levels must be sorted ascending: {self.levels}")
        for i in range(q // 2):
            if abs(self.levels[i] + self.levels[q - 1 - i] - 1.0) > 1e-9:
                raise InversionError(f"levels not symmetric around 0.5: {self.levels}")
        if self.obs_bounds.shape[-1] != q or self.tar_bounds.shape[-1] != q:
            raise InversionError("bound arrays must have Q as the last axis")


def pinball_loss(actual, predicted, tau: float) -> ad.Node:
    """Quantile regression hinge, mean over every element.

    max((tau-1)*e, tau*e) with e = actual - predicted: under-prediction
    costs tau per unit, over-prediction 1-tau.
    """
    if not 0.0 < tau < 1.0:
        raise InversionError(f"quantile level must be in (0,1), got {tau}")
    actual = ad.as_node(actual)
    predicted = ad.as_node(predicted)
    e = ad.sub(actual, predicted)
    return ad.mean_(ad.add(ad.mul(e, tau), ad.relu(ad.neg(e))))


def empirical_quantile(sample: np.ndarray, tau: float) -> float:
    """Sort-based tau-quantile: smallest value with CDF >= tau."""
    x = np.sort(np.asarray(sample).reshape(-1))
    n = x.size
    k = int(np.ceil(tau * n)) - 1
    return float(x[max(0, min(k, n - 1))])


# -- residual MLP ------------------------------------------------------------


@dataclass(frozen=True)
class InvNetSpec:
    """Geometry and training knobs shared by both learned attacks."""

    input_dim: int
    h: int
    f: int
    d: int = 1
    target_batch_size: int = 1
    levels: tuple[float, ...] = DEFAULT_LEVELS
    epochs: int = 75
    n_captures: int = 128
    train_batch: int = 32
    learning_rate: float = 1e-3
    dropout_rate: float = 0.1
    bn_momentum: float = 0.9
    mode: str = "quantile"  # quantile | direct

    def __post_init__(self):
        if self.mode not in ("quantile", "direct"):
            raise InversionError(f"unknown net mode {self.mode!r}")
        if self.mode == "quantile":
            _ = QuantileBounds(
                tuple(self.levels),
                np.zeros((self.h, self.d, len(self.levels))),
                np.zeros((self.f, self.d, len(self.levels))),
            )

    def out_dim(self, side: str) -> int:
        steps = self.h if side == "obs" else self.f
        if self.mode == "quantile":
            return steps * self.d * len(self.levels)
        return self.target_batch_size * steps * self.d


def _module_layout(prefix: str, in_dim: int, out_dim: int) -> list[LayerEntry]:
    entries: list[LayerEntry] = []
    dim = in_dim
    for i, width in enumerate(TRUNK_WIDTHS):
        base = f"{prefix}.block{i}"
        entries += [
            LayerEntry(f"{base}.fc.w", (width, dim), "fc_w", fan_in=dim),
            LayerEntry(f"{base}.fc.b", (width,), "bias"),
            LayerEntry(f"{base}.bn.gamma", (width,), "bias"),
            LayerEntry(f"{base}.bn.beta", (width,), "bias"),
            LayerEntry(f"{base}.skip.w", (width, dim), "fc_w", fan_in=dim),
            LayerEntry(f"{base}.skip.b", (width,), "bias"),
        ]
        dim = width
    entries += [
        LayerEntry(f"{prefix}.head.w", (out_dim, dim), "fc_w", fan_in=dim),
        LayerEntry(f"{prefix}.head.b", (out_dim,), "bias"),
    ]
    return entries


def _init_net_params(entries: list[LayerEntry], seed: int) -> ParamVector:
    rng = np.random.default_rng(seed)
    arrays = []
    for e in entries:
        if e.kind == "fc_w":
            bound = 1.0 / np.sqrt(e.fan_in)
            arrays.append(rng.uniform(-bound, bound, size=e.shape))
        elif e.name.endswith("bn.gamma"):
            arrays.append(np.ones(e.shape))
        else:
            arrays.append(np.zeros(e.shape))
    return ParamVector(entries, arrays)


class InvNet:
    """Trained inversion net: parameters, input standardization, buffers."""

    def __init__(self, spec: InvNetSpec, params: ParamVector, norm_mean, norm_std, seed: int,
                 model_ref: str = "", defense: DefenseSpec | None = None):
        self.spec = spec
        self.params = params
        self.norm_mean = np.asarray(norm_mean, dtype=np.float64)
        self.norm_std = np.asarray(norm_std, dtype=np.float64)
        self.seed = seed
        self.model_ref = model_ref
        self.defense = defense or DefenseSpec()
        # Batch-norm running stats, keyed like "<prefix>.block<i>".
        self.running: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for side in ("obs", "tar"):
            for i, width in enumerate(TRUNK_WIDTHS):
                self.running[f"{side}.block{i}"] = (np.zeros(width), np.ones(width))

    def standardize(self, grads: np.ndarray) -> np.ndarray:
        return (grads - self.norm_mean) / self.norm_std

    def _forward_module(
        self,
        nodes: dict[str, ad.Node],
        side: str,
        x: ad.Node,
        training: bool,
        masks: dict[str, np.ndarray] | None,
    ) -> ad.Node:
        for i in range(len(TRUNK_WIDTHS)):
            base = f"{side}.block{i}"
            z = ad.add(ad.matmul(x, ad.transpose(nodes[f"{base}.fc.w"])), nodes[f"{base}.fc.b"])
            if training:
                mu = ad.mean_(z, axis=0, keepdims=True)
                cen = ad.sub(z, mu)
                var = ad.mean_(ad.mul(cen, cen), axis=0, keepdims=True)
                zhat = ad.div(cen, ad.sqrt(ad.add(var, 1e-5)))
                mom = self.spec.bn_momentum
                r_mu, r_var = self.running[base]
                self.running[base] = (
                    mom * r_mu + (1 - mom) * mu.value.reshape(-1),
                    mom * r_var + (1 - mom) * var.value.reshape(-1),
                )
            else:
                r_mu, r_var = self.running[base]
                zhat = ad.div(ad.sub(z, ad.constant(r_mu)), ad.constant(np.sqrt(r_var + 1e-5)))
            z = ad.add(ad.mul(zhat, nodes[f"{base}.bn.gamma"]), nodes[f"{base}.bn.beta"])
            z = ad.relu(z)
            if training and masks is not None:
                z = ad.mul(z, ad.constant(masks[base]))
            skip = ad.add(
                ad.matmul(x, ad.transpose(nodes[f"{base}.skip.w"])), nodes[f"{base}.skip.b"]
            )
            x = ad.add(z, skip)
        return ad.add(ad.matmul(x, ad.transpose(nodes[f"{side}.head.w"])), nodes[f"{side}.head.b"])

    def forward(
        self,
        nodes: dict[str, ad.Node],
        x: ad.Node,
        training: bool = False,
        masks: dict[str, np.ndarray] | None = None,
    ) -> tuple[ad.Node, ad.Node]:
        return (
            self._forward_module(nodes, "obs", x, training, masks),
            self._forward_module(nodes, "tar", x, training, masks),
        )

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        running_names = sorted(self.running)
        blob_parts = [self.params.flatten(), self.norm_mean, self.norm_std]
        for k in running_names:
            blob_parts += [self.running[k][0], self.running[k][1]]
        Path(str(path) + ".bin").write_bytes(np.concatenate(blob_parts).astype("<f8").tobytes())
        meta = {
            "spec": {**self.spec.__dict__, "levels": list(self.spec.levels)},
            "seed": self.seed,
            "model_ref": self.model_ref,
            "defense": self.defense.to_dict(),
            "running_names": running_names,
            "param_count": self.params.m,
        }
        path.write_text(json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "InvNet":
        path = Path(path)
        meta = json.loads(path.read_text())
        spec_d = dict(meta["spec"])
        spec_d["levels"] = tuple(spec_d["levels"])
        spec = InvNetSpec(**spec_d)
        entries = _module_layout("obs", spec.input_dim, spec.out_dim("obs")) + _module_layout(
            "tar", spec.input_dim, spec.out_dim("tar")
        )
        raw = np.frombuffer(Path(str(path) + ".bin").read_bytes(), dtype="<f8")
        total = sum(int(np.prod(e.shape)) for e in entries)
        params = ParamVector.unflatten(entries, np.array(raw[:total]))
        offset = total
        m = spec.input_dim
        norm_mean = np.array(raw[offset : offset + m])
        norm_std = np.array(raw[offset + m : offset + 2 * m])
        offset += 2 * m
        net = cls(
            spec,
            params,
            norm_mean,
            norm_std,
            seed=meta["seed"],
            model_ref=meta["model_ref"],
            defense=DefenseSpec.from_dict(meta["defense"]),
        )
        for k in meta["running_names"]:
            width = net.running[k][0].size
            net.running[k] = (
                np.array(raw[offset : offset + width]),
                np.array(raw[offset + width : offset + 2 * width]),
            )
            offset += 2 * width
        return net


# -- training -----------------------------------------------------------------


def generate_training_captures(
    aux_windows: list,
    model: Model,
    params: ParamVector,
    batch_size: int,
    n_captures: int,
    seed: int,
    defense: DefenseSpec | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Capture set for net training: (grads (n,m), obs (n,B,H,d), tar (n,B,F,d))."""
    if not aux_windows:
        raise InversionError("auxiliary window set is empty")
    rng = np.random.default_rng(seed)
    grads, obs_all, tar_all = [], [], []
    for _ in range(n_captures):
        idx = rng.integers(0, len(aux_windows), size=batch_size)
        obs = np.stack([aux_windows[i].obs for i in idx])
        tar = np.stack([aux_windows[i].tar for i in idx])
        round_seed = int(rng.integers(0, 2**31 - 1))
        cap = federation.client_gradient(model, params, (obs, tar), seed=round_seed)
        if defense is not None and defense.kind != "none":
            cap = federation.apply_defense(cap, defense)
        grads.append(cap.grads)
        obs_all.append(obs)
        tar_all.append(tar)
    return np.stack(grads), np.stack(obs_all), np.stack(tar_all)


def _standardization(grads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = grads.mean(axis=0)
    std = np.maximum(grads.std(axis=0), 1e-8)
    return mean, std


def _train(
    net: InvNet,
    grads: np.ndarray,
    obs: np.ndarray,
    tar: np.ndarray,
    seed: int,
    loss_fn,
    epochs: int,
) -> list[float]:
    spec = net.spec
    x_all = net.standardize(grads)
    rng = np.random.default_rng(seed)
    order_rng = np.random.default_rng(seed + 1)
    adam = Adam(lr=spec.learning_rate)
    epoch_losses: list[float] = []
    n = x_all.shape[0]
    for _ in range(epochs):
        perm = order_rng.permutation(n)
        total, count = 0.0, 0
        for lo in range(0, n, spec.train_batch):
            sel = perm[lo : lo + spec.train_batch]
            nodes = models.params_to_nodes(net.params, requires_grad=True)
            masks = None
            if spec.dropout_rate > 0:
                keep = 1.0 - spec.dropout_rate
                masks = {
                    f"{side}.block{i}": (rng.random((len(sel), w)) < keep) / keep
                    for side in ("obs", "tar")
                    for i, w in enumerate(TRUNK_WIDTHS)
                }
            pred_obs, pred_tar = net.forward(nodes, ad.constant(x_all[sel]), training=True, masks=masks)
            loss = loss_fn(pred_obs, pred_tar, obs[sel], tar[sel])
            grad_map = ad.backward(loss, list(nodes.values()))
            flat_grads = [grad_map[nodes[e.name]].value for e in net.params.entries]
            new_arrays = adam.step(net.params.arrays, flat_grads)
            net.params = ParamVector(net.params.entries, new_arrays)
            total += loss.item() * len(sel)
            count += len(sel)
        epoch_losses.append(total / count)
    return epoch_losses


def _quantile_loss_fn(spec: InvNetSpec):
    q_levels = spec.levels

    def loss_fn(pred_obs: ad.Node, pred_tar: ad.Node, obs: np.ndarray, tar: np.ndarray) -> ad.Node:
        bs = obs.shape[0]
        total = None
        for side, pred, actual, steps in (
            ("obs", pred_obs, obs, spec.h),
            ("tar", pred_tar, tar, spec.f),
        ):
            # prediction: (bs, steps*d*Q) -> (bs, 1, steps, d, Q), repeated
            # against every sequence in the capture's batch.
            p = ad.reshape(pred, (bs, 1, steps, spec.d, len(q_levels)))
            a = actual.reshape(bs, spec.target_batch_size, steps, spec.d, 1)
            for qi, tau in enumerate(q_levels):
                term = pinball_loss(ad.constant(a[..., 0]), p[:, :, :, :, qi], tau)
                total = term if total is None else ad.add(total, term)
        return ad.mul(total, 0.5)

    return loss_fn


def _direct_loss_fn(spec: InvNetSpec):
    def loss_fn(pred_obs: ad.Node, pred_tar: ad.Node, obs: np.ndarray, tar: np.ndarray) -> ad.Node:
        bs = obs.shape[0]
        p_obs = ad.reshape(pred_obs, (bs, spec.target_batch_size, spec.h, spec.d))
        p_tar = ad.reshape(pred_tar, (bs, spec.target_batch_size, spec.f, spec.d))
        return ad.add(models.mse_loss(p_obs, obs), models.mse_loss(p_tar, tar))

    return loss_fn


def train_quantile_net(
    aux_windows: list,
    model: Model,
    params: ParamVector,
    seed: int,
    target_batch_size: int = 1,
    defense: DefenseSpec | None = None,
    epochs: int = 75,
    n_captures: int = 128,
    levels: tuple[float, ...] = DEFAULT_LEVELS,
    model_ref: str = "",
) -> tuple[InvNet, list[float]]:
    """Fit the quantile-bounds net on auxiliary captures; returns (net, epoch losses)."""
    spec = InvNetSpec(
        input_dim=params.m,
        h=model.spec.h,
        f=model.spec.f,
        d=model.spec.d,
        target_batch_size=target_batch_size,
        levels=tuple(levels),
        epochs=epochs,
        n_captures=n_captures,
        mode="quantile",
    )
    return _train_net(aux_windows, model, params, spec, seed, defense, model_ref)


def train_direct_net(
    aux_windows: list,
    model: Model,
    params: ParamVector,
    seed: int,
    target_batch_size: int = 1,
    defense: DefenseSpec | None = None,
    epochs: int = 250,
    n_captures: int = 128,
    model_ref: str = "",
) -> tuple[InvNet, list[float]]:
    """Fit the direct gradient-to-samples regressor (squared error, fixed order)."""
    spec = InvNetSpec(
        input_dim=params.m,
        h=model.spec.h,
        f=model.spec.f,
        d=model.spec.d,
        target_batch_size=target_batch_size,
        epochs=epochs,
        n_captures=n_captures,
        mode="direct",
    )
    return _train_net(aux_windows, model, params, spec, seed, defense, model_ref)


def _train_net(
    aux_windows: list,
    model: Model,
    params: ParamVector,
    spec: InvNetSpec,
    seed: int,
    defense: DefenseSpec | None,
    model_ref: str,
) -> tuple[InvNet, list[float]]:
    grads, obs, tar = generate_training_captures(
        aux_windows, model, params, spec.target_batch_size, spec.n_captures, seed, defense
    )
    if grads.shape[1] != spec.input_dim:
        raise InversionError(
            f"captures have {grads.shape[1]} gradient entries, net expects {spec.input_dim}"
        )
    mean, std = _standardization(grads)
    entries = _module_layout("obs", spec.input_dim, spec.out_dim("obs")) + _module_layout(
        "tar", spec.input_dim, spec.out_dim("tar")
    )
    net = InvNet(
        spec,
        _init_net_params(entries, seed),
        mean,
        std,
        seed=seed,
        model_ref=model_ref,
        defense=defense,
    )
    loss_fn = _quantile_loss_fn(spec) if spec.mode == "quantile" else _direct_loss_fn(spec)
    losses = _train(net, grads, obs, tar, seed, loss_fn, spec.epochs)
    return net, losses


# -- inference ----------------------------------------------------------------


def predict_bounds(net: InvNet, capture: GradientCapture) -> QuantileBounds:
    """Quantile bounds for a capture, monotonically rearranged per timestep."""
    if net.spec.mode != "quantile":
        raise InversionError("net was not trained for quantile prediction")
    if capture.m != net.spec.input_dim:
        raise InversionError(
            f"capture has {capture.m} gradient entries, net expects {net.spec.input_dim}"
        )
    x = ad.constant(net.standardize(capture.grads)[None, :])
    nodes = models.params_to_nodes(net.params)
    pred_obs, pred_tar = net.forward(nodes, x, training=False)
    q = len(net.spec.levels)
    obs_b = np.sort(pred_obs.value.reshape(net.spec.h, net.spec.d, q), axis=-1)
    tar_b = np.sort(pred_tar.value.reshape(net.spec.f, net.spec.d, q), axis=-1)
    return QuantileBounds(tuple(net.spec.levels), obs_b, tar_b)


def reconstruct_direct(net: InvNet, capture: GradientCapture) -> tuple[np.ndarray, np.ndarray]:
    """One forward pass from gradient to (obs batch, tar batch)."""
    if net.spec.mode != "direct":
        raise InversionError("net was not trained for direct reconstruction")
    if capture.m != net.spec.input_dim:
        raise InversionError(
            f"capture has {capture.m} gradient entries, net expects {net.spec.input_dim}"
        )
    x = ad.constant(net.standardize(capture.grads)[None, :])
    nodes = models.params_to_nodes(net.params)
    pred_obs, pred_tar = net.forward(nodes, x, training=False)
    b = net.spec.target_batch_size
    obs = pred_obs.value.reshape(b, net.spec.h, net.spec.d)
    tar = pred_tar.value.reshape(b, net.spec.f, net.spec.d)
    return obs, tar
