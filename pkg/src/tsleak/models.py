"""Forecasting model zoo: FCN, CNN, TCN, GRU-2-FCN and GRU-2-GRU.

Every model maps an observation window (B, H, d) to a forecast (B, F, d)
through the graph engine, so both first- and second-order gradients flow.
Parameters live in a :class:`ParamVector` with a canonical, documented
flattening order: layers in construction order, weights before biases.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad

ARCHITECTURES = ("fcn", "cnn", "tcn", "gru2fcn", "gru2gru")

MAX_TCN_LEVELS = 12

CNN_CHANNELS = (16, 32)
CNN_KERNEL = 5
CNN_POOL = 2


class ModelBuildError(ValueError):
    """The spec cannot be realized (bad architecture or geometry)."""


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    h: int
    f: int
    d: int = 1
    hidden: int = 64
    tcn_kernel: int = 6
    tcn_dilation_base: int = 2
    dropout_rate: float = 0.2
    init_seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelBuildError(f"unknown architecture {self.architecture!r}")
        if self.h < 1 or self.f < 1:
            raise ModelBuildError("h and f must be >= 1")
        if self.d != 1:
            raise ModelBuildError("only univariate series (d == 1) are supported")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelBuildError("dropout_rate must be in [0, 1)")


def receptive_field(kernel: int, base: int, levels: int) -> int:
    """Receptive field of stacked dilated causal convs: 1 + (k-1) * sum(base^i)."""
    return 1 + (kernel - 1) * sum(base**i for i in range(levels))


def tcn_level_count(spec: ModelSpec) -> int:
    """Smallest level count whose receptive field covers the observation window."""
    for levels in range(1, MAX_TCN_LEVELS + 1):
        if receptive_field(spec.tcn_kernel, spec.tcn_dilation_base, levels) >= spec.h:
            return levels
    raise ModelBuildError(
        f"receptive field cannot cover h={spec.h} within {MAX_TCN_LEVELS} levels"
    )


@dataclass(frozen=True)
class LayerEntry:
    name: str
    shape: tuple[int, ...]
    kind: str  # fc_w | conv_w | gru_w_ih | gru_w_hh | bias
    fan_in: int = 0


class ParamVector:
    """Named parameter tensors plus an exact, stable flat layout."""

    def __init__(self, entries: list[LayerEntry], arrays: list[np.ndarray]):
        if len(entries) != len(arrays):
            raise ValueError("entries and arrays differ in length")
        for e, a in zip(entries, arrays):
            if tuple(a.shape) != tuple(e.shape):
                raise ValueError(f"shape mismatch for {e.name}: {a.shape} != {e.shape}")
        self.entries = entries
        self.arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    @property
    def m(self) -> int:
        return sum(a.size for a in self.arrays)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays])

    @classmethod
    def unflatten(cls, entries: list[LayerEntry], flat: np.ndarray) -> "ParamVector":
        arrays, i = [], 0
        for e in entries:
            size = int(np.prod(e.shape))
            arrays.append(np.asarray(flat[i : i + size]).reshape(e.shape).copy())
            i += size
        if i != flat.size:
            raise ValueError(f"flat vector has {flat.size} values, layout wants {i}")
        return cls(entries, arrays)

    def slices(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        out, i = {}, 0
        for e in self.entries:
            size = int(np.prod(e.shape))
            out[e.name] = (i, i + size, tuple(e.shape))
            i += size
        return out

    def as_dict(self) -> dict[str, np.ndarray]:
        return {e.name: a for e, a in zip(self.entries, self.arrays)}

    def copy(self) -> "ParamVector":
        return ParamVector(self.entries, [a.copy() for a in self.arrays])


def layout_slices(entries: list[LayerEntry]) -> dict[str, tuple[int, int, tuple[int, ...]]]:
    out, i = {}, 0
    for e in entries:
        size = int(np.prod(e.shape))
        out[e.name] = (i, i + size, tuple(e.shape))
        i += size
    return out


def _fc(name: str, out_dim: int, in_dim: int) -> list[LayerEntry]:
    return [
        LayerEntry(f"{name}.w", (out_dim, in_dim), "fc_w", fan_in=in_dim),
        LayerEntry(f"{name}.b", (out_dim,), "bias"),
    ]


def _conv(name: str, out_ch: int, in_ch: int, k: int) -> list[LayerEntry]:
    return [
        LayerEntry(f"{name}.w", (out_ch, in_ch, k), "conv_w", fan_in=in_ch * k),
        LayerEntry(f"{name}.b", (out_ch,), "bias"),
    ]


def _gru(name: str, hidden: int, in_dim: int) -> list[LayerEntry]:
    return [
        LayerEntry(f"{name}.w_ih", (3 * hidden, in_dim), "gru_w_ih", fan_in=in_dim),
        LayerEntry(f"{name}.w_hh", (3 * hidden, hidden), "gru_w_hh", fan_in=hidden),
        LayerEntry(f"{name}.b_ih", (3 * hidden,), "bias"),
        LayerEntry(f"{name}.b_hh", (3 * hidden,), "bias"),
    ]


def _linear(params: Mapping[str, ad.Node], name: str, x: ad.Node) -> ad.Node:
    return ad.add(ad.matmul(x, ad.transpose(params[f"{name}.w"])), params[f"{name}.b"])


def _gru_cell(
    params: Mapping[str, ad.Node], name: str, x_t: ad.Node, h: ad.Node, hidden: int
) -> ad.Node:
    """Standard reset/update/candidate GRU cell; gates packed [r; z; n]."""
    gi = ad.add(ad.matmul(x_t, ad.transpose(params[f"{name}.w_ih"])), params[f"{name}.b_ih"])
    gh = ad.add(ad.matmul(h, ad.transpose(params[f"{name}.w_hh"])), params[f"{name}.b_hh"])
    i_r, i_z, i_n = (gi[:, :hidden], gi[:, hidden : 2 * hidden], gi[:, 2 * hidden :])
    h_r, h_z, h_n = (gh[:, :hidden], gh[:, hidden : 2 * hidden], gh[:, 2 * hidden :])
    r = ad.sigmoid(ad.add(i_r, h_r))
    z = ad.sigmoid(ad.add(i_z, h_z))
    n = ad.tanh(ad.add(i_n, ad.mul(r, h_n)))
    return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))


def _maxpool2(x: ad.Node) -> ad.Node:
    b, c, t = x.value.shape
    t2 = t // 2
    x = x[:, :, : t2 * 2]
    return ad.max_along(ad.reshape(x, (b, c, t2, 2)), axis=3)


class Model:
    """Architecture-specific forward pass over a shared parameter layout."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.layout: list[LayerEntry] = self._build_layout()
        self._slices = layout_slices(self.layout)

    # Subclasses fill these in.
    head_name: str | None = None
    has_dropout: bool = False

    def _build_layout(self) -> list[LayerEntry]:
        raise NotImplementedError

    def forward(
        self,
        params: Mapping[str, ad.Node],
        obs: ad.Node,
        masks: Mapping[str, ad.Node | np.ndarray] | None = None,
        training: bool = True,
    ) -> ad.Node:
        raise NotImplementedError

    @property
    def m(self) -> int:
        return sum(int(np.prod(e.shape)) for e in self.layout)

    def param_slices(self) -> dict[str, tuple[int, int, tuple[int, ...]]]:
        return dict(self._slices)

    def dropout_mask_shapes(self, batch: int) -> dict[str, tuple[int, ...]]:
        return {}

    def _check_obs(self, obs: ad.Node) -> None:
        b, h, d = obs.value.shape
        if (h, d) != (self.spec.h, self.spec.d):
            raise ad.ShapeError(
                f"observation shape {(h, d)} does not match spec ({self.spec.h}, {self.spec.d})"
            )


class FCN(Model):
    """Three fully connected layers; sigmoid between, linear output."""

    head_name = "fc3"

    def _build_layout(self):
        s = self.spec
        return (
            _fc("fc1", s.hidden, s.h * s.d)
            + _fc("fc2", s.hidden, s.hidden)
            + _fc("fc3", s.f * s.d, s.hidden)
        )

    def forward(self, params, obs, masks=None, training=True):
        self._check_obs(obs)
        b = obs.value.shape[0]
        s = self.spec
        x = ad.reshape(obs, (b, s.h * s.d))
        x = ad.sigmoid(_linear(params, "fc1", x))
        x = ad.sigmoid(_linear(params, "fc2", x))
        x = _linear(params, "fc3", x)
        return ad.reshape(x, (b, s.f, s.d))


class CNN(Model):
    """LeNet-flavoured 1-D conv stack: conv-sigmoid-pool twice, linear head."""

    head_name = "head"

    def __init__(self, spec: ModelSpec):
        t = spec.h // CNN_POOL // CNN_POOL
        if t < 1:
            raise ModelBuildError(f"h={spec.h} too short for two pool-{CNN_POOL} stages")
        self.feat_dim = CNN_CHANNELS[1] * t
        super().__init__(spec)

    def _build_layout(self):
        s = self.spec
        return (
            _conv("conv1", CNN_CHANNELS[0], s.d, CNN_KERNEL)
            + _conv("conv2", CNN_CHANNELS[1], CNN_CHANNELS[0], CNN_KERNEL)
            + _fc("head", s.f * s.d, self.feat_dim)
        )

    def forward(self, params, obs, masks=None, training=True):
        self._check_obs(obs)
        b = obs.value.shape[0]
        s = self.spec
        x = ad.transpose(obs, (0, 2, 1))  # (B, d, H)
        x = ad.add(ad.conv1d_same(x, params["conv1.w"]), ad.reshape(params["conv1.b"], (1, -1, 1)))
        x = _maxpool2(ad.sigmoid(x))
        x = ad.add(ad.conv1d_same(x, params["conv2.w"]), ad.reshape(params["conv2.b"], (1, -1, 1)))
        x = _maxpool2(ad.sigmoid(x))
        x = ad.reshape(x, (b, self.feat_dim))
        return ad.reshape(_linear(params, "head", x), (b, s.f, s.d))


class TCN(Model):
    """Residual dilated causal conv levels with post-activation dropout."""

    head_name = "head"
    has_dropout = True

    def __init__(self, spec: ModelSpec):
        self.levels = tcn_level_count(spec)
        super().__init__(spec)

    def _build_layout(self):
        s = self.spec
        entries: list[LayerEntry] = []
        in_ch = s.d
        for i in range(self.levels):
            entries += _conv(f"tcn{i}", s.hidden, in_ch, s.tcn_kernel)
            if in_ch != s.hidden:
                entries += _conv(f"tcn{i}.down", s.hidden, in_ch, 1)
            in_ch = s.hidden
        entries += _fc("head", s.f * s.d, s.hidden)
        return entries

    def dropout_mask_shapes(self, batch: int) -> dict[str, tuple[int, ...]]:
        return {f"tcn{i}": (batch, self.spec.hidden, self.spec.h) for i in range(self.levels)}

    def forward(self, params, obs, masks=None, training=True):
        self._check_obs(obs)
        if training and masks is None:
            raise ad.ShapeError("TCN forward in training mode requires dropout masks")
        b = obs.value.shape[0]
        s = self.spec
        x = ad.transpose(obs, (0, 2, 1))  # (B, d, H)
        in_ch = s.d
        for i in range(self.levels):
            dilation = s.tcn_dilation_base**i
            y = ad.conv1d_causal_dilated(x, params[f"tcn{i}.w"], dilation)
            y = ad.add(y, ad.reshape(params[f"tcn{i}.b"], (1, -1, 1)))
            y = ad.relu(y)
            if training and masks is not None:
                y = ad.mul(y, ad.as_node(masks[f"tcn{i}"]))
            if in_ch != s.hidden:
                skip = ad.conv1d_causal_dilated(x, params[f"tcn{i}.down.w"], 1)
                skip = ad.add(skip, ad.reshape(params[f"tcn{i}.down.b"], (1, -1, 1)))
            else:
                skip = x
            x = ad.relu(ad.add(y, skip))
            in_ch = s.hidden
        feats = x[:, :, -1]  # receptive field covers the full window
        return ad.reshape(_linear(params, "head", feats), (b, s.f, s.d))


class GRU2FCN(Model):
    """GRU encoder; the final hidden state feeds a linear head."""

    head_name = "head"

    def _build_layout(self):
        s = self.spec
        return _gru("enc", s.hidden, s.d) + _fc("head", s.f * s.d, s.hidden)

    def forward(self, params, obs, masks=None, training=True):
        self._check_obs(obs)
        b = obs.value.shape[0]
        s = self.spec
        h = ad.constant(np.zeros((b, s.hidden)))
        for t in range(s.h):
            h = _gru_cell(params, "enc", obs[:, t, :], h, s.hidden)
        return ad.reshape(_linear(params, "head", h), (b, s.f, s.d))


class GRU2GRU(Model):
    """GRU encoder plus GRU decoder that feeds back its own predictions.

    The decoder starts from the encoder's final hidden state, its first
    input is the last observed value, and a shared per-step projection
    turns hidden states into values. There is no whole-sequence head.
    """

    head_name = None

    def _build_layout(self):
        s = self.spec
        return _gru("enc", s.hidden, s.d) + _gru("dec", s.hidden, s.d) + _fc("proj", s.d, s.hidden)

    def forward(self, params, obs, masks=None, training=True):
        self._check_obs(obs)
        b = obs.value.shape[0]
        s = self.spec
        h = ad.constant(np.zeros((b, s.hidden)))
        for t in range(s.h):
            h = _gru_cell(params, "enc", obs[:, t, :], h, s.hidden)
        inp = obs[:, s.h - 1, :]
        outputs = []
        for _ in range(s.f):
            h = _gru_cell(params, "dec", inp, h, s.hidden)
            y = _linear(params, "proj", h)  # (B, d)
            outputs.append(ad.reshape(y, (b, 1, s.d)))
            inp = y
        return ad.concat(outputs, axis=1)


_CLASSES = {"fcn": FCN, "cnn": CNN, "tcn": TCN, "gru2fcn": GRU2FCN, "gru2gru": GRU2GRU}


def build_model(spec: ModelSpec) -> Model:
    return _CLASSES[spec.architecture](spec)


def init_params(spec: ModelSpec, seed: int | None = None) -> ParamVector:
    """Deterministic initialization.

    Conv weights are normal(0, 0.02^2); fully connected and GRU weights
    are uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
    """
    model = build_model(spec)
    rng = np.random.default_rng(spec.init_seed if seed is None else seed)
    arrays = []
    for e in model.layout:
        if e.kind == "conv_w":
            arrays.append(rng.normal(0.0, 0.02, size=e.shape))
        elif e.kind in ("fc_w", "gru_w_ih", "gru_w_hh"):
            bound = 1.0 / np.sqrt(e.fan_in)
            arrays.append(rng.uniform(-bound, bound, size=e.shape))
        elif e.kind == "bias":
            arrays.append(np.zeros(e.shape))
        else:  # pragma: no cover - layout kinds are closed
            raise ModelBuildError(f"unknown layer kind {e.kind!r}")
    return ParamVector(model.layout, arrays)


def params_to_nodes(params: ParamVector, requires_grad: bool = False) -> dict[str, ad.Node]:
    make = ad.variable if requires_grad else ad.constant
    return {e.name: make(a) for e, a in zip(params.entries, params.arrays)}


def flatten_grad_nodes(
    grads: Mapping[ad.Node, ad.Node], param_nodes: dict[str, ad.Node], layout: list[LayerEntry]
) -> ad.Node:
    """Concatenate per-parameter gradient nodes in canonical layout order."""
    parts = []
    for e in layout:
        g = grads[param_nodes[e.name]]
        parts.append(ad.reshape(g, (int(np.prod(e.shape)),)))
    return ad.concat(parts, axis=0)


def mse_loss(pred: ad.Node, target: ad.Node | np.ndarray) -> ad.Node:
    """Mean squared error with mean reduction over every element."""
    target = ad.as_node(target)
    if pred.value.shape != target.value.shape:
        raise ad.ShapeError(f"mse shapes differ: {pred.value.shape} vs {target.value.shape}")
    diff = ad.sub(pred, target)
    return ad.mean_(ad.mul(diff, diff))


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(spec: ModelSpec, params: ParamVector, path: str | Path) -> str:
    """Write <path> (JSON sidecar) and <path>.bin (flat f64 blob); returns model_ref."""
    path = Path(path)
    blob = params.flatten().astype("<f8").tobytes()
    ref = hashlib.sha256(blob).hexdigest()[:16]
    path.parent.mkdir(parents=True, exist_ok=True)
    Path(str(path) + ".bin").write_bytes(blob)
    meta = {
        "spec": asdict(spec),
        "m": params.m,
        "layout": [[e.name, list(e.shape), e.kind, e.fan_in] for e in params.entries],
        "model_ref": ref,
        "blob": Path(str(path) + ".bin").name,
    }
    path.write_text(json.dumps(meta, indent=2))
    return ref


def load_checkpoint(path: str | Path) -> tuple[ModelSpec, ParamVector, str]:
    path = Path(path)
    meta = json.loads(path.read_text())
    spec = ModelSpec(**meta["spec"])
    flat = np.frombuffer((path.parent / meta["blob"]).read_bytes(), dtype="<f8")
    model = build_model(spec)
    params = ParamVector.unflatten(model.layout, np.array(flat))
    ref = hashlib.sha256(flat.astype("<f8").tobytes()).hexdigest()[:16]
    if ref != meta["model_ref"]:
        raise ValueError(f"checkpoint blob does not match recorded model_ref in {path}")
    return spec, params, ref
