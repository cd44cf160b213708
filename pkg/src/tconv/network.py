"""Small video classifiers built from factorized (3T) or dense (3D) conv layers."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .core import DTYPE, ContractError, Tape, Tensor, mean, relu, softmax_cross_entropy
from .conv import ConvGeometry, conv3d
from .filters import identity_thetas, init_base, materialize_bank, param_count

logger = logging.getLogger(__name__)

__all__ = [
    "DivergenceError",
    "Conv3T",
    "Conv3D",
    "ReLU",
    "GlobalAvgPool",
    "Dense",
    "Model",
    "ModelSpec",
    "TrainConfig",
    "SGD",
    "tinyt_spec",
    "build_model",
    "train_step",
    "train",
    "transfer_2d",
    "make_optimizer",
    "predict_logits",
]


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, layer: str | None = None, step: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.step = step


# ----------------------------------------------------------------------------
# layers


class Conv3T:
    kind = "conv3t"

    def __init__(self, name, c_in, c_out, size, depth, base=None, thetas=None, bias=None,
                 stride=1, padding=0, rng=None):
        self.name = name
        self.geometry = ConvGeometry(c_in, c_out, (depth, size, size), stride, padding)
        rng = rng or np.random.default_rng(0)
        if base is None:
            base = init_base(rng, c_out, c_in, size, size)
        self.base = Tensor(base, requires_grad=True, name=f"{name}.base")
        self.thetas = Tensor(identity_thetas(c_out, depth) if thetas is None else thetas,
                             requires_grad=True, name=f"{name}.thetas")
        self.bias = Tensor(np.zeros(c_out) if bias is None else bias, requires_grad=True, name=f"{name}.bias")
        if self.base.shape != (c_out, c_in, size, size) or self.thetas.shape != (c_out, depth - 1, 4):
            raise ContractError(f"{name}: parameter shapes do not match geometry {self.geometry}")

    @property
    def depth(self) -> int:
        return self.geometry.kernel[0]

    def weight(self) -> Tensor:
        return materialize_bank(self.base, self.thetas)

    def params(self) -> list[Tensor]:
        return [self.base, self.thetas, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        g = self.geometry
        return conv3d(x, self.weight(), self.bias, g.stride, g.padding)

    def n_filter_params(self) -> int:
        """Trainable scalars excluding the bias."""
        return self.base.size + self.thetas.size

    def expected_filter_params(self) -> int:
        g = self.geometry
        return g.c_out * param_count(g.c_in, g.kernel[1], g.kernel[2], g.kernel[0])[0]


class Conv3D:
    kind = "conv3d"

    def __init__(self, name, c_in, c_out, size, depth, weight=None, bias=None, stride=1, padding=0, rng=None):
        self.name = name
        self.geometry = ConvGeometry(c_in, c_out, (depth, size, size), stride, padding)
        rng = rng or np.random.default_rng(0)
        if weight is None:
            bound = np.sqrt(1.0 / (c_in * depth * size * size))
            weight = rng.uniform(-bound, bound, size=(c_out, c_in, depth, size, size))
        self.weight_ = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out) if bias is None else bias, requires_grad=True, name=f"{name}.bias")
        if self.weight_.shape != (c_out, c_in, depth, size, size):
            raise ContractError(f"{name}: weight shape does not match geometry {self.geometry}")

    @property
    def depth(self) -> int:
        return self.geometry.kernel[0]

    def weight(self) -> Tensor:
        return self.weight_

    def params(self) -> list[Tensor]:
        return [self.weight_, self.bias]

    def forward(self, x: Tensor) -> Tensor:
        g = self.geometry
        return conv3d(x, self.weight_, self.bias, g.stride, g.padding)

    def n_filter_params(self) -> int:
        return self.weight_.size

    def expected_filter_params(self) -> int:
        g = self.geometry
        return g.c_out * param_count(g.c_in, g.kernel[1], g.kernel[2], g.kernel[0])[1]


class ReLU:
    kind = "relu"

    def __init__(self, name):
        self.name = name

    def params(self):
        return []

    def forward(self, x):
        return relu(x)


class GlobalAvgPool:
    kind = "gap"

    def __init__(self, name):
        self.name = name

    def params(self):
        return []

    def forward(self, x):
        return mean(x, axis=(2, 3, 4))


class Dense:
    kind = "dense"

    def __init__(self, name, n_in, n_out, weight=None, bias=None, rng=None):
        self.name = name
        rng = rng or np.random.default_rng(0)
        if weight is None:
            bound = np.sqrt(1.0 / n_in)
            weight = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight_ = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out) if bias is None else bias, requires_grad=True, name=f"{name}.bias")
        if self.weight_.shape != (n_in, n_out):
            raise ContractError(f"{name}: weight must be ({n_in}, {n_out}), got {self.weight_.shape}")

    def params(self):
        return [self.weight_, self.bias]

    def forward(self, x):
        return x @ self.weight_ + self.bias


# ----------------------------------------------------------------------------
# model description and assembly


@dataclass
class ModelSpec:
    """Ordered layer descriptors plus class count and init seed.

    Each descriptor is a dict with ``type`` in {conv3t, conv3d, relu, gap,
    dense} and ``name``; conv layers add ``filters``, ``size``, ``depth``.
    The dense head's width is inferred from the preceding conv layer.
    """

    layers: list[dict]
    num_classes: int
    in_channels: int = 1
    seed: int = 0
    input_offset: float = 0.0  # subtracted from every input value

    def __post_init__(self):
        heads = [d for d in self.layers if d["type"] == "dense"]
        if len(heads) != 1 or self.layers[-1]["type"] != "dense":
            raise ContractError("a model needs exactly one dense head, placed last")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        names = [d["name"] for d in self.layers]
        if len(set(names)) != len(names):
            raise ContractError(f"layer names must be unique: {names}")
        pooled = False
        for d in self.layers:
            if d["type"] not in {"conv3t", "conv3d", "relu", "gap", "dense"}:
                raise ContractError(f"unknown layer type {d['type']!r}")
            if d["type"] in ("conv3t", "conv3d") and pooled:
                raise ContractError("conv layers must precede global-average-pool")
            pooled |= d["type"] == "gap"
        if not pooled:
            raise ContractError("a global-average-pool layer must precede the head")

    def to_dict(self) -> dict:
        return asdict(self)


def tinyt_spec(num_classes: int, mode: str = "3t", in_channels: int = 1, seed: int = 0,
               input_offset: float = 0.5) -> ModelSpec:
    """conv(8, 5x5, D=4) -> relu -> conv(16, 3x3, D=3) -> relu -> gap -> dense.

    ``mode`` is ``3t`` (factorized), ``3d`` (dense) or ``2d`` (depth 1, the
    per-frame source model for weight transfer).
    """
    if mode not in ("3t", "3d", "2d"):
        raise ContractError(f"mode must be 3t, 3d or 2d, got {mode!r}")
    conv = "conv3d" if mode == "3d" else "conv3t"
    d1, d2 = (1, 1) if mode == "2d" else (4, 3)
    return ModelSpec(
        layers=[
            {"type": conv, "name": "conv1", "filters": 8, "size": 5, "depth": d1},
            {"type": "relu", "name": "relu1"},
            {"type": conv, "name": "conv2", "filters": 16, "size": 3, "depth": d2},
            {"type": "relu", "name": "relu2"},
            {"type": "gap", "name": "gap"},
            {"type": "dense", "name": "head"},
        ],
        num_classes=num_classes,
        in_channels=in_channels,
        seed=seed,
        input_offset=input_offset,
    )


class Model:
    def __init__(self, spec: ModelSpec, layers: list):
        self.spec = spec
        self.layers = layers

    def __getitem__(self, name: str):
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def conv_layers(self) -> list:
        return [l for l in self.layers if l.kind in ("conv3t", "conv3d")]

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def forward(self, x, upto: str | None = None, trace: dict | None = None) -> Tensor:
        """Logits for a ``(N, C, T, W, H)`` batch, or the output of layer ``upto``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 5 or x.shape[1] != self.spec.in_channels:
            raise ContractError(f"clips must be (N, {self.spec.in_channels}, T, W, H), got {x.shape}")
        if self.spec.input_offset:
            x = x - self.spec.input_offset
        for layer in self.layers:
            x = layer.forward(x)
            if trace is not None:
                trace[layer.name] = x
            if layer.name == upto:
                return x
        if upto is not None:
            raise KeyError(upto)
        return x

    __call__ = forward

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params():
            arr = np.asarray(state[p.name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ContractError(f"{p.name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


def build_model(spec: ModelSpec) -> Model:
    rng = np.random.default_rng(spec.seed)
    layers = []
    channels = spec.in_channels
    for d in spec.layers:
        kind, name = d["type"], d["name"]
        if kind == "conv3t":
            layers.append(Conv3T(name, channels, d["filters"], d["size"], d["depth"],
                                 stride=d.get("stride", 1), padding=d.get("padding", 0), rng=rng))
            channels = d["filters"]
        elif kind == "conv3d":
            layers.append(Conv3D(name, channels, d["filters"], d["size"], d["depth"],
                                 stride=d.get("stride", 1), padding=d.get("padding", 0), rng=rng))
            channels = d["filters"]
        elif kind == "relu":
            layers.append(ReLU(name))
        elif kind == "gap":
            layers.append(GlobalAvgPool(name))
        else:
            layers.append(Dense(name, channels, spec.num_classes, rng=rng))
    return Model(spec, layers)


def transfer_2d(source: Model, spec: ModelSpec) -> Model:
    """3T model whose conv bases are the 2D model's filters, with identity Θ.

    On a temporally constant clip a factorized layer with identity Θ sums
    ``D`` equal slices, so its response is ``D`` times the 2D response. The
    conv biases are multiplied and the head weights divided by the running
    product of depths, which makes the logits equal to the 2D model's logits
    on any single frame.
    """
    model = build_model(spec)
    gain = 1.0
    for src, dst in zip(source.conv_layers, model.conv_layers):
        if dst.kind != "conv3t":
            raise ContractError("transfer target must use factorized conv layers")
        w2d = src.weight().data
        if w2d.shape[2] != 1:
            raise ContractError(f"{src.name}: source layer is not 2D (depth {w2d.shape[2]})")
        if w2d[:, :, 0].shape != dst.base.shape:
            raise ContractError(f"{src.name}: filter bank {w2d[:, :, 0].shape} does not fit {dst.base.shape}")
        gain *= dst.depth
        dst.base.data = w2d[:, :, 0].copy()
        dst.thetas.data = identity_thetas(dst.base.shape[0], dst.depth)
        dst.bias.data = src.bias.data * gain
    model.head.weight_.data = source.head.weight_.data / gain
    model.head.bias.data = source.head.bias.data.copy()
    return model


# ----------------------------------------------------------------------------
# optimization


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    weight_decay: float = 0.0
    theta_lr_mult: float = 1.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ContractError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ContractError(f"epochs must be >= 0, got {self.epochs}")


class SGD:
    """SGD with heavy-ball momentum: ``v = m v + g; p -= lr_p v``.

    ``lr_mult`` maps a parameter to a learning-rate multiplier and ``decay``
    says which parameters receive L2 weight decay.
    """

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0,
                 lr_mult: Callable[[Tensor], float] | None = None,
                 decay: Callable[[Tensor], bool] | None = None,
                 project: Callable[[Tensor], None] | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_mult = lr_mult or (lambda p: 1.0)
        self.decay = decay or (lambda p: True)
        self.project = project
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and self.decay(p):
                g = g + self.weight_decay * p.data
            v = self.velocity[k] = self.momentum * self.velocity[k] + g
            lr = self.lr * self.lr_mult(p)
            if lr:
                p.data = p.data - lr * v
                if self.project is not None:
                    self.project(p)


def _is_theta(p: Tensor) -> bool:
    return bool(p.name) and p.name.endswith(".thetas")


# scales are kept positive by projection after every update
MIN_SCALE = 0.05


def _project_scale(p: Tensor) -> None:
    if _is_theta(p) and p.data.size:
        p.data[..., 0] = np.maximum(p.data[..., 0], MIN_SCALE)


def make_optimizer(model: Model, config: TrainConfig) -> SGD:
    return SGD(model.params(), config.lr, config.momentum, config.weight_decay,
               lr_mult=lambda p: config.theta_lr_mult if _is_theta(p) else 1.0,
               decay=lambda p: bool(p.name) and (p.name.endswith(".base") or p.name.endswith(".weight")),
               project=_project_scale)


def _offending_layer(model: Model, trace: dict) -> str | None:
    for layer in model.layers:
        if any(not np.all(np.isfinite(p.data)) for p in layer.params()):
            return layer.name
        out = trace.get(layer.name)
        if out is not None and not np.all(np.isfinite(out.data)):
            return layer.name
    return None


def train_step(model: Model, X, y, optimizer: SGD, step: int | None = None) -> float:
    """One forward/backward/update on a batch; returns the batch loss."""
    optimizer.zero_grad()
    trace: dict = {}
    with np.errstate(over="ignore", invalid="ignore"):
        with Tape() as tape:
            loss = softmax_cross_entropy(model.forward(X, trace=trace), y)
    value = float(loss.data)
    if not np.isfinite(value):
        layer = _offending_layer(model, trace)
        raise DivergenceError(f"loss became {value} (first non-finite layer: {layer})", layer, step)
    tape.backward(loss)
    optimizer.step()
    return value


def train(model: Model, X: np.ndarray, y: np.ndarray, config: TrainConfig,
          callback: Callable[[int, int, float], None] | None = None) -> list[float]:
    """Mini-batch training; returns the per-step loss curve."""
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config)
    curve = []
    n = len(X)
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start: start + config.batch_size]
            loss = train_step(model, X[idx], y[idx], optimizer, step)
            curve.append(loss)
            step += 1
        if callback is not None:
            callback(epoch, step, float(np.mean(curve[-max(1, -(-n // config.batch_size)):])))
    return curve


def predict_logits(model: Model, X: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [model.forward(Tensor(X[i: i + batch_size], check=False)).data for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0)
