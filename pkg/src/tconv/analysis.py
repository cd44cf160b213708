"""Reading learned temporal parameters: conversions, statistics and visual probes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .affine import AffineParams
from .core import DTYPE, ContractError, Tape, Tensor, repeat_axis
from .network import DivergenceError, Model

__all__ = [
    "ParamRecord",
    "DisplayRecord",
    "records_from_model",
    "to_display",
    "from_display",
    "Trajectory",
    "trajectory",
    "StatsTable",
    "stats",
    "Distributions",
    "distributions",
    "saliency",
    "activation_max",
    "channel_responses",
    "motion_recovery",
    "write_records_csv",
    "read_records_csv",
]

PARAM_ROWS = ("s", "r", "p_x", "p_y")
BINS = 61


@dataclass(frozen=True)
class ParamRecord:
    layer: str
    filter: int
    step: int  # 1-based: step k maps slice k to slice k + 1
    s: float
    r: float
    tx: float
    ty: float

    @property
    def params(self) -> AffineParams:
        return AffineParams(self.s, self.r, self.tx, self.ty)


@dataclass(frozen=True)
class DisplayRecord:
    layer: str
    filter: int
    step: int
    s: float  # unitless, identity at 1
    rotation: float  # degrees, positive = clockwise on screen
    px_x: float
    px_y: float


def records_from_model(model: Model) -> list[ParamRecord]:
    out = []
    for layer in model.conv_layers:
        if layer.kind != "conv3t":
            continue
        th = layer.thetas.data
        for f in range(th.shape[0]):
            for t in range(th.shape[1]):
                s, r, tx, ty = (float(v) for v in th[f, t])
                out.append(ParamRecord(layer.name, f, t + 1, s, r, tx, ty))
    return out


def to_display(p: ParamRecord, W: int, H: int) -> DisplayRecord:
    """Pixel translations and clockwise-positive degrees."""
    if W < 1 or H < 1:
        raise ContractError("W and H must be >= 1")
    return DisplayRecord(p.layer, p.filter, p.step, p.s, -1 * math.degrees(p.r), p.tx * W, p.ty * H)


def from_display(d: DisplayRecord, W: int, H: int) -> ParamRecord:
    return ParamRecord(d.layer, d.filter, d.step, d.s, math.radians(-d.rotation), d.px_x / W, d.px_y / H)


# ----------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Cumulative pose after each step; row 0 is the identity pose.

    ``position`` is in fractions of the filter width/height.
    """

    position: np.ndarray  # (n + 1, 2)
    rotation: np.ndarray  # (n + 1,) radians
    scale: np.ndarray  # (n + 1,)
    matrices: np.ndarray = field(repr=False)  # (n + 1, 3, 3)

    def then(self, other: "Trajectory") -> "Trajectory":
        """Trajectory of this sequence followed by ``other``."""
        last = self.matrices[-1]
        mats = np.concatenate([self.matrices, last @ other.matrices[1:]])
        return _from_matrices(mats, np.concatenate([self.rotation, self.rotation[-1] + other.rotation[1:]]))


def _homogeneous(p: AffineParams) -> np.ndarray:
    c, sn = math.cos(p.r), math.sin(p.r)
    return np.array([
        [p.s * c, -p.s * sn, p.tx * p.s * c - p.ty * p.s * sn],
        [p.s * sn, p.s * c, p.tx * p.s * sn + p.ty * p.s * c],
        [0.0, 0.0, 1.0],
    ])


def _from_matrices(mats: np.ndarray, rotation: np.ndarray) -> Trajectory:
    scale = np.sqrt(np.abs(np.linalg.det(mats[:, :2, :2])))
    return Trajectory(mats[:, :2, 2].copy(), rotation, scale, mats)


def trajectory(thetas) -> Trajectory:
    """Compose the per-step maps ``M_k = M_{k-1} A_k`` and track the origin.

    ``M_k`` is the map by which slice ``k`` samples the base slice, so the
    position at step ``k`` is ``M_k`` applied to the origin. Scales multiply
    and rotations add.
    """
    thetas = [t if isinstance(t, AffineParams) else AffineParams.from_array(t) for t in thetas]
    if not thetas:
        raise ContractError("trajectory needs at least one step")
    mats = [np.eye(3)]
    for p in thetas:
        mats.append(mats[-1] @ _homogeneous(p))
    mats = np.stack(mats)
    rotation = np.concatenate([[0.0], np.cumsum([p.r for p in thetas])])
    traj = _from_matrices(mats, rotation)
    traj.scale = np.concatenate([[1.0], np.cumprod([p.s for p in thetas])])
    return traj


# ----------------------------------------------------------------------------
# model-level statistics


def _deviations(records) -> dict[str, np.ndarray]:
    arr = np.array([[r.s, r.r, r.tx, r.ty] for r in records], dtype=DTYPE).reshape(-1, 4)
    return {
        "s": np.abs(arr[:, 0] - 1.0),
        "r": np.abs(arr[:, 1]),
        "p_x": np.abs(arr[:, 2]),
        "p_y": np.abs(arr[:, 3]),
    }


@dataclass
class StatsTable:
    """Mean and population std of |deviation from identity| per parameter.

    ``r`` is in radians and ``p_x``/``p_y`` in fractions of the filter
    extent; ``scaled()`` gives the values x10^3 for display.
    """

    mean: dict[str, float]
    std: dict[str, float]
    count: int

    convention = "abs-deviation-from-identity, population std"

    def rows(self):
        for name in PARAM_ROWS:
            yield name, self.mean[name], self.std[name]

    def scaled(self) -> list[tuple[str, float, float]]:
        return [(name, m * 1e3, s * 1e3) for name, m, s in self.rows()]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["parameter", "mean_e3", "std_e3", "mean", "std", "n", "convention"])
            for name, m, s in self.rows():
                w.writerow([name, repr(m * 1e3), repr(s * 1e3), repr(m), repr(s), self.count, self.convention])

    def format(self) -> str:
        lines = ["parameter    mu / sigma (x1e-3)"]
        for name, m, s in self.scaled():
            lines.append(f"{name:<10} {m:8.2f} / {s:.2f}")
        return "\n".join(lines)


def stats(records) -> StatsTable:
    records = list(records)
    if not records:
        raise ContractError("stats() needs at least one parameter record")
    dev = _deviations(records)
    return StatsTable({k: float(v.mean()) for k, v in dev.items()},
                      {k: float(v.std()) for k, v in dev.items()},
                      len(records))


@dataclass
class Distributions:
    """Histograms on ranges shared by every model in one report."""

    ranges: dict[str, float]  # symmetric half-width per axis
    scale: dict[str, np.ndarray]  # model -> (BINS,) counts of s - 1
    rotation: dict[str, np.ndarray]  # model -> (BINS,) counts of display degrees
    translation: dict[str, np.ndarray]  # model -> (BINS, BINS) counts of (t_x, t_y)
    bins: int = BINS

    def edges(self, axis: str) -> np.ndarray:
        r = self.ranges[axis]
        return np.linspace(-r, r, self.bins + 1)


def _half_width(values, floor):
    m = max((float(np.max(np.abs(v))) for v in values if len(v)), default=0.0)
    return max(m * 1.05, floor)


def distributions(records_by_model: dict, bins: int = BINS, ranges: dict | None = None) -> Distributions:
    """Marginal histograms of s and r and the joint (t_x, t_y) histogram.

    Axis ranges are symmetric about the identity and identical for every
    model, sized by the widest spread among them unless ``ranges`` fixes
    them.
    """
    if not records_by_model or any(len(list(r)) == 0 for r in records_by_model.values()):
        raise ContractError("distributions() needs a non-empty record list per model")
    raw = {}
    for name, recs in records_by_model.items():
        arr = np.array([[r.s - 1.0, -math.degrees(r.r), r.tx, r.ty] for r in recs], dtype=DTYPE)
        raw[name] = arr
    if ranges is None:
        ranges = {
            "scale": _half_width([a[:, 0] for a in raw.values()], 1e-3),
            "rotation": _half_width([a[:, 1] for a in raw.values()], 1e-2),
            "translation": _half_width([a[:, 2:].ravel() for a in raw.values()], 1e-3),
        }
    out = Distributions(dict(ranges), {}, {}, {}, bins)
    for name, a in raw.items():
        out.scale[name] = np.histogram(a[:, 0], bins=out.edges("scale"))[0]
        out.rotation[name] = np.histogram(a[:, 1], bins=out.edges("rotation"))[0]
        e = out.edges("translation")
        out.translation[name] = np.histogram2d(a[:, 2], a[:, 3], bins=[e, e])[0].astype(np.int64)
    return out


# ----------------------------------------------------------------------------
# probes through the network


def _channel_objective(model: Model, x: Tensor, layer: str, channel: int) -> Tensor:
    out = model.forward(x, upto=layer)
    if out.ndim != 5:
        raise ContractError(f"layer {layer!r} does not produce a spatiotemporal map")
    if not 0 <= channel < out.shape[1]:
        raise ContractError(f"layer {layer!r} has {out.shape[1]} channels, asked for {channel}")
    return out[:, channel].mean()


@dataclass
class SaliencyResult:
    gradient: np.ndarray  # (C, T, W, H) d(mean activation)/d(input)
    activation: float
    frame: int  # input frame with the largest total |gradient|

    @property
    def maps(self) -> np.ndarray:
        """(T, W, H) per-frame maps, summed over channels."""
        return self.gradient.sum(axis=0)


def saliency(model: Model, clip, layer: str, channel: int) -> SaliencyResult:
    """Raw input gradient of one channel's mean activation."""
    clip = np.asarray(clip, dtype=DTYPE)
    x = Tensor(clip[None], requires_grad=True)
    with Tape() as tape:
        obj = _channel_objective(model, x, layer, channel)
    tape.backward(obj)
    grad = x.grad[0] if x.grad is not None else np.zeros_like(clip)
    frame = int(np.argmax(np.abs(grad).sum(axis=(0, 2, 3))))
    return SaliencyResult(grad, float(obj.data), frame)


@dataclass
class ActMaxResult:
    frame: np.ndarray  # (C, W, H)
    trace: list[float]


def activation_max(model: Model, layer: str, channel: int, steps: int = 100, lr: float = 0.05,
                   seed: int = 0, decay: float = 0.0, frames: int = 8, size: int = 28,
                   channels: int | None = None) -> ActMaxResult:
    """Gradient ascent on one frame, replicated over time, for a channel's mean activation.

    Each step moves the frame by ``lr`` along the unit-norm gradient and then
    shrinks it by ``(1 - decay)``. The start frame is uniform in [0, 1].
    ``trace`` holds the activation before every step and after the last.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    channels = channels or model.spec.in_channels
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, 1.0, size=(channels, size, size))
    trace = []
    for k in range(steps + 1):
        frame = Tensor(img, requires_grad=True, check=False)
        with Tape() as tape:
            clip = repeat_axis(frame, frames, axis=1)
            obj = _channel_objective(model, clip.reshape((1,) + clip.shape), layer, channel)
        value = float(obj.data)
        if not np.isfinite(value):
            raise DivergenceError(f"activation became {value} at step {k}", layer, k)
        trace.append(value)
        if k == steps:
            break
        tape.backward(obj)
        g = frame.grad if frame.grad is not None else np.zeros_like(img)
        norm = float(np.linalg.norm(g))
        if not np.isfinite(norm):
            raise DivergenceError(f"gradient became non-finite at step {k}", layer, k)
        if norm > 0:
            img = img + lr * g / norm
        img = img * (1.0 - decay)
    return ActMaxResult(img, trace)


def channel_responses(model: Model, X: np.ndarray, layer: str, batch_size: int = 64) -> np.ndarray:
    """(N, C) mean activation of every channel of ``layer`` per clip."""
    out = []
    for i in range(0, len(X), batch_size):
        a = model.forward(Tensor(X[i: i + batch_size], check=False), upto=layer).data
        out.append(a.mean(axis=(2, 3, 4)))
    return np.concatenate(out)


TRANSLATIONS = {
    "translate-left": ("tx", 1.0),
    "translate-right": ("tx", -1.0),
    "translate-up": ("ty", 1.0),
    "translate-down": ("ty", -1.0),
}


@dataclass
class RecoveryReport:
    agreement: dict[str, float]  # class -> weighted fraction of agreeing channels
    channels: dict[str, list[int]]
    selectivity: dict[str, list[float]]
    learned: dict[str, list[float]]  # mean learned translation along the class axis

    def holds(self, threshold: float = 0.7) -> bool:
        return bool(self.agreement) and all(a >= threshold for a in self.agreement.values())


def motion_recovery(model: Model, X: np.ndarray, y: np.ndarray, classes, layer: str = "conv1",
                    response_layer: str | None = None, top_k: int = 5) -> RecoveryReport:
    """Do the most class-selective channels move in the class's direction?

    For each translation class, channel selectivity is the mean response on
    that class minus the mean on the other classes, in units of the
    channel's response std. The ``top_k`` most selective channels vote with
    weight ``max(selectivity, 0)`` on whether the sign of their mean learned
    translation (along the class axis) matches the ground-truth sign.
    """
    conv = model[layer]
    if conv.kind != "conv3t":
        raise ContractError(f"{layer} has no temporal parameters")
    if response_layer is None:
        names = [l.name for l in model.layers]
        nxt = model.layers[names.index(layer) + 1]
        response_layer = nxt.name if nxt.kind == "relu" else layer
    resp = channel_responses(model, X, response_layer)
    spread = resp.std(axis=0) + 1e-12
    th = conv.thetas.data
    report = RecoveryReport({}, {}, {}, {})
    for label, name in enumerate(classes):
        if name not in TRANSLATIONS or not np.any(y == label):
            continue
        axis, sign = TRANSLATIONS[name]
        sel = (resp[y == label].mean(axis=0) - resp[y != label].mean(axis=0)) / spread
        top = np.argsort(-sel, kind="stable")[:top_k]
        col = 2 if axis == "tx" else 3
        learned = th[top, :, col].mean(axis=1)
        weights = np.maximum(sel[top], 0.0)
        agree = np.sign(learned) == sign
        total = weights.sum()
        report.agreement[name] = float((weights * agree).sum() / total) if total > 0 else 0.0
        report.channels[name] = [int(c) for c in top]
        report.selectivity[name] = [float(v) for v in sel[top]]
        report.learned[name] = [float(v) for v in learned]
    return report


# ----------------------------------------------------------------------------
# csv io


def write_records_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "filter", "step", "s", "r", "tx", "ty"])
        for r in records:
            w.writerow([r.layer, r.filter, r.step, repr(r.s), repr(r.r), repr(r.tx), repr(r.ty)])


def read_records_csv(path) -> list[ParamRecord]:
    with open(path, newline="") as fh:
        return [ParamRecord(row["layer"], int(row["filter"]), int(row["step"]), float(row["s"]),
                            float(row["r"]), float(row["tx"]), float(row["ty"]))
                for row in csv.DictReader(fh)]
