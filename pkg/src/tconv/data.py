"""Synthetic video clips whose classes are defined by ground-truth affine motion.

A clip is rendered analytically from a smooth random pattern (Gaussian blobs
and bars on a dark background). With ``M_0 = I`` and
``M_{t+1} = M_t A_t`` (``A_t`` the homogeneous form of ``truth[t]``), frame
``t`` samples the pattern at ``M_t p`` for every lattice point ``p``, so
``warp(frame_t, truth[t])`` reproduces ``frame_{t+1}`` up to bilinear
interpolation error and border effects.

``truth`` uses the sampler's pull-back convention: content that moves right
(+x) has ``t_x < 0``; content that grows (zoom-in) has ``s < 1``; content
that turns clockwise on screen (x right, y down) has ``r < 0``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affine import AffineParams, DomainError, compose, lattice
from .core import DTYPE, ContractError, load_tsr, save_tsr

__all__ = [
    "KINDS",
    "MOTION6",
    "APPEARANCE6",
    "DEFAULT_MAGNITUDE",
    "MotionSpec",
    "Clip",
    "generate",
    "make_motion_dataset",
    "make_appearance_dataset",
    "clips_to_arrays",
    "save_dataset",
    "load_dataset",
]

KINDS = (
    "zoom-in", "zoom-out", "rotate-cw", "rotate-ccw",
    "translate-left", "translate-right", "translate-up", "translate-down", "static",
)
MOTION6 = ("translate-left", "translate-right", "translate-up", "translate-down", "zoom-in", "zoom-out")
APPEARANCE6 = ("hbars", "vbars", "diag", "antidiag", "blobs", "dots")

# px/frame for translations, degrees/frame for rotations, percent/frame for zooms
DEFAULT_MAGNITUDE = {"translate": 2.0, "rotate": 6.0, "zoom": 5.0, "static": 0.0}


def _family(kind: str) -> str:
    return kind.split("-")[0]


@dataclass(frozen=True)
class MotionSpec:
    """What motion to render and how.

    ``magnitude`` is in px/frame, degrees/frame or percent/frame depending
    on the kind (``None`` picks the default). ``jitter`` perturbs every step
    by up to ``jitter`` px of translation, ``jitter`` degrees of rotation and
    ``jitter / 2`` percent of scale.
    """

    kind: str
    magnitude: float | None = None
    jitter: float = 0.25
    seed: int = 0
    frames: int = 8
    size: int = 28
    pattern: str = "composite"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown motion kind {self.kind!r}; expected one of {KINDS}")
        if self.frames < 2 or self.size < 8:
            raise DomainError(f"need >= 2 frames of >= 8 px, got {self.frames} x {self.size}")
        if self.pattern != "composite" and self.pattern not in APPEARANCE6:
            raise DomainError(f"unknown pattern {self.pattern!r}")
        m = self.resolved_magnitude
        fam = _family(self.kind)
        if not (math.isfinite(m) and math.isfinite(self.jitter)) or self.jitter < 0:
            raise DomainError("magnitude and jitter must be finite, jitter >= 0")
        if fam == "static":
            return
        if m <= 0:
            raise DomainError(f"{self.kind} needs a positive magnitude, got {m}")
        steps = self.frames - 1
        if fam == "translate" and (m + self.jitter > self.size / 4 or (m + self.jitter) * steps > self.size):
            raise DomainError(f"translation {m} px/frame leaves the {self.size}px frame")
        if fam == "rotate" and m + self.jitter > 30:
            raise DomainError(f"rotation {m} deg/frame exceeds 30")
        if fam == "zoom" and (m + self.jitter / 2 > 25 or (1 + (m + self.jitter / 2) / 100) ** steps > 2.0):
            raise DomainError(f"zoom {m} %/frame grows the pattern beyond 2x")

    @property
    def resolved_magnitude(self) -> float:
        return DEFAULT_MAGNITUDE[_family(self.kind)] if self.magnitude is None else float(self.magnitude)

    def step_params(self) -> AffineParams:
        """Nominal per-step pull-back parameters for this kind."""
        m, W = self.resolved_magnitude, self.size
        return {
            "translate-right": AffineParams(tx=-m / W),
            "translate-left": AffineParams(tx=m / W),
            "translate-down": AffineParams(ty=-m / W),
            "translate-up": AffineParams(ty=m / W),
            "zoom-in": AffineParams(s=1 / (1 + m / 100)),
            "zoom-out": AffineParams(s=1 + m / 100),
            "rotate-cw": AffineParams(r=-math.radians(m)),
            "rotate-ccw": AffineParams(r=math.radians(m)),
            "static": AffineParams(),
        }[self.kind]

    def truth(self, rng: np.random.Generator) -> list[AffineParams]:
        nominal = self.step_params()
        out = []
        for _ in range(self.frames - 1):
            if self.kind == "static" or self.jitter == 0:
                out.append(nominal)
                continue
            j = self.jitter
            out.append(AffineParams(
                s=nominal.s * (1 + rng.uniform(-j, j) / 200),
                r=nominal.r + math.radians(rng.uniform(-j, j)),
                tx=nominal.tx + rng.uniform(-j, j) / self.size,
                ty=nominal.ty + rng.uniform(-j, j) / self.size,
            ))
        return out


@dataclass
class Clip:
    frames: np.ndarray  # (C, T, W, H) in [0, 1]
    label: int
    kind: str
    truth: list[AffineParams]
    seed: tuple[int, int] = (0, 0)
    pattern: "Pattern | None" = field(default=None, repr=False, compare=False)


# ----------------------------------------------------------------------------
# patterns


@dataclass
class Pattern:
    """Sum of anisotropic Gaussians in frame-width units, clipped to [0, 1]."""

    centers: np.ndarray  # (K, 2)
    sigmas: np.ndarray  # (K, 2) along/across
    angles: np.ndarray  # (K,)
    amps: np.ndarray  # (K,)

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        """Evaluate at ``(..., 2)`` points."""
        out = np.zeros(pts.shape[:-1], dtype=DTYPE)
        for c, (sa, sc), a, amp in zip(self.centers, self.sigmas, self.angles, self.amps):
            d = pts - c
            u = d[..., 0] * math.cos(a) + d[..., 1] * math.sin(a)
            v = -d[..., 0] * math.sin(a) + d[..., 1] * math.cos(a)
            out += amp * np.exp(-0.5 * ((u / sa) ** 2 + (v / sc) ** 2))
        return np.clip(out, 0.0, 1.0)


def random_pattern(rng: np.random.Generator, size: int, style: str = "composite") -> Pattern:
    px = 1.0 / size
    extent = 1.0  # centres in [-1, 1]^2: twice the frame in each direction
    if style == "composite":
        k = int(rng.integers(10, 16))
        bar = rng.random(k) < 0.4
        along = np.where(bar, rng.uniform(4, 7, k), rng.uniform(1.6, 3.0, k)) * px
        across = np.where(bar, rng.uniform(1.2, 1.8, k), along / px) * px
        angles = rng.uniform(0, math.pi, k)
        amps = rng.uniform(0.7, 1.0, k)
    else:
        k = {"blobs": 14, "dots": 60}.get(style, 18)
        k = int(k * rng.uniform(0.8, 1.2))
        if style in ("blobs", "dots"):
            s = (2.8 if style == "blobs" else 1.0) * px
            along = np.full(k, s) * rng.uniform(0.9, 1.1, k)
            across = along.copy()
            angles = np.zeros(k)
        else:
            along = rng.uniform(7, 10, k) * px
            across = rng.uniform(1.1, 1.5, k) * px
            base = {"hbars": 0.0, "vbars": math.pi / 2, "diag": math.pi / 4, "antidiag": 3 * math.pi / 4}[style]
            angles = base + rng.uniform(-0.1, 0.1, k)
        amps = rng.uniform(0.7, 1.0, k)
    centers = rng.uniform(-extent, extent, (k, 2))
    return Pattern(centers, np.stack([along, across], axis=1), angles, amps)


def _homogeneous(p: AffineParams) -> np.ndarray:
    m = np.eye(3)
    m[:2] = compose(p).data
    return m


def render(pattern: Pattern, truth: list[AffineParams], size: int) -> np.ndarray:
    """``(T, W, H)`` frames; frame ``t`` samples the pattern at ``M_t p``."""
    base = lattice(size, size).reshape(-1, 2)
    homog = np.concatenate([base, np.ones((base.shape[0], 1))], axis=1)
    M = np.eye(3)
    frames = []
    for t in range(len(truth) + 1):
        pts = homog @ M[:2].T
        frames.append(pattern(pts).reshape(size, size))
        if t < len(truth):
            M = M @ _homogeneous(truth[t])
    return np.stack(frames)


def _clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate(spec: MotionSpec, n: int, label: int = 0, start: int = 0) -> list[Clip]:
    """``n`` clips of one motion kind; clip ``i`` is seeded by ``(spec.seed, start + i)``."""
    if n < 0:
        raise DomainError(f"clip count must be >= 0, got {n}")
    clips = []
    for i in range(start, start + n):
        rng = _clip_rng(spec.seed, i)
        pattern = random_pattern(rng, spec.size, spec.pattern)
        truth = spec.truth(rng)
        frames = render(pattern, truth, spec.size)[None]
        clips.append(Clip(frames, label, spec.kind, truth, (spec.seed, i), pattern))
    return clips


def make_motion_dataset(n: int, classes=MOTION6, seed: int = 0, jitter: float = 0.25,
                        frames: int = 8, size: int = 28, magnitudes: dict | None = None) -> list[Clip]:
    """Balanced clips, label ``i % len(classes)``; each class is one motion kind."""
    if n < 1:
        raise DomainError(f"dataset size must be >= 1, got {n}")
    magnitudes = magnitudes or {}
    specs = [MotionSpec(k, magnitudes.get(_family(k)), jitter, seed, frames, size) for k in classes]
    clips = []
    for i in range(n):
        label = i % len(classes)
        clips.extend(generate(specs[label], 1, label=label, start=i))
    return clips


def make_appearance_dataset(n: int, seed: int = 0, jitter: float = 0.25, frames: int = 8,
                            size: int = 28, kinds=KINDS) -> list[Clip]:
    """Balanced clips whose label is the texture family; motion is drawn independently."""
    if n < 1:
        raise DomainError(f"dataset size must be >= 1, got {n}")
    clips = []
    for i in range(n):
        label = i % len(APPEARANCE6)
        rng = _clip_rng(seed, i)
        kind = kinds[int(rng.integers(len(kinds)))]
        spec = MotionSpec(kind, None, jitter, seed, frames, size, pattern=APPEARANCE6[label])
        pattern = random_pattern(rng, size, APPEARANCE6[label])
        truth = spec.truth(rng)
        clips.append(Clip(render(pattern, truth, size)[None], label, kind, truth, (seed, i), pattern))
    return clips


def clips_to_arrays(clips: list[Clip]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([c.frames for c in clips]), np.array([c.label for c in clips], dtype=np.int64)


# ----------------------------------------------------------------------------
# on-disk layout: manifest.json + clips/NNNNN.tsr


def save_dataset(path, clips: list[Clip], classes, config: dict | None = None) -> Path:
    path = Path(path)
    (path / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, clip in enumerate(clips):
        name = f"clips/{k:05d}.tsr"
        save_tsr(path / name, clip.frames)
        entries.append({
            "file": name,
            "label": int(clip.label),
            "kind": clip.kind,
            "seed": list(clip.seed),
            "truth": [[p.s, p.r, p.tx, p.ty] for p in clip.truth],
        })
    manifest = {"classes": list(classes), "config": config or {}, "clips": entries}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, dict]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.is_file():
        raise ContractError(f"{path} has no manifest.json")
    manifest = json.loads(mf.read_text())
    X = np.stack([load_tsr(path / e["file"]) for e in manifest["clips"]])
    y = np.array([e["label"] for e in manifest["clips"]], dtype=np.int64)
    return X, y, manifest
