"""Domain types and seeding helpers shared across the package."""

from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np


class Source(str, Enum):
    TEACHER = "teacher"
    STUDENT = "student"


class FlowDirection(str, Enum):
    FORWARD = "forward"    # t -> t+1
    BACKWARD = "backward"  # t+1 -> t


def _frozen_array(a, dtype=None):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ImageFrame:
    pixels: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        px = _frozen_array(self.pixels, np.float64)
        if px.ndim != 2:
            raise ValueError(f"frame must be 2-D, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min(initial=0.0) < 0.0 or px.max(initial=0.0) > 1.0:
            raise ValueError("pixel intensities must lie in [0, 1]")
        if self.frame_index < 0:
            raise ValueError("frame_index must be non-negative")
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class BinaryMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {v.shape}")
        if v.dtype != bool and not np.all((v == 0) | (v == 1)):
            raise ValueError("mask values must be binary")
        object.__setattr__(self, "values", _frozen_array(v, np.uint8))

    @property
    def shape(self):
        return self.values.shape

    def as_bool(self):
        return self.values.astype(bool)


@dataclass(frozen=True)
class PredictionMap:
    """Pre-sigmoid logits for one frame."""

    logits: np.ndarray
    source: Source = Source.STUDENT

    def __post_init__(self):
        lg = _frozen_array(self.logits, np.float64)
        if lg.ndim != 2:
            raise ValueError(f"logits must be 2-D, got shape {lg.shape}")
        if not np.all(np.isfinite(lg)):
            raise ValueError("logits must be finite")
        object.__setattr__(self, "logits", lg)
        object.__setattr__(self, "source", Source(self.source))

    @property
    def shape(self):
        return self.logits.shape

    def probabilities(self):
        # logistic written via tanh so that large |logit| never overflows
        return 0.5 * (1.0 + np.tanh(0.5 * self.logits))


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray
    direction: FlowDirection = FlowDirection.FORWARD

    def __post_init__(self):
        u = _frozen_array(self.u, np.float32)
        v = _frozen_array(self.v, np.float32)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError("u and v must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("flow must be finite")
        bound = max(u.shape)
        if np.abs(u).max(initial=0.0) > bound or np.abs(v).max(initial=0.0) > bound:
            raise ValueError("flow magnitude exceeds image extent")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "direction", FlowDirection(self.direction))

    @property
    def shape(self):
        return self.u.shape

    @classmethod
    def zeros(cls, shape, direction=FlowDirection.FORWARD):
        return cls(np.zeros(shape, np.float32), np.zeros(shape, np.float32), direction)


@dataclass(frozen=True)
class VideoClip:
    frames: Tuple[ImageFrame, ...]
    masks: Optional[Tuple[Tuple[int, BinaryMask], ...]] = None
    flows: Optional[Tuple[Tuple[FlowField, FlowField], ...]] = None
    clip_id: str = "clip"

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("a clip needs at least one frame")
        idx = [f.frame_index for f in frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        shape = frames[0].shape
        if any(f.shape != shape for f in frames):
            raise ValueError("all frames of a clip must share one shape")
        object.__setattr__(self, "frames", frames)

        if self.masks is not None:
            masks = tuple((int(t), m) for t, m in self.masks)
            known = set(idx)
            for t, m in masks:
                if t not in known:
                    raise ValueError(f"mask for unknown frame index {t}")
                if m.shape != shape:
                    raise ValueError("mask shape differs from frame shape")
            object.__setattr__(self, "masks", masks)

        if self.flows is not None:
            flows = tuple((fw, bw) for fw, bw in self.flows)
            if len(flows) != len(frames) - 1:
                raise ValueError("need exactly one flow pair per consecutive frame pair")
            for fw, bw in flows:
                if fw.direction != FlowDirection.FORWARD or bw.direction != FlowDirection.BACKWARD:
                    raise ValueError("flow pairs must be (forward, backward)")
                if fw.shape != shape or bw.shape != shape:
                    raise ValueError("flow shape differs from frame shape")
            object.__setattr__(self, "flows", flows)

    @property
    def shape(self):
        return self.frames[0].shape

    def __len__(self):
        return len(self.frames)

    @property
    def has_masks(self):
        return bool(self.masks)

    def mask_dict(self):
        return dict(self.masks or ())

    def position_of(self, frame_index):
        for i, f in enumerate(self.frames):
            if f.frame_index == frame_index:
                return i
        raise KeyError(frame_index)

    def with_masks(self, masks, clip_id=None):
        return VideoClip(self.frames, masks, self.flows, clip_id or self.clip_id)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.05
    lambda2: float = 0.95
    lambda_dice: float = 0.5
    lambda_bce: float = 0.5
    lambda_conf: float = 0.5
    lambda_opti: float = 0.3
    lambda_coh: float = 0.2
    beta: float = 0.01
    eta: float = 1e-6
    eps: float = 1e-6

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.eta <= 0 or self.eps <= 0:
            raise ValueError("eta and eps must be strictly positive")


def default_loss_weights() -> LossWeights:
    return LossWeights()


def seeded_rng(seed, *stream) -> np.random.Generator:
    """Deterministic numpy generator.

    Extra ``stream`` integers derive independent child streams from the same
    seed, e.g. ``seeded_rng(seed, iteration, 3)``.
    """
    if seed < 0 or any(s < 0 for s in stream):
        raise ValueError("seed must be non-negative")
    return np.random.default_rng([int(seed), *map(int, stream)])


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))
