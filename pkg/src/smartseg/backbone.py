"""Compact promptable encoder-decoder used for both teacher and student."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageFrame, PredictionMap, Source
from .flow import warp

CONCEPT_DIM = 64
POINT_INTERVAL_PX = 8
POINT_SIGMA_PX = 2.0


class PromptKind(str, Enum):
    CONCEPT = "concept"
    POINT = "point"


@dataclass(frozen=True)
class PromptMode:
    kind: PromptKind = PromptKind.CONCEPT
    points: Optional[Tuple[Tuple[float, float], ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", PromptKind(self.kind))
        if self.kind == PromptKind.CONCEPT and self.points is not None:
            raise ValueError("concept prompts carry no points")
        if self.points is not None:
            object.__setattr__(self, "points", tuple((float(x), float(y)) for x, y in self.points))

    @classmethod
    def concept(cls):
        return cls(PromptKind.CONCEPT)

    @classmethod
    def point(cls, points=None):
        return cls(PromptKind.POINT, points)


def _block(cin, cout):
    groups = 4 if cout % 4 == 0 else 1
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(groups, cout), nn.ReLU(inplace=True),
    )


class PromptSegNet(nn.Module):
    """U-Net style encoder/decoder with a prompt-conditioned bottleneck.

    Concept mode modulates the bottleneck channels with a FiLM scale/shift
    computed from a learned 64-d embedding. Point mode feeds a rasterized
    point heatmap as a second input channel instead.
    """

    def __init__(self, width=16, depth=3, point_mode=False):
        super().__init__()
        self.point_mode = point_mode
        chans = [width * 2 ** i for i in range(depth)]
        cin = 2 if point_mode else 1
        self.encoder = nn.ModuleList()
        for c in chans:
            self.encoder.append(_block(cin, c))
            cin = c
        bott = chans[-1]
        if point_mode:
            self.concept = None
            self.film = None
        else:
            self.concept = nn.Parameter(torch.randn(CONCEPT_DIM) * 0.5)
            self.film = nn.Linear(CONCEPT_DIM, 2 * bott)
        self.decoder = nn.ModuleList()
        for c in reversed(chans[:-1]):
            self.decoder.append(_block(cin + c, c))
            cin = c
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x, heatmap=None):
        if self.point_mode:
            if heatmap is None:
                heatmap = torch.zeros_like(x)
            x = torch.cat([x, heatmap], dim=1)
        skips = []
        for i, blk in enumerate(self.encoder):
            if i:
                x = F.avg_pool2d(x, 2)
            x = blk(x)
            skips.append(x)
        if self.film is not None:
            gamma, beta = self.film(self.concept).chunk(2)
            x = x * (1 + gamma[None, :, None, None]) + beta[None, :, None, None]
        for blk, skip in zip(self.decoder, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = blk(torch.cat([x, skip], dim=1))
        return self.head(x)[:, 0]

    def stage1_parameters(self):
        # the whole segmentation path; at this scale there is no separate
        # video-memory component to keep frozen
        return list(self.parameters())


class ModelHandle:
    """A network together with its role, prompt mode and freeze state."""

    def __init__(self, net, role, prompt, width, depth, seed, stage="init"):
        self.net = net
        self.role = Source(role)
        self.prompt = prompt
        self.width = width
        self.depth = depth
        self.seed = seed
        self.stage = stage
        self.frozen = False

    def __repr__(self):
        return (f"ModelHandle(role={self.role.value}, prompt={self.prompt.kind.value}, "
                f"width={self.width}, depth={self.depth}, frozen={self.frozen}, stage={self.stage!r})")

    def freeze(self):
        self.frozen = True
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        return self

    def trainable(self, stage1=False):
        if self.frozen:
            raise RuntimeError("frozen model rejects parameter updates")
        return self.net.stage1_parameters() if stage1 else list(self.net.parameters())

    def named_arrays(self):
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}

    def load_arrays(self, arrays):
        if self.frozen:
            raise RuntimeError("frozen model rejects parameter updates")
        state = {k: torch.from_numpy(np.array(v)) for k, v in arrays.items()}
        self.net.load_state_dict(state, strict=True)

    def n_parameters(self):
        return sum(p.numel() for p in self.net.parameters())

    def clone(self, role=None):
        other = build_model(self.width, self.depth, self.prompt, self.seed, role or self.role)
        other.net.load_state_dict(self.net.state_dict())
        other.stage = self.stage
        return other


def build_model(width=16, depth=3, prompt=None, seed=0, role=Source.STUDENT) -> ModelHandle:
    if width < 8 or depth < 2:
        raise ValueError("need width >= 8 and depth >= 2")
    prompt = prompt or PromptMode.concept()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = PromptSegNet(width, depth, point_mode=prompt.kind == PromptKind.POINT)
    return ModelHandle(net, role, prompt, width, depth, seed)


def points_heatmap(points, shape, sigma=POINT_SIGMA_PX):
    H, W = shape
    out = np.zeros((H, W))
    if not points:
        return out
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    for x, y in points:
        np.maximum(out, np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma ** 2)), out=out)
    return out


def skeleton_points(mask, interval=POINT_INTERVAL_PX):
    """Centerline points of ``mask`` spaced at least ``interval`` px apart."""
    from .metrics import skeletonize

    skel = skeletonize(mask)
    ys, xs = np.nonzero(skel)
    chosen = []
    for x, y in zip(xs, ys):
        if all((x - cx) ** 2 + (y - cy) ** 2 >= interval ** 2 for cx, cy in chosen):
            chosen.append((float(x), float(y)))
    return tuple(chosen)


def _as_batch(frames):
    if isinstance(frames, ImageFrame):
        frames = [frames]
    if isinstance(frames, torch.Tensor):
        x = frames
    else:
        x = torch.as_tensor(np.stack([np.asarray(getattr(f, "pixels", f)) for f in frames]))
    if x.dim() == 2:
        x = x[None]
    return x[:, None]


def forward_tensor(model: ModelHandle, x, heatmaps=None):
    """Batched logits ``[B, H, W]`` for images ``[B, H, W]`` (differentiable)."""
    x = _as_batch(x).to(next(model.net.parameters()).dtype)
    hm = None
    if model.prompt.kind == PromptKind.POINT:
        if heatmaps is None and model.prompt.points:
            heatmaps = np.broadcast_to(points_heatmap(model.prompt.points, x.shape[-2:]),
                                       (x.shape[0], *x.shape[-2:]))
        if heatmaps is not None:
            hm = torch.as_tensor(np.array(heatmaps) if not isinstance(heatmaps, torch.Tensor)
                                 else heatmaps, dtype=x.dtype).reshape(x.shape)
    return model.net(x, hm)


def forward(model: ModelHandle, frame: ImageFrame, points=None) -> PredictionMap:
    hm = None
    if points is not None and model.prompt.kind == PromptKind.POINT:
        hm = points_heatmap(points, frame.shape)[None]
    with torch.no_grad():
        logits = forward_tensor(model, frame, hm)[0]
    return PredictionMap(logits.double().numpy(), model.role)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    rotation_deg: float = 0.0
    scale_range: Tuple[float, float] = (1.0, 1.0)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ValueError("scale_range must be positive with min <= max")
        if self.noise_sigma < 0 or self.rotation_deg < 0:
            raise ValueError("rotation_deg and noise_sigma must be non-negative")


WEAK_POLICY = AugmentationPolicy(5.0, (0.95, 1.05), 0.01)
STRONG_POLICY = AugmentationPolicy(15.0, (0.85, 1.15), 0.03)


@dataclass(frozen=True)
class SimilarityTransform:
    """Rotation by ``angle_deg`` and isotropic ``scale`` about the image centre."""

    angle_deg: float = 0.0
    scale: float = 1.0

    def _sampling_flow(self, shape, inverse):
        H, W = shape
        cx, cy = (W - 1) / 2.0, (H - 1) / 2.0
        ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
        a = np.deg2rad(self.angle_deg)
        c, s = np.cos(a), np.sin(a)
        rx, ry = xs - cx, ys - cy
        if inverse:
            # output pixel p reads the augmented map at T(p)
            sx = self.scale * (c * rx - s * ry) + cx
            sy = self.scale * (s * rx + c * ry) + cy
        else:
            # augmented pixel p reads the source at T^{-1}(p)
            sx = (c * rx + s * ry) / self.scale + cx
            sy = (-s * rx + c * ry) / self.scale + cy
        return np.stack([sx - xs, sy - ys])

    def forward_flow(self, shape):
        return self._sampling_flow(shape, inverse=False)

    def inverse_flow(self, shape):
        return self._sampling_flow(shape, inverse=True)

    @property
    def is_identity(self):
        return self.angle_deg == 0.0 and self.scale == 1.0

    def apply(self, m):
        return m if self.is_identity else warp(m, self.forward_flow(np.shape(m)[-2:]))

    def invert(self, m):
        """Map something living in augmented coordinates back to the source frame."""
        return m if self.is_identity else warp(m, self.inverse_flow(np.shape(m)[-2:]))

    __call__ = invert


def sample_transform(policy: AugmentationPolicy, rng):
    angle = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg)) if policy.rotation_deg else 0.0
    lo, hi = policy.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return SimilarityTransform(angle, scale)


def apply_augmentation(frame: ImageFrame, policy: AugmentationPolicy, rng):
    """Randomly rotate, scale and add noise; return (augmented, inverse_transform)."""
    tf = sample_transform(policy, rng)
    px = tf.apply(frame.pixels)
    if policy.noise_sigma > 0:
        px = px + rng.normal(0.0, policy.noise_sigma, px.shape)
    return ImageFrame(np.clip(px, 0.0, 1.0), frame.frame_index), tf
