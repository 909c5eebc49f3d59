"""Synthetic angiography-like video clips with exact masks and flow.

Vessel trees are unions of discs swept along quadratic Bezier centerlines.
Each frame is the canonical scene moved by a global rigid pose, so the
ground-truth flow between two frames is the closed-form composition of the
two poses.
"""

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .core import (BinaryMask, FlowDirection, FlowField, ImageFrame, VideoClip,
                   seeded_rng)


@dataclass(frozen=True)
class VesselTreeSpec:
    n_branches: int = 4
    branch_width_px: Tuple[float, float] = (1.8, 4.0)  # (min, max) tube diameter
    tortuosity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.branch_width_px
        if self.n_branches < 1:
            raise ValueError("n_branches must be >= 1")
        if not (1.5 <= lo <= hi <= 6.0):
            raise ValueError("branch widths must satisfy 1.5 <= min <= max <= 6")
        if not 0.0 <= self.tortuosity <= 1.0:
            raise ValueError("tortuosity must lie in [0, 1]")


@dataclass(frozen=True)
class MotionSpec:
    translation_amp_px: float = 2.0
    rotation_amp_deg: float = 3.0
    period_frames: int = 8
    phase: float = 0.0
    # constant velocity on top of the periodic component, px/frame as (x, y)
    drift_px: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.translation_amp_px < 0 or self.rotation_amp_deg < 0:
            raise ValueError("motion amplitudes must be non-negative")
        if self.period_frames < 2:
            raise ValueError("period_frames must be >= 2")

    def pose(self, t, center):
        """Rotation angle (rad) and translation (tx, ty) of frame ``t``."""
        w = 2.0 * np.pi / self.period_frames
        ang = np.deg2rad(self.rotation_amp_deg) * np.sin(w * t + self.phase)
        tx = self.translation_amp_px * np.sin(w * t + self.phase) + self.drift_px[0] * t
        ty = 0.6 * self.translation_amp_px * np.sin(2.0 * w * t + self.phase) + self.drift_px[1] * t
        return ang, np.array([tx, ty])


@dataclass(frozen=True)
class DegradationSpec:
    contrast_level: float = 0.6
    noise_sigma: float = 0.03
    blur_sigma_px: float = 0.5
    background_amp: float = 0.08
    # contrast at the start/end of the injection ramp, relative to the peak
    ramp_floor: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.contrast_level <= 1.0:
            raise ValueError("contrast_level must lie in (0, 1]")
        if self.noise_sigma < 0 or self.blur_sigma_px < 0 or self.background_amp < 0:
            raise ValueError("degradation magnitudes must be non-negative")
        if not 0.0 <= self.ramp_floor <= 1.0:
            raise ValueError("ramp_floor must lie in [0, 1]")


BACKGROUND_LEVEL = 0.7
VESSEL_DEPTH = 0.5


def _bezier(p0, p1, p2, n):
    s = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - s) ** 2 * p0 + 2 * (1 - s) * s * p1 + s ** 2 * p2


def build_tree(tree: VesselTreeSpec, H, W):
    """Centerline samples (K, 2) in (x, y) pixel coordinates and radii (K,)."""
    rng = seeded_rng(tree.seed, 101)
    lo, hi = tree.branch_width_px
    size = float(min(H, W))
    centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])

    # trunk enters near one border and crosses the field of view
    a = rng.uniform(0, 2 * np.pi)
    d = np.array([np.cos(a), np.sin(a)])
    p0 = centre - 0.45 * size * d + rng.uniform(-0.1, 0.1, 2) * size
    p2 = centre + 0.35 * size * d + rng.uniform(-0.1, 0.1, 2) * size
    branches = [(p0, p2, hi, max(lo, 0.7 * hi))]
    for _ in range(tree.n_branches - 1):
        parent = branches[rng.integers(len(branches))]
        s = rng.uniform(0.2, 0.8)
        q0, q2, w0, w1 = parent
        start = q0 + s * (q2 - q0)
        pdir = (q2 - q0) / (np.linalg.norm(q2 - q0) + 1e-12)
        turn = rng.uniform(np.deg2rad(30), np.deg2rad(70)) * rng.choice([-1.0, 1.0])
        c, sn = np.cos(turn), np.sin(turn)
        bdir = np.array([c * pdir[0] - sn * pdir[1], sn * pdir[0] + c * pdir[1]])
        length = rng.uniform(0.25, 0.45) * size
        wstart = max(lo, 0.85 * (w0 + s * (w1 - w0)))
        branches.append((start, start + length * bdir, wstart, max(lo, 0.75 * wstart)))

    pts, radii = [], []
    for q0, q2, w0, w1 in branches:
        chord = q2 - q0
        length = float(np.linalg.norm(chord))
        if length < 1.0:
            raise ValueError("degenerate vessel tree: zero-length branch")
        normal = np.array([-chord[1], chord[0]]) / length
        q1 = 0.5 * (q0 + q2) + normal * rng.uniform(-0.5, 0.5) * tree.tortuosity * length
        n = int(np.ceil(length * 4)) + 2
        pts.append(_bezier(q0, q1, q2, n))
        radii.append(0.5 * np.linspace(w0, w1, n))
    return np.concatenate(pts), np.concatenate(radii)


def _rotate(points, ang, centre, shift):
    c, s = np.cos(ang), np.sin(ang)
    rel = points - centre
    out = np.empty_like(rel)
    out[:, 0] = c * rel[:, 0] - s * rel[:, 1]
    out[:, 1] = s * rel[:, 0] + c * rel[:, 1]
    return out + centre + shift


def _tube_field(points, radii, H, W):
    """max_k (r_k - |p - c_k|): positive inside the swept tube."""
    g = np.full((H, W), -np.inf)
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    for (cx, cy), r in zip(points, radii):
        reach = r + 3.0
        x0, x1 = max(0, int(np.floor(cx - reach))), min(W, int(np.ceil(cx + reach)) + 1)
        y0, y1 = max(0, int(np.floor(cy - reach))), min(H, int(np.ceil(cy + reach)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        d = np.hypot(xs[y0:y1, x0:x1] - cx, ys[y0:y1, x0:x1] - cy)
        np.maximum(g[y0:y1, x0:x1], r - d, out=g[y0:y1, x0:x1])
    return g


def _background(x, y, size, rng_params):
    # smooth texture defined in canonical coordinates, so it moves with the scene
    out = np.zeros_like(x)
    for kx, ky, ph, amp in rng_params:
        out += amp * np.cos(2 * np.pi * (kx * x + ky * y) / size + ph)
    return out


def signed_tube_field(tree: VesselTreeSpec, motion: MotionSpec, t, H=64, W=64):
    """Continuous tube field of frame ``t``: positive inside, ~signed distance near edges.

    The binary mask of the frame is ``field > 0``.
    """
    points, radii = build_tree(tree, H, W)
    centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    ang, shift = motion.pose(t, centre)
    return _tube_field(_rotate(points, ang, centre, shift), radii, H, W)


def contrast_ramp(n_frames, peak, floor):
    """Piecewise-linear wash-in / wash-out with a unique maximum at ``peak``."""
    t = np.arange(n_frames, dtype=np.float64)
    span_in = max(peak, 1)
    span_out = max(n_frames - 1 - peak, 1)
    r = np.where(t <= peak, 1 - (peak - t) / span_in, 1 - (t - peak) / span_out)
    return floor + (1 - floor) * np.clip(r, 0.0, 1.0)


def _inverse_pose(xs, ys, ang, shift, centre):
    """Canonical coordinates of frame pixels under pose (ang, shift)."""
    c, s = np.cos(ang), np.sin(ang)
    rx = xs - centre[0] - shift[0]
    ry = ys - centre[1] - shift[1]
    return c * rx + s * ry + centre[0], -s * rx + c * ry + centre[1]


def pose_flow(motion: MotionSpec, t_from, t_to, H, W):
    """Displacement taking each pixel of frame ``t_from`` to its position in ``t_to``."""
    centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    a0, s0 = motion.pose(t_from, centre)
    a1, s1 = motion.pose(t_to, centre)
    cx, cy = _inverse_pose(xs, ys, a0, s0, centre)
    moved = _rotate(np.stack([cx.ravel(), cy.ravel()], axis=1), a1, centre, s1)
    return (moved[:, 0].reshape(H, W) - xs).astype(np.float32), (moved[:, 1].reshape(H, W) - ys).astype(np.float32)


def generate_clip(tree: VesselTreeSpec, motion: MotionSpec, degrade: DegradationSpec,
                  n_frames=8, H=64, W=64, clip_id="clip", peak_frame=None, seed=None) -> VideoClip:
    """Render a clip with per-frame masks and forward/backward ground-truth flow."""
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if H < 32 or W < 32:
        raise ValueError("H and W must be >= 32")
    seed = tree.seed if seed is None else seed
    rng = seeded_rng(seed, 202)
    if peak_frame is None:
        peak_frame = default_peak_frame(n_frames, seed)
    if not 0 <= peak_frame < n_frames:
        raise ValueError("peak_frame outside the clip")

    points, radii = build_tree(tree, H, W)
    centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
    size = float(min(H, W))
    bg_params = [(rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), rng.uniform(0, 2 * np.pi),
                  degrade.background_amp / 3.0) for _ in range(3)]
    ramp = contrast_ramp(n_frames, peak_frame, degrade.ramp_floor) * degrade.contrast_level
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)

    frames, masks = [], []
    for t in range(n_frames):
        ang, shift = motion.pose(t, centre)
        g = _tube_field(_rotate(points, ang, centre, shift), radii, H, W)
        coverage = np.clip(g + 0.5, 0.0, 1.0)
        cx, cy = _inverse_pose(xs, ys, ang, shift, centre)
        img = BACKGROUND_LEVEL + _background(cx, cy, size, bg_params)
        img = img - VESSEL_DEPTH * ramp[t] * coverage
        if degrade.blur_sigma_px > 0:
            img = ndimage.gaussian_filter(img, degrade.blur_sigma_px, mode="nearest")
        if degrade.noise_sigma > 0:
            img = img + rng.normal(0.0, degrade.noise_sigma, img.shape)
        # 8-bit quantisation keeps the on-disk PGM round trip exact
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        frames.append(ImageFrame(img, t))
        masks.append((t, BinaryMask(g > 0)))

    flows = []
    for t in range(n_frames - 1):
        fu, fv = pose_flow(motion, t, t + 1, H, W)
        bu, bv = pose_flow(motion, t + 1, t, H, W)
        flows.append((FlowField(fu, fv, FlowDirection.FORWARD),
                      FlowField(bu, bv, FlowDirection.BACKWARD)))
    return VideoClip(frames, masks, flows, clip_id)


def default_peak_frame(n_frames, seed):
    lo, hi = n_frames // 4, max(n_frames // 4, (3 * n_frames) // 4 - 1)
    return int(seeded_rng(seed, 303).integers(lo, hi + 1))


def random_specs(rng, n_frames):
    tree = VesselTreeSpec(
        n_branches=int(rng.integers(3, 6)),
        branch_width_px=(float(rng.uniform(1.6, 2.2)), float(rng.uniform(3.0, 4.5))),
        tortuosity=float(rng.uniform(0.2, 0.8)),
        seed=int(rng.integers(2 ** 31)),
    )
    motion = MotionSpec(
        translation_amp_px=float(rng.uniform(0.5, 2.5)),
        rotation_amp_deg=float(rng.uniform(0.0, 4.0)),
        period_frames=int(rng.integers(6, 12)),
        phase=float(rng.uniform(0, 2 * np.pi)),
    )
    degrade = DegradationSpec(
        contrast_level=float(rng.uniform(0.3, 0.7)),
        noise_sigma=float(rng.uniform(0.02, 0.06)),
        blur_sigma_px=float(rng.uniform(0.3, 0.9)),
        ramp_floor=float(rng.uniform(0.15, 0.4)),
    )
    return tree, motion, degrade


def _render(job):
    tree, motion, degrade, n_frames, H, W, clip_id = job
    return generate_clip(tree, motion, degrade, n_frames, H, W, clip_id)


def make_dataset(n_labeled, n_unlabeled, labeled_frames_per_clip=1, seed=0,
                 n_frames=8, H=64, W=64, workers=None):
    """Labeled / unlabeled / test clip lists with the sparse annotation protocol.

    Labeled clips keep only the frame(s) of peak contrast annotated, unlabeled
    clips keep no masks, test clips keep every mask. Test clips are added in
    an 8:2 train/test ratio.
    """
    if n_labeled < 1:
        raise ValueError("n_labeled must be >= 1")
    if labeled_frames_per_clip not in (1, 2):
        raise ValueError("labeled_frames_per_clip must be 1 or 2")
    if n_unlabeled < 0:
        raise ValueError("n_unlabeled must be >= 0")
    n_train = n_labeled + n_unlabeled
    n_test = max(1, int(round(n_train / 4.0)))
    rng = seeded_rng(seed, 404)

    jobs, kinds = [], []
    for kind, count in (("lab", n_labeled), ("unl", n_unlabeled), ("test", n_test)):
        for i in range(count):
            tree, motion, degrade = random_specs(rng, n_frames)
            jobs.append((tree, motion, degrade, n_frames, H, W, f"{kind}_{i:04d}"))
            kinds.append(kind)

    if workers is None:
        workers = int(os.environ.get("SMART_NUM_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            clips = list(ex.map(_render, jobs, chunksize=4))
    else:
        clips = [_render(j) for j in jobs]

    labeled, unlabeled, test = [], [], []
    for clip, kind, job in zip(clips, kinds, jobs):
        if kind == "lab":
            peak = default_peak_frame(n_frames, job[0].seed)
            keep = [peak]
            if labeled_frames_per_clip == 2:
                keep.append(peak + 1 if peak + 1 < n_frames else peak - 1)
            md = clip.mask_dict()
            labeled.append(clip.with_masks(tuple((t, md[t]) for t in sorted(keep))))
        elif kind == "unl":
            unlabeled.append(VideoClip(clip.frames, None, clip.flows, clip.clip_id))
        else:
            test.append(clip)
    return labeled, unlabeled, test


def clip_checksum(clip: VideoClip, h=None):
    h = h or hashlib.sha256()
    h.update(clip.clip_id.encode())
    for f in clip.frames:
        h.update(np.ascontiguousarray(f.pixels).tobytes())
    for t, m in clip.masks or ():
        h.update(str(t).encode())
        h.update(np.ascontiguousarray(m.values).tobytes())
    for fw, bw in clip.flows or ():
        for fl in (fw, bw):
            h.update(fl.u.tobytes())
            h.update(fl.v.tobytes())
    return h


def dataset_checksum(*clip_lists):
    h = hashlib.sha256()
    for clips in clip_lists:
        h.update(b"|")
        for c in clips:
            clip_checksum(c, h)
    return h.hexdigest()
