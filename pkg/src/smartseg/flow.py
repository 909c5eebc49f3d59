"""Flow providers and the bilinear mask-warping operator."""

import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from scipy import ndimage

from .core import FlowDirection, FlowField, ImageFrame, PredictionMap, VideoClip


class FlowKind(str, Enum):
    GROUND_TRUTH = "ground_truth"
    PRECOMPUTED_FILE = "precomputed_file"
    CLASSICAL = "classical_estimator"


@dataclass(frozen=True)
class FlowProvider:
    kind: FlowKind = FlowKind.GROUND_TRUTH
    window: int = 9
    levels: int = 3
    iterations: int = 3
    directory: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", FlowKind(self.kind))
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be an odd integer >= 3")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")


def _bilinear(img, x, y):
    """Sample ``img[..., H, W]`` at real coordinates with border replication.

    ``img``, ``x`` and ``y`` must already share one shape.
    """
    H, W = img.shape[-2:]
    x = x.clamp(0, W - 1)
    y = y.clamp(0, H - 1)
    x0 = x.floor().clamp(max=max(W - 2, 0))
    y0 = y.floor().clamp(max=max(H - 2, 0))
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    flat = img.reshape(*img.shape[:-2], H * W)

    def tap(yy, xx):
        idx = (yy * W + xx).reshape(flat.shape)
        return torch.gather(flat, -1, idx).reshape(img.shape)

    return ((1 - wy) * ((1 - wx) * tap(y0, x0) + wx * tap(y0, x1))
            + wy * ((1 - wx) * tap(y1, x0) + wx * tap(y1, x1)))


def _flow_tensors(flow, like):
    if isinstance(flow, FlowField):
        u = torch.tensor(flow.u, dtype=like.dtype)
        v = torch.tensor(flow.v, dtype=like.dtype)
    elif isinstance(flow, torch.Tensor):
        u, v = flow[..., 0, :, :].to(like.dtype), flow[..., 1, :, :].to(like.dtype)
    else:
        f = np.array(flow)
        u = torch.as_tensor(f[..., 0, :, :], dtype=like.dtype)
        v = torch.as_tensor(f[..., 1, :, :], dtype=like.dtype)
    return u, v


def warp(mask, flow):
    """W(S, F)(x, y) = S(x + F_u(x, y), y + F_v(x, y)).

    Backward warping with bilinear sampling and border replication. Accepts a
    torch tensor ``[..., H, W]`` (differentiable), a numpy array or a
    PredictionMap (whose logits are warped); returns the same kind. ``flow``
    is a FlowField or an array/tensor ``[..., 2, H, W]`` holding (u, v).
    """
    if isinstance(mask, PredictionMap):
        out = warp(torch.tensor(mask.logits), flow)
        return PredictionMap(out.numpy(), mask.source)
    if not isinstance(mask, torch.Tensor):
        return warp(torch.as_tensor(np.array(mask, dtype=np.float64)), flow).numpy()

    H, W = mask.shape[-2:]
    u, v = _flow_tensors(flow, mask)
    if u.shape[-2:] != (H, W):
        raise ValueError(f"flow shape {tuple(u.shape[-2:])} does not match map shape {(H, W)}")
    ys, xs = torch.meshgrid(torch.arange(H, dtype=mask.dtype), torch.arange(W, dtype=mask.dtype),
                            indexing="ij")
    x = xs + u
    y = ys + v
    shape = torch.broadcast_shapes(mask.shape, x.shape)
    return _bilinear(mask.expand(shape), x.expand(shape), y.expand(shape))


# ---------------------------------------------------------------------------
# classical coarse-to-fine local least-squares estimator


def _warp_np(img, u, v):
    H, W = img.shape
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    return ndimage.map_coordinates(img, [ys + v, xs + u], order=1, mode="nearest")


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        sm = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(sm[::2, ::2])
    return pyr


def lucas_kanade(img0, img1, window=9, levels=3, iterations=3, reg=1e-4):
    """Dense flow (u, v) such that img1(x + u, y + v) ~ img0(x, y)."""
    img0 = np.asarray(img0, np.float64)
    img1 = np.asarray(img1, np.float64)
    if img0.shape != img1.shape:
        raise ValueError("frames must share one shape")
    levels = max(1, min(levels, int(np.log2(min(img0.shape))) - 2))
    p0 = _pyramid(ndimage.gaussian_filter(img0, 0.7, mode="nearest"), levels)
    p1 = _pyramid(ndimage.gaussian_filter(img1, 0.7, mode="nearest"), levels)
    u = np.zeros(p0[-1].shape)
    v = np.zeros(p0[-1].shape)
    for lvl in range(levels - 1, -1, -1):
        a, b = p0[lvl], p1[lvl]
        if u.shape != a.shape:
            zy, zx = a.shape[0] / u.shape[0], a.shape[1] / u.shape[1]
            u = ndimage.zoom(u, (zy, zx), order=1, mode="nearest")[: a.shape[0], : a.shape[1]] * zx
            v = ndimage.zoom(v, (zy, zx), order=1, mode="nearest")[: a.shape[0], : a.shape[1]] * zy
        for _ in range(iterations):
            bw = _warp_np(b, u, v)
            gy0, gx0 = np.gradient(a)
            gy1, gx1 = np.gradient(bw)
            ix = 0.5 * (gx0 + gx1)
            iy = 0.5 * (gy0 + gy1)
            it = bw - a
            box = lambda z: ndimage.uniform_filter(z, window, mode="nearest")
            sxx, sxy, syy = box(ix * ix) + reg, box(ix * iy), box(iy * iy) + reg
            sxt, syt = box(ix * it), box(iy * it)
            det = sxx * syy - sxy * sxy
            u = u - (syy * sxt - sxy * syt) / det
            v = v - (sxx * syt - sxy * sxt) / det
    bound = float(max(img0.shape))
    return np.clip(u, -bound, bound), np.clip(v, -bound, bound)


def flow_file_path(directory, clip_id, t, direction):
    tag = "fwd" if FlowDirection(direction) == FlowDirection.FORWARD else "bwd"
    return os.path.join(directory, f"{clip_id}_{t}_{tag}.flo32")


def write_flow_file(path, flow: FlowField):
    data = np.stack([flow.u, flow.v]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(data.tobytes())


def read_flow_file(path, shape, direction):
    H, W = shape
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing flow sidecar {path}")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != 2 * H * W:
        raise ValueError(f"flow sidecar {path} holds {raw.size} values, expected {2 * H * W}")
    raw = raw.reshape(2, H, W).astype(np.float32)
    return FlowField(raw[0], raw[1], direction)


def estimate_pair(provider: FlowProvider, frame_t: ImageFrame, frame_t1: ImageFrame, clip: VideoClip = None):
    """(forward, backward) flow for a consecutive frame pair.

    ``clip`` is required by the ground-truth kind (flows are looked up there)
    and by the precomputed-file kind (its clip_id names the sidecar files).
    """
    if frame_t.shape != frame_t1.shape:
        raise ValueError("frames must share one shape")
    if provider.kind == FlowKind.CLASSICAL:
        fu, fv = lucas_kanade(frame_t.pixels, frame_t1.pixels, provider.window, provider.levels,
                              provider.iterations)
        bu, bv = lucas_kanade(frame_t1.pixels, frame_t.pixels, provider.window, provider.levels,
                              provider.iterations)
        return (FlowField(fu, fv, FlowDirection.FORWARD), FlowField(bu, bv, FlowDirection.BACKWARD))
    if clip is None:
        raise ValueError(f"{provider.kind.value} flow needs the owning clip")
    if provider.kind == FlowKind.GROUND_TRUTH:
        if clip.flows is None:
            raise ValueError(f"clip {clip.clip_id} carries no ground-truth flow")
        return clip.flows[clip.position_of(frame_t.frame_index)]
    t = frame_t.frame_index
    directory = provider.directory
    # accept both a flat sidecar directory and the per-clip dataset layout
    if os.path.isdir(os.path.join(directory, clip.clip_id)):
        directory = os.path.join(directory, clip.clip_id)
    fw = read_flow_file(flow_file_path(directory, clip.clip_id, t, FlowDirection.FORWARD),
                        frame_t.shape, FlowDirection.FORWARD)
    bw = read_flow_file(flow_file_path(directory, clip.clip_id, t, FlowDirection.BACKWARD),
                        frame_t.shape, FlowDirection.BACKWARD)
    return fw, bw
