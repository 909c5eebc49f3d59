"""Segmentation metrics: DSC, NSD, clDice, specificity and sensitivity.

Degenerate conventions (so every metric is a total function): a ratio whose
denominator counts an empty class is 1 when the prediction is empty of that
class as well and 0 otherwise.
"""

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy import ndimage

from .core import BinaryMask, VideoClip

METRIC_NAMES = ("dsc", "nsd", "cldice", "spe", "sen")
CSV_HEADER = ("clip_id", "DSC", "NSD", "clDice", "Spe", "Sen")
DEFAULT_TAU = 2.0


def _bool(m):
    if isinstance(m, BinaryMask):
        return m.values.astype(bool)
    a = np.asarray(m)
    if a.dtype != bool and not np.all((a == 0) | (a == 1)):
        raise ValueError("masks must be binary")
    return a.astype(bool)


def confusion_counts(pred, gt):
    p, g = _bool(pred), _bool(gt)
    if p.shape != g.shape:
        raise ValueError("shape mismatch")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return tp, fp, tn, fn


def _ratio(num, den, pred_empty):
    if den == 0:
        return 1.0 if pred_empty else 0.0
    return num / den


def dsc(pred, gt):
    tp, fp, tn, fn = confusion_counts(pred, gt)
    return _ratio(2 * tp, 2 * tp + fp + fn, True)


def spe(pred, gt):
    tp, fp, tn, fn = confusion_counts(pred, gt)
    return _ratio(tn, tn + fp, fn == 0)


def sen(pred, gt):
    tp, fp, tn, fn = confusion_counts(pred, gt)
    return _ratio(tp, tp + fn, fp == 0)


# ---------------------------------------------------------------------------
# thinning

# neighbour bit k of the code, clockwise from north: P2..P9 = N NE E SE S SW W NW
_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def _build_luts():
    step1 = np.zeros(256, bool)
    step2 = np.zeros(256, bool)
    simple = np.zeros(256, bool)
    for code in range(256):
        p = [(code >> k) & 1 for k in range(8)]
        n, ne, e, se, s, sw, w, nw = p
        b = sum(p)
        a = sum(1 for k in range(8) if p[k] == 0 and p[(k + 1) % 8] == 1)
        base = 2 <= b <= 6 and a == 1
        step1[code] = base and n * e * s == 0 and e * s * w == 0
        step2[code] = base and n * e * w == 0 and n * s * w == 0
        # Yokoi connectivity number for 8-connected foreground; x1..x8 run
        # counter-clockwise from east
        x = [e, ne, n, nw, w, sw, s, se]
        xb = [1 - v for v in x]
        c8 = sum(xb[k] - xb[k] * xb[(k + 1) % 8] * xb[(k + 2) % 8] for k in (0, 2, 4, 6))
        simple[code] = c8 == 1 and b >= 2
    return step1, step2, simple


_STEP1, _STEP2, _SIMPLE = _build_luts()


def _codes(img):
    pad = np.pad(img, 1).astype(np.uint16)
    H, W = img.shape
    code = np.zeros((H, W), np.uint16)
    for k, (dy, dx) in enumerate(_OFFSETS):
        code |= pad[1 + dy:1 + dy + H, 1 + dx:1 + dx + W] << k
    return code


def _code_at(img, y, x):
    H, W = img.shape
    c = 0
    for k, (dy, dx) in enumerate(_OFFSETS):
        yy, xx = y + dy, x + dx
        if 0 <= yy < H and 0 <= xx < W and img[yy, xx]:
            c |= 1 << k
    return c


def skeletonize(mask):
    """Two-subiteration boundary peeling until stable.

    Candidates come from the Zhang-Suen rule set; each is removed in raster
    order only if it is still a simple point of the current image, which keeps
    8-connectivity and the number of connected components intact.
    """
    img = _bool(mask).copy()
    changed = True
    while changed:
        changed = False
        for lut in (_STEP1, _STEP2):
            cand = img & lut[_codes(img)]
            for y, x in zip(*np.nonzero(cand)):
                c = _code_at(img, y, x)
                if lut[c] and _SIMPLE[c]:
                    img[y, x] = False
                    changed = True
    return img


def _cl_ratio(skel, other):
    n = int(skel.sum())
    if n == 0:
        return 1.0 if not other.any() else 0.0
    return float((skel & other).sum()) / n


def cldice(pred, gt):
    p, g = _bool(pred), _bool(gt)
    tprec = _cl_ratio(skeletonize(p), g)
    tsens = _cl_ratio(skeletonize(g), p)
    if tprec + tsens == 0:
        return 0.0
    return 2 * tprec * tsens / (tprec + tsens)


# ---------------------------------------------------------------------------
# surface distance


def boundary(mask):
    """Foreground pixels 4-adjacent to background (outside the image counts as background)."""
    m = _bool(mask)
    inner = ndimage.binary_erosion(np.pad(m, 1), structure=ndimage.generate_binary_structure(2, 1))[1:-1, 1:-1]
    return m & ~inner


def nsd(pred, gt, tau=DEFAULT_TAU):
    if tau <= 0:
        raise ValueError("tau must be positive")
    bp, bg = boundary(pred), boundary(gt)
    np_, ng = int(bp.sum()), int(bg.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    if np_ == 0 or ng == 0:
        return 0.0
    d_to_g = ndimage.distance_transform_edt(~bg)
    d_to_p = ndimage.distance_transform_edt(~bp)
    hits = int((d_to_g[bp] <= tau).sum()) + int((d_to_p[bg] <= tau).sum())
    return hits / (np_ + ng)


def frame_metrics(pred, gt, tau=DEFAULT_TAU):
    return {"dsc": dsc(pred, gt), "nsd": nsd(pred, gt, tau), "cldice": cldice(pred, gt),
            "spe": spe(pred, gt), "sen": sen(pred, gt)}


@dataclass
class MetricReport:
    dsc: float
    nsd: float
    cldice: float
    spe: float
    sen: float
    per_frame: List[Dict[str, float]] = field(default_factory=list)
    n_frames: int = 0
    clip_id: str = ""

    @classmethod
    def from_frames(cls, per_frame, clip_id=""):
        if not per_frame:
            raise ValueError("no frames to aggregate")
        agg = {k: float(np.mean([f[k] for f in per_frame])) for k in METRIC_NAMES}
        return cls(**agg, per_frame=list(per_frame), n_frames=len(per_frame), clip_id=clip_id)

    def as_dict(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_record(self):
        """Flat ``key=value`` text record."""
        lines = [f"clip_id={self.clip_id}", f"n_frames={self.n_frames}"]
        lines += [f"{k}={getattr(self, k):.10f}" for k in METRIC_NAMES]
        for i, f in enumerate(self.per_frame):
            lines += [f"frame{i}.{k}={f[k]:.10f}" for k in METRIC_NAMES]
        return "\n".join(lines) + "\n"


def summarize(reports):
    """Mean over clips, as a MetricReport with clip_id 'mean'."""
    frames = [r.as_dict() for r in reports]
    out = MetricReport.from_frames(frames, "mean")
    return out


def reports_to_csv(reports, summary=True):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_HEADER)
    rows = list(reports)
    if summary and rows:
        rows.append(summarize(rows))
    for r in rows:
        wr.writerow([r.clip_id] + [f"{getattr(r, k):.6f}" for k in METRIC_NAMES])
    return buf.getvalue()


def predict_masks(model, clip: VideoClip, threshold=0.5):
    """Thresholded probability masks for every frame of ``clip``.

    ``model`` is a ModelHandle or a callable ``frame -> logits array``.
    """
    from .backbone import ModelHandle, forward_tensor
    import torch

    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    cut = np.log(threshold / (1 - threshold))
    if isinstance(model, ModelHandle):
        x = np.stack([f.pixels for f in clip.frames])
        with torch.no_grad():
            logits = forward_tensor(model, torch.as_tensor(x)).double().numpy()
    else:
        logits = np.stack([np.asarray(model(f), dtype=np.float64) for f in clip.frames])
    return {f.frame_index: logits[i] > cut for i, f in enumerate(clip.frames)}


def evaluate_clip(model, clip: VideoClip, threshold=0.5, tau=DEFAULT_TAU) -> MetricReport:
    if not clip.has_masks:
        raise ValueError(f"clip {clip.clip_id} has no ground-truth masks")
    preds = predict_masks(model, clip, threshold)
    per_frame = [frame_metrics(preds[t], m, tau) for t, m in clip.masks]
    return MetricReport.from_frames(per_frame, clip.clip_id)


def evaluate_clips(model, clips, threshold=0.5, tau=DEFAULT_TAU):
    return [evaluate_clip(model, c, threshold, tau) for c in clips]
