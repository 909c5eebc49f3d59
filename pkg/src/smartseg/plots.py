"""Raster figures: prediction/ground-truth overlays and training loss curves."""

import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import boundary  # noqa: E402

LOSS_KEYS = ("L_dice", "L_bce", "L_conf", "L_opti", "L_coh", "total", "ft")


def overlay_image(pixels, pred, gt=None):
    """RGB uint8 image: frame in gray, ground-truth boundary green, prediction boundary red."""
    g = np.clip(np.asarray(pixels, dtype=np.float64), 0, 1)
    rgb = np.repeat((g * 255).astype(np.uint8)[..., None], 3, axis=2)
    if gt is not None:
        rgb[boundary(gt)] = (0, 200, 0)
    rgb[boundary(pred)] = (230, 30, 30)
    return rgb


def overlay_clip(clip, preds, directory):
    gts = clip.mask_dict()
    paths = []
    for f in clip.frames:
        gt = gts.get(f.frame_index)
        img = overlay_image(f.pixels, preds[f.frame_index], None if gt is None else gt.values)
        path = os.path.join(directory, f"{clip.clip_id}_frame{f.frame_index}.png")
        plt.imsave(path, img)
        paths.append(path)
    return paths


def read_log(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def loss_curve(log_path, out_path):
    recs = read_log(log_path)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for key in LOSS_KEYS:
        pts = [(r["iteration"], r[key]) for r in recs if key in r]
        if pts and any(v != 0 for _, v in pts):
            it, val = zip(*pts)
            ax.plot(it, val, label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
