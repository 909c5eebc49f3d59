"""On-disk formats: PGM/PBM frames and masks, flow sidecars, split file, run manifest.

Dataset directory layout::

    clips/<clip_id>/frame_<t>.pgm      8-bit grayscale, binary P5
    masks/<clip_id>/mask_<t>.pbm       1-bit, binary P4 (bit 1 = vessel)
    flows/<clip_id>/<clip_id>_<t>_{fwd|bwd}.flo32
    split.txt                          "<split> <clip_id>" per line
    manifest.json
"""

import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, Optional

import numpy as np

from .core import BinaryMask, FlowDirection, ImageFrame, VideoClip
from .flow import flow_file_path, read_flow_file, write_flow_file

SPLITS = ("labeled", "unlabeled", "test")
MANIFEST_NAME = "manifest.json"
_FRAME_RE = re.compile(r"frame_(\d+)\.pgm$")
_MASK_RE = re.compile(r"mask_(\d+)\.pbm$")


class FormatError(ValueError):
    pass


def _read_header(blob, magic, n_fields):
    """Parse ``n_fields`` whitespace-separated ASCII integers after ``magic``."""
    if not blob.startswith(magic):
        raise FormatError(f"expected {magic!r} header")
    pos, vals = len(magic), []
    while len(vals) < n_fields:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header")
        vals.append(int(blob[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return vals, pos + 1


def write_pgm(path, pixels):
    """Intensities in [0, 1] -> 8-bit P5 (values rounded to k/255)."""
    a = np.asarray(pixels, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("PGM image must be 2-D")
    data = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    H, W = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    (W, H, maxval), pos = _read_header(blob, b"P5", 3)
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM is supported")
    raw = np.frombuffer(blob, np.uint8, count=W * H, offset=pos) if len(blob) - pos >= W * H else None
    if raw is None:
        raise FormatError(f"{path}: truncated raster")
    return raw.reshape(H, W).astype(np.float64) / 255.0


def write_pbm(path, mask):
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError("PBM mask must be 2-D")
    H, W = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P4\n{W} {H}\n".encode())
        fh.write(np.packbits(m, axis=1).tobytes())


def read_pbm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    (W, H), pos = _read_header(blob, b"P4", 2)
    row = (W + 7) // 8
    if len(blob) - pos < row * H:
        raise FormatError(f"{path}: truncated raster")
    packed = np.frombuffer(blob, np.uint8, count=row * H, offset=pos).reshape(H, row)
    return np.unpackbits(packed, axis=1)[:, :W].astype(np.uint8)


# ---------------------------------------------------------------------------
# dataset directories


def write_clip(root, clip: VideoClip):
    cdir = os.path.join(root, "clips", clip.clip_id)
    os.makedirs(cdir, exist_ok=True)
    for f in clip.frames:
        write_pgm(os.path.join(cdir, f"frame_{f.frame_index}.pgm"), f.pixels)
    if clip.masks:
        mdir = os.path.join(root, "masks", clip.clip_id)
        os.makedirs(mdir, exist_ok=True)
        for t, m in clip.masks:
            write_pbm(os.path.join(mdir, f"mask_{t}.pbm"), m.values)
    if clip.flows:
        fdir = os.path.join(root, "flows", clip.clip_id)
        os.makedirs(fdir, exist_ok=True)
        for f, (fw, bw) in zip(clip.frames, clip.flows):
            write_flow_file(flow_file_path(fdir, clip.clip_id, f.frame_index, FlowDirection.FORWARD), fw)
            write_flow_file(flow_file_path(fdir, clip.clip_id, f.frame_index, FlowDirection.BACKWARD), bw)


def _indexed(directory, pattern):
    out = {}
    for name in os.listdir(directory):
        m = pattern.match(name)
        if m:
            out[int(m.group(1))] = os.path.join(directory, name)
    return dict(sorted(out.items()))


def read_clip(root, clip_id) -> VideoClip:
    cdir = os.path.join(root, "clips", clip_id)
    if not os.path.isdir(cdir):
        raise FileNotFoundError(f"no frames for clip {clip_id} under {root}")
    paths = _indexed(cdir, _FRAME_RE)
    if not paths:
        raise FormatError(f"clip {clip_id} has no frame files")
    frames = tuple(ImageFrame(read_pgm(p), t) for t, p in paths.items())
    masks = None
    mdir = os.path.join(root, "masks", clip_id)
    if os.path.isdir(mdir):
        masks = tuple((t, BinaryMask(read_pbm(p))) for t, p in _indexed(mdir, _MASK_RE).items()) or None
    flows = None
    fdir = os.path.join(root, "flows", clip_id)
    if os.path.isdir(fdir) and len(frames) > 1:
        shape = frames[0].shape
        flows = tuple(
            (read_flow_file(flow_file_path(fdir, clip_id, f.frame_index, FlowDirection.FORWARD), shape,
                            FlowDirection.FORWARD),
             read_flow_file(flow_file_path(fdir, clip_id, f.frame_index, FlowDirection.BACKWARD), shape,
                            FlowDirection.BACKWARD))
            for f in frames[:-1])
    return VideoClip(frames, masks, flows, clip_id)


def write_split(root, labeled, unlabeled, test):
    with open(os.path.join(root, "split.txt"), "w") as fh:
        for name, clips in zip(SPLITS, (labeled, unlabeled, test)):
            for c in clips:
                fh.write(f"{name} {c.clip_id}\n")


def read_split(root):
    path = os.path.join(root, "split.txt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{root} is not a dataset directory (split.txt missing)")
    out = {s: [] for s in SPLITS}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2 or parts[0] not in out:
                raise FormatError(f"split.txt line {n}: expected '<split> <clip_id>'")
            out[parts[0]].append(parts[1])
    return out


def write_dataset(root, labeled, unlabeled, test):
    for c in (*labeled, *unlabeled, *test):
        write_clip(root, c)
    write_split(root, labeled, unlabeled, test)


def read_dataset(root):
    """(labeled, unlabeled, test) lists of VideoClip."""
    split = read_split(root)
    return tuple([read_clip(root, cid) for cid in split[s]] for s in SPLITS)


def directory_checksum(root, exclude=(MANIFEST_NAME,)):
    """SHA-256 over every file's relative path and bytes, manifest excluded."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name in exclude:
                continue
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).replace(os.sep, "/").encode())
            with open(path, "rb") as fh:
                h.update(hashlib.sha256(fh.read()).digest())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# run manifest


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    artifacts: Dict[str, str] = field(default_factory=dict)
    config: Optional[Dict[str, str]] = None
    started: str = field(default_factory=_now)
    finished: Optional[str] = None

    def finish(self):
        self.finished = _now()
        return self

    def write(self, directory):
        path = os.path.join(directory, MANIFEST_NAME)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def read(cls, directory):
        with open(os.path.join(directory, MANIFEST_NAME)) as fh:
            return cls(**json.load(fh))


def hash_mapping(mapping):
    text = "\n".join(f"{k}={mapping[k]}" for k in sorted(mapping))
    return hashlib.sha256(text.encode()).hexdigest()


def read_config_file(path):
    """Flat ``key = value`` text; ``#`` starts a comment. Returns a dict of strings."""
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{n}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise FormatError(f"{path}:{n}: empty key")
            if key in out:
                raise FormatError(f"{path}:{n}: duplicate key {key!r}")
            out[key] = value
    return out


def write_config_file(path, flat):
    with open(path, "w") as fh:
        for k in sorted(flat):
            fh.write(f"{k} = {flat[k]}\n")
