"""Two-stage training: teacher fine-tuning, then frozen-teacher student training."""

import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional

import numpy as np
import torch

from .backbone import (STRONG_POLICY, WEAK_POLICY, AugmentationPolicy, ModelHandle,
                       PromptKind, PromptMode, build_model, forward_tensor, points_heatmap,
                       sample_transform, skeleton_points)
from .core import LossWeights, Source, VideoClip, seeded_rng
from .flow import FlowKind, FlowProvider, estimate_pair, warp
from .losses import (TERMS, Pairing, TeacherEnsemble, bce_loss, confidence_consistency_loss,
                     dice_loss, finetune_loss, flow_coherence_loss, motion_consistency_loss,
                     total_loss, weighted_terms)
from .metrics import METRIC_NAMES, evaluate_clips, summarize

log = logging.getLogger(__name__)

COMPONENTS = ("TPT", "CCR", "DSTC")

# independent random streams per iteration
_LAB, _UNL, _TEACHER = 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 4
    iterations: int = 600
    n_perturbations: int = 8
    perturb_sigma: float = 0.03
    weights: LossWeights = field(default_factory=LossWeights)
    weak_policy: AugmentationPolicy = WEAK_POLICY
    strong_policy: AugmentationPolicy = STRONG_POLICY
    flow_pairing: Pairing = Pairing.AS_WRITTEN
    seed: int = 0
    ablation: FrozenSet[str] = frozenset(COMPONENTS)
    # desk-scale extras
    width: int = 8
    depth: int = 3
    teacher_iterations: Optional[int] = None
    labeled_per_batch: int = 2
    ramp_fraction: float = 0.2
    pseudo_label: bool = False
    flow_kind: FlowKind = FlowKind.GROUND_TRUTH

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        object.__setattr__(self, "flow_pairing", Pairing(self.flow_pairing))
        object.__setattr__(self, "flow_kind", FlowKind(self.flow_kind))
        bad = self.ablation - set(COMPONENTS)
        if bad:
            raise ValueError(f"unknown ablation components {sorted(bad)}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if "CCR" in self.ablation and self.n_perturbations < 2:
            raise ValueError("CCR needs n_perturbations >= 2")
        if not 0 <= self.labeled_per_batch <= self.batch_size:
            raise ValueError("labeled_per_batch must lie in [0, batch_size]")

    @property
    def pairs_per_batch(self):
        # each unlabeled item is a consecutive frame pair
        return self.batch_size - self.labeled_per_batch

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def effective_weights(self, iteration):
        """Loss weights at ``iteration``: ablations zeroed, consistency terms ramped in."""
        w = self.weights
        ramp = 1.0
        span = self.ramp_fraction * self.iterations
        if span > 0:
            ramp = min(1.0, iteration / span)
        conf = w.lambda_conf * ramp if "CCR" in self.ablation else 0.0
        opti = w.lambda_opti * ramp if "DSTC" in self.ablation else 0.0
        coh = w.lambda_coh * ramp if "DSTC" in self.ablation else 0.0
        return dataclasses.replace(w, lambda_conf=conf, lambda_opti=opti, lambda_coh=coh)

    def to_flat(self):
        """Flat key -> string mapping; covers every field that affects results."""
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, LossWeights):
                for g in dataclasses.fields(v):
                    out[f"weights.{g.name}"] = repr(getattr(v, g.name))
            elif isinstance(v, AugmentationPolicy):
                out[f"{f.name}.rotation_deg"] = repr(v.rotation_deg)
                out[f"{f.name}.scale_min"] = repr(v.scale_range[0])
                out[f"{f.name}.scale_max"] = repr(v.scale_range[1])
                out[f"{f.name}.noise_sigma"] = repr(v.noise_sigma)
            elif isinstance(v, frozenset):
                out[f.name] = ",".join(sorted(v))
            elif hasattr(v, "value"):
                out[f.name] = v.value
            else:
                out[f.name] = repr(v)
        return out

    @classmethod
    def from_flat(cls, flat):
        base = cls()
        kw, wkw, pol = {}, {}, {"weak_policy": {}, "strong_policy": {}}
        names = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in flat.items():
            raw = str(raw).strip()
            if key.startswith("weights."):
                name = key.split(".", 1)[1]
                if name not in LossWeights.__dataclass_fields__:
                    raise KeyError(f"unknown config key {key!r}")
                wkw[name] = float(raw)
            elif key.split(".", 1)[0] in pol and "." in key:
                head, name = key.split(".", 1)
                if name not in ("rotation_deg", "scale_min", "scale_max", "noise_sigma"):
                    raise KeyError(f"unknown config key {key!r}")
                pol[head][name] = float(raw)
            elif key in names:
                kw[key] = _parse_field(key, raw, getattr(base, key))
            else:
                raise KeyError(f"unknown config key {key!r}")
        if wkw:
            kw["weights"] = dataclasses.replace(base.weights, **wkw)
        for head, vals in pol.items():
            if vals:
                cur = getattr(base, head)
                kw[head] = AugmentationPolicy(
                    vals.get("rotation_deg", cur.rotation_deg),
                    (vals.get("scale_min", cur.scale_range[0]), vals.get("scale_max", cur.scale_range[1])),
                    vals.get("noise_sigma", cur.noise_sigma))
        return cls(**kw)

    def config_hash(self):
        flat = self.to_flat()
        text = "\n".join(f"{k}={flat[k]}" for k in sorted(flat))
        return hashlib.sha256(text.encode()).hexdigest()


# Desk-scale run settings used by the command line and the acceptance runs.
# The dataclass defaults above keep the full-scale values; at 600 iterations
# on a width-8 network those leave every model far from convergence.
DESK_OVERRIDES = {"lr": 1e-3, "teacher_iterations": 1000}


def desk_config(**kw) -> TrainConfig:
    return TrainConfig(**{**DESK_OVERRIDES, **kw})


def _parse_field(key, raw, default):
    if key == "ablation":
        return frozenset(s.strip().upper() for s in raw.split(",") if s.strip())
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"bad boolean for {key}: {raw!r}")
    if key == "teacher_iterations":
        return None if raw in ("", "None", "none") else int(raw)
    if hasattr(default, "value"):
        return type(default)(raw.strip("'\""))
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    raise KeyError(f"config key {key!r} cannot be set from text")


# ---------------------------------------------------------------------------
# helpers


class _ClipTensors:
    """Frames and masks of one clip as float32 tensors."""

    def __init__(self, clip: VideoClip):
        self.clip = clip
        self.frames = torch.as_tensor(np.stack([f.pixels for f in clip.frames]), dtype=torch.float32)
        self.masks = {clip.position_of(t): torch.tensor(m.values, dtype=torch.float32)
                      for t, m in clip.masks or ()}


def _stack_flows(transforms, shape, inverse=False):
    flows = [t.inverse_flow(shape) if inverse else t.forward_flow(shape) for t in transforms]
    return torch.as_tensor(np.stack(flows), dtype=torch.float32)


_PROB_EPS = 1e-6


def _augment(x, transforms, noise_sigma, rng):
    """Spatially transform ``x [B, H, W]`` then add Gaussian noise."""
    out = warp(x, _stack_flows(transforms, x.shape[-2:]))
    if noise_sigma > 0:
        out = out + torch.as_tensor(rng.normal(0.0, noise_sigma, out.shape), dtype=out.dtype)
    return out.clamp(0.0, 1.0)


def _warp_logits(logits, flow):
    """Resample logit maps through their probabilities.

    Interpolating logits directly lets a large negative background value
    swamp a one-pixel vessel; averaging probabilities does not.
    """
    prob = warp(torch.sigmoid(logits), flow).clamp(_PROB_EPS, 1 - _PROB_EPS)
    return torch.logit(prob)


def _optimizer(params, cfg):
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _check_finite(value, iteration):
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite loss at iteration {iteration}")


# ---------------------------------------------------------------------------
# Stage 1


def _labeled_items(labeled):
    items = []
    for ct in labeled:
        for pos in sorted(ct.masks):
            items.append((ct, pos))
    return items


def _point_heatmaps(items, shape):
    return {(id(ct), pos): points_heatmap(skeleton_points(ct.masks[pos].numpy() > 0.5), shape)
            for ct, pos in items}


def finetune_teacher(teacher: ModelHandle, labeled, cfg: TrainConfig, log_fn=None) -> ModelHandle:
    """Stage 1: fit the teacher on labeled frames with the fine-tuning loss; returns it frozen."""
    if teacher.role != Source.TEACHER:
        raise ValueError("finetune_teacher expects a model with role=teacher")
    for clip in labeled:
        if not clip.has_masks:
            raise ValueError(f"labeled clip {clip.clip_id} carries no masks")
    if not labeled:
        raise ValueError("no labeled clips")
    iters = cfg.iterations if cfg.teacher_iterations is None else cfg.teacher_iterations
    tensors = [_ClipTensors(c) for c in labeled]
    items = _labeled_items(tensors)
    shape = tuple(tensors[0].frames.shape[-2:])
    point = teacher.prompt.kind == PromptKind.POINT
    heat = _point_heatmaps(items, shape) if point else None

    params = teacher.trainable(stage1=True)
    opt = _optimizer(params, cfg)
    teacher.net.train()
    w = cfg.weights
    t0 = time.time()
    for it in range(iters):
        rng = seeded_rng(cfg.seed, it, _LAB)
        pick = rng.integers(len(items), size=cfg.batch_size)
        tfs = [sample_transform(cfg.strong_policy, rng) for _ in pick]
        x = torch.stack([items[i][0].frames[items[i][1]] for i in pick])
        y = torch.stack([items[i][0].masks[items[i][1]] for i in pick])
        x = _augment(x, tfs, cfg.strong_policy.noise_sigma, rng)
        y = warp(y, _stack_flows(tfs, shape))
        hm = None
        if point:
            hm = torch.as_tensor(np.stack([heat[(id(items[i][0]), items[i][1])] for i in pick]),
                                 dtype=torch.float32)
            hm = warp(hm, _stack_flows(tfs, shape))
        logits = forward_tensor(teacher, x, hm)
        loss = finetune_loss(logits, y, w)
        opt.zero_grad()
        loss.backward()
        opt.step()
        val = float(loss.detach())
        _check_finite(val, it)
        if log_fn is not None:
            log_fn({"stage": "finetune", "iteration": it, "ft": val, "lr": cfg.lr,
                    "wall_time": round(time.time() - t0, 4)})
    teacher.stage = "finetuned"
    return teacher.freeze()


# ---------------------------------------------------------------------------
# Stage 2


class _FlowCache:
    def __init__(self, provider):
        self.provider = provider
        self.cache = {}

    def get(self, ct, pos):
        key = (ct.clip.clip_id, pos)
        if key not in self.cache:
            fw, bw = estimate_pair(self.provider, ct.clip.frames[pos], ct.clip.frames[pos + 1], ct.clip)
            self.cache[key] = (torch.as_tensor(np.stack([fw.u, fw.v]), dtype=torch.float32),
                               torch.as_tensor(np.stack([bw.u, bw.v]), dtype=torch.float32))
        return self.cache[key]


def _teacher_prompts(teacher, tensors):
    """Point prompts for unlabeled frames from the teacher's own prompt-free pass."""
    out = {}
    for ct in tensors:
        with torch.no_grad():
            logits = forward_tensor(teacher, ct.frames)
        for pos in range(ct.frames.shape[0]):
            pts = skeleton_points(logits[pos].numpy() > 0)
            out[(id(ct), pos)] = points_heatmap(pts, tuple(ct.frames.shape[-2:]))
    return out


@dataclass
class TrainState:
    iteration: int
    optimizer_state: dict


def train_student(teacher: ModelHandle, student: ModelHandle, labeled, unlabeled,
                  flow_provider: FlowProvider, cfg: TrainConfig, log_fn=None,
                  resume: Optional[TrainState] = None, stop_after: Optional[int] = None,
                  on_checkpoint=None):
    """Stage 2: minimise the combined objective with the frozen teacher.

    ``stop_after`` ends the loop early (after that many iterations in total)
    and ``on_checkpoint(student, TrainState)`` receives the final state;
    together with ``resume`` this gives exact interruption/continuation.
    """
    if not teacher.frozen:
        raise ValueError("teacher must be frozen")
    if student.frozen:
        raise ValueError("student must not be frozen")
    w = cfg.weights
    wants_unl = ("CCR" in cfg.ablation and w.lambda_conf > 0) or (
        "DSTC" in cfg.ablation and (w.lambda_opti > 0 or w.lambda_coh > 0))
    if wants_unl and not unlabeled:
        raise ValueError("unlabeled set is empty but consistency weights are non-zero")

    lab = [_ClipTensors(c) for c in labeled]
    items = _labeled_items(lab)
    if cfg.labeled_per_batch and not items:
        raise ValueError("no annotated labeled frames")
    unl = [_ClipTensors(c) for c in unlabeled] if wants_unl or cfg.pseudo_label else []
    pairs = [(ct, pos) for ct in unl for pos in range(ct.frames.shape[0] - 1)]
    use_unl = bool(pairs) and cfg.pairs_per_batch > 0
    shape = tuple((lab or unl)[0].frames.shape[-2:])
    flows = _FlowCache(flow_provider)
    point_teacher = teacher.prompt.kind == PromptKind.POINT
    teacher_heat = _teacher_prompts(teacher, unl) if (point_teacher and use_unl) else None

    params = student.trainable()
    opt = _optimizer(params, cfg)
    start = 0
    if resume is not None:
        opt.load_state_dict(resume.optimizer_state)
        start = resume.iteration
    end = cfg.iterations if stop_after is None else min(stop_after, cfg.iterations)
    student.net.train()
    t0 = time.time()
    for it in range(start, end):
        we = cfg.effective_weights(it)
        comps = {k: torch.zeros(()) for k in TERMS}
        logits_parts = []

        # labeled frames, weak student view
        rng_l = seeded_rng(cfg.seed, it, _LAB)
        n_lab = cfg.labeled_per_batch
        if n_lab:
            pick = rng_l.integers(len(items), size=n_lab)
            tfs_l = [sample_transform(cfg.weak_policy, rng_l) for _ in pick]
            xl = torch.stack([items[i][0].frames[items[i][1]] for i in pick])
            yl = torch.stack([items[i][0].masks[items[i][1]] for i in pick])
            xl = _augment(xl, tfs_l, cfg.weak_policy.noise_sigma, rng_l)
            yl = warp(yl, _stack_flows(tfs_l, shape))
            logits_parts.append(xl)

        # unlabeled consecutive pairs
        need_unl = use_unl and (we.lambda_conf > 0 or we.lambda_opti > 0 or we.lambda_coh > 0
                                or cfg.pseudo_label)
        if need_unl:
            rng_u = seeded_rng(cfg.seed, it, _UNL)
            sel = rng_u.integers(len(pairs), size=cfg.pairs_per_batch)
            ufr = []
            for j in sel:
                ct, pos = pairs[j]
                ufr += [(ct, pos), (ct, pos + 1)]
            xu_clean = torch.stack([ct.frames[p] for ct, p in ufr])
            tfs_u = [sample_transform(cfg.weak_policy, rng_u) for _ in ufr]
            xu = _augment(xu_clean, tfs_u, cfg.weak_policy.noise_sigma, rng_u)
            logits_parts.append(xu)

        x = torch.cat(logits_parts)
        logits = forward_tensor(student, x)
        if n_lab:
            sl = logits[:n_lab]
            comps["dice"] = dice_loss(sl, yl)
            comps["bce"] = bce_loss(sl, yl)

        if need_unl:
            # student predictions mapped back to the clean frame coordinates
            su = _warp_logits(logits[n_lab:], _stack_flows(tfs_u, shape, inverse=True))
            if (we.lambda_conf > 0 and "CCR" in cfg.ablation) or cfg.pseudo_label:
                rng_t = seeded_rng(cfg.seed, it, _TEACHER)
                tfs_t = [sample_transform(cfg.strong_policy, rng_t) for _ in ufr]
                xt = _augment(xu_clean, tfs_t, cfg.strong_policy.noise_sigma, rng_t)
                hm = None
                if point_teacher:
                    hm = torch.as_tensor(np.stack([teacher_heat[(id(ct), p)] for ct, p in ufr]),
                                         dtype=torch.float32)
                    hm = warp(hm, _stack_flows(tfs_t, shape))
                ens = _ensemble(teacher, xt, hm, cfg.n_perturbations, cfg.perturb_sigma, rng_t)
                inv_t = _stack_flows(tfs_t, shape, inverse=True)
                pbar = _warp_logits(ens.mean_logits, inv_t)
                unc = warp(ens.uncertainty, inv_t).clamp_min(0.0)
                if we.lambda_conf > 0 and "CCR" in cfg.ablation:
                    comps["conf"] = confidence_consistency_loss(su, None, w, pbar, unc)
                if cfg.pseudo_label:
                    hard = (pbar > 0).float()
                    comps["dice"] = comps["dice"] + dice_loss(su, hard)
                    comps["bce"] = comps["bce"] + bce_loss(su, hard)
            if (we.lambda_opti > 0 or we.lambda_coh > 0) and "DSTC" in cfg.ablation:
                fw = torch.stack([flows.get(*pairs[j])[0] for j in sel])
                bw = torch.stack([flows.get(*pairs[j])[1] for j in sel])
                s_t, s_t1 = su[0::2], su[1::2]
                comps["opti"] = motion_consistency_loss(s_t, s_t1, fw, bw, cfg.flow_pairing)
                comps["coh"] = flow_coherence_loss(s_t, fw, w)

        loss = total_loss(comps, we)
        opt.zero_grad()
        loss.backward()
        opt.step()
        _check_finite(float(loss.detach()), it)
        if log_fn is not None:
            terms = weighted_terms(comps, we)
            rec = {"stage": "train", "iteration": it}
            rec.update({f"L_{k}": float(torch.as_tensor(terms[k]).detach()) for k in TERMS})
            rec.update({"total": float(loss.detach()), "lr": cfg.lr,
                        "wall_time": round(time.time() - t0, 4)})
            log_fn(rec)
    student.stage = "student"
    if on_checkpoint is not None:
        on_checkpoint(student, TrainState(end, opt.state_dict()))
    return student


def _ensemble(teacher, x, heatmap, n, sigma, rng):
    noise = torch.as_tensor(rng.normal(0.0, sigma, (n, *x.shape)), dtype=x.dtype)
    batch = (x[None] + noise).reshape(-1, *x.shape[1:])
    hm = None if heatmap is None else heatmap[None].expand(n, *heatmap.shape).reshape(-1, *x.shape[1:])
    with torch.no_grad():
        out = forward_tensor(teacher, batch, hm).reshape(n, *x.shape)
    return TeacherEnsemble.from_members(out, sigma)


# ---------------------------------------------------------------------------
# pipeline and ablations


def build_teacher(cfg: TrainConfig, point_prompt=False):
    prompt = PromptMode.point() if point_prompt else PromptMode.concept()
    return build_model(cfg.width, cfg.depth, prompt, seed=cfg.seed, role=Source.TEACHER)


def build_student(cfg: TrainConfig):
    return build_model(cfg.width, cfg.depth, PromptMode.concept(), seed=cfg.seed + 7919, role=Source.STUDENT)


def run_pipeline(cfg: TrainConfig, labeled, unlabeled, flow_provider=None, teacher=None, log_fn=None):
    """Stage 1 (unless a teacher is given) then Stage 2; returns (teacher, student)."""
    flow_provider = flow_provider or FlowProvider(cfg.flow_kind)
    if teacher is None:
        teacher = finetune_teacher(build_teacher(cfg, "TPT" not in cfg.ablation), labeled, cfg, log_fn)
    student = train_student(teacher, build_student(cfg), labeled, unlabeled, flow_provider, cfg, log_fn)
    return teacher, student


def supervised_config(cfg: TrainConfig):
    w = dataclasses.replace(cfg.weights, lambda_conf=0.0, lambda_opti=0.0, lambda_coh=0.0)
    return cfg.replace(weights=w)


ABLATION_ROWS = (
    frozenset({"CCR", "DSTC"}),
    frozenset({"TPT", "DSTC"}),
    frozenset({"TPT", "CCR"}),
    frozenset({"TPT", "CCR", "DSTC"}),
)
PERTURBATION_SWEEP = (2, 4, 6, 8)


def run_ablation_suite(base_cfg: TrainConfig, datasets, flow_provider=None, log_fn=None):
    """Single-component-off rows plus the all-on row, then the perturbation-count sweep.

    ``datasets`` is (labeled, unlabeled, test). Returns a dict with keys
    ``table2`` and ``table3``, each a list of row dicts holding the settings,
    the summary MetricReport (or None) and an ``error`` string for failures.
    """
    labeled, unlabeled, test = datasets
    teachers = {}

    def teacher_for(point):
        if point not in teachers:
            cfg = base_cfg.replace(ablation=frozenset(COMPONENTS) - ({"TPT"} if point else set()))
            teachers[point] = finetune_teacher(build_teacher(cfg, point), labeled, cfg)
        return teachers[point]

    results = {}

    def run(ablation, n):
        key = (ablation, n)
        if key in results:
            return results[key]
        cfg = base_cfg.replace(ablation=ablation, n_perturbations=n)
        try:
            teacher = teacher_for("TPT" not in ablation)
            _, student = run_pipeline(cfg, labeled, unlabeled, flow_provider, teacher, log_fn)
            res = (summarize(evaluate_clips(student, test)), "")
        except Exception as exc:  # noqa: BLE001 - a failed row must not stop the suite
            log.exception("ablation row %s n=%s failed", sorted(ablation), n)
            res = (None, f"{type(exc).__name__}: {exc}")
        results[key] = res
        return res

    table2 = []
    for abl in ABLATION_ROWS:
        rep, err = run(abl, base_cfg.n_perturbations)
        table2.append({"ablation": abl, "report": rep, "error": err})
    table3 = []
    for n in PERTURBATION_SWEEP:
        rep, err = run(frozenset(COMPONENTS), n)
        table3.append({"n": n, "report": rep, "error": err})
    return {"table2": table2, "table3": table3}


def _pct(rep, k):
    return "" if rep is None else f"{100.0 * getattr(rep, k):.2f}"


def table2_csv(rows):
    lines = ["TPT,CCR,DSTC,DSC,NSD,clDice,Spe,Sen,error"]
    for r in rows:
        flags = ["1" if c in r["ablation"] else "0" for c in COMPONENTS]
        vals = [_pct(r["report"], k) for k in METRIC_NAMES]
        lines.append(",".join(flags + vals + [r["error"].replace(",", ";")]))
    return "\n".join(lines) + "\n"


def table3_csv(rows):
    lines = ["Noise,DSC(%),NSD(%),clDice(%),Spe(%),Sen(%),error"]
    for r in sorted(rows, key=lambda r: r["n"]):
        vals = [_pct(r["report"], k) for k in METRIC_NAMES]
        lines.append(",".join([str(r["n"])] + vals + [r["error"].replace(",", ";")]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"SMARTCKPT"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _optim_arrays(state):
    arrays, meta = {}, {"param_groups": state["param_groups"], "state": {}}
    for pid, st in state["state"].items():
        entry = {}
        for k, v in st.items():
            if isinstance(v, torch.Tensor) and v.dim() > 0:
                arrays[f"optim.{pid}.{k}"] = v.detach().cpu().numpy()
                entry[k] = "array"
            else:
                entry[k] = float(v)
        meta["state"][str(pid)] = entry
    return arrays, meta


def _optim_state(arrays, meta):
    state = {}
    for pid, entry in meta["state"].items():
        st = {}
        for k, v in entry.items():
            if v == "array":
                st[k] = torch.from_numpy(np.array(arrays[f"optim.{pid}.{k}"]))
            else:
                st[k] = torch.tensor(v, dtype=torch.float32)
        state[int(pid)] = st
    return {"state": state, "param_groups": meta["param_groups"]}


def save_checkpoint(path, model: ModelHandle, cfg: TrainConfig = None, iteration=0, train_state: TrainState = None):
    """Single-file archive: magic, header length, JSON header, raw array payload.

    The header records the format version and the SHA-256 of the payload.
    """
    arrays = {f"param.{k}": v for k, v in model.named_arrays().items()}
    optim_meta = None
    if train_state is not None:
        extra, optim_meta = _optim_arrays(train_state.optimizer_state)
        arrays.update(extra)
        iteration = train_state.iteration
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.astype(a.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "role": model.role.value, "prompt": model.prompt.kind.value,
        "width": model.width, "depth": model.depth, "seed": model.seed,
        "stage": model.stage, "frozen": model.frozen, "iteration": int(iteration),
        "config": cfg.to_flat() if cfg is not None else None,
        "optimizer": optim_meta,
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def load_checkpoint(path):
    """Returns (model, cfg or None, iteration, TrainState or None); verifies version and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC) or len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = blob[start + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")

    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"]).copy()
    prompt = PromptMode(header["prompt"])
    model = build_model(header["width"], header["depth"], prompt, header["seed"], Source(header["role"]))
    model.load_arrays({k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
    model.stage = header["stage"]
    if header["frozen"]:
        model.freeze()
    cfg = TrainConfig.from_flat(header["config"]) if header["config"] else None
    state = None
    if header["optimizer"] is not None:
        state = TrainState(header["iteration"], _optim_state(arrays, header["optimizer"]))
    return model, cfg, header["iteration"], state
