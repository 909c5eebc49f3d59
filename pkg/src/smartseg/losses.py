"""Training objectives.

All functions take logits as torch tensors shaped ``[H, W]`` or ``[B, H, W]``
and return the batch mean of the per-map loss. Numpy arrays and the core
PredictionMap / BinaryMask / FlowField types are accepted too; in that case
a Python float is returned.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from .core import BinaryMask, FlowField, LossWeights, PredictionMap
from .flow import warp

DICE_SMOOTH = 1.0
TERMS = ("dice", "bce", "conf", "opti", "coh")


class Pairing(str, Enum):
    AS_WRITTEN = "as_written"
    CONVENTIONAL = "conventional"


def _tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x, False
    if isinstance(x, PredictionMap):
        x = x.logits
    elif isinstance(x, BinaryMask):
        x = x.values
    elif isinstance(x, FlowField):
        x = np.stack([x.u, x.v])
    return torch.as_tensor(np.array(x, dtype=np.float64), dtype=dtype), True


def _out(val, plain):
    return float(val) if plain else val


def _flat(x):
    return x.reshape(-1, x.shape[-2] * x.shape[-1])


def dice_loss(pred, target):
    s, plain = _tensor(pred)
    q, _ = _tensor(target)
    p = _flat(torch.sigmoid(s))
    q = _flat(q.to(p.dtype))
    loss = 1 - (2 * (p * q).sum(-1) + DICE_SMOOTH) / (p.sum(-1) + q.sum(-1) + DICE_SMOOTH)
    return _out(loss.mean(), plain)


def bce_loss(pred, target):
    s, plain = _tensor(pred)
    q, _ = _tensor(target)
    return _out(F.binary_cross_entropy_with_logits(s, q.to(s.dtype)), plain)


def finetune_loss(pred, target, w: LossWeights):
    return w.lambda1 * dice_loss(pred, target) + w.lambda2 * bce_loss(pred, target)


@dataclass
class TeacherEnsemble:
    members: torch.Tensor       # [N, ..., H, W] logits, one per noise draw
    mean_logits: torch.Tensor   # [..., H, W]
    uncertainty: torch.Tensor   # [..., H, W]
    noise_sigma: float

    @property
    def n_perturbations(self):
        return self.members.shape[0]

    @classmethod
    def from_members(cls, members, noise_sigma=0.0):
        members = torch.as_tensor(members).detach()
        if members.shape[0] < 2:
            raise ValueError("an ensemble needs at least two members")
        mean = members.mean(0)
        unc = ((members - mean) ** 2).mean(0)
        return cls(members, mean, unc, noise_sigma)


def build_ensemble(teacher, frame, n, sigma, rng) -> TeacherEnsemble:
    """Run the frozen teacher on ``n`` noisy copies ``X + eps_i``.

    ``teacher`` is a frozen ModelHandle or any callable mapping an image
    batch ``[B, H, W]`` to logits ``[B, H, W]``. ``frame`` is an ImageFrame,
    an array ``[H, W]`` or a batch ``[B, H, W]``. ``rng`` is a numpy
    Generator or a torch Generator.
    """
    from .backbone import ModelHandle, forward_tensor

    if n < 2:
        raise ValueError("ensemble needs n >= 2 perturbations")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    x = getattr(frame, "pixels", frame)
    x = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    single = x.dim() == 2
    if single:
        x = x[None]
    if isinstance(teacher, ModelHandle):
        if not teacher.frozen:
            raise RuntimeError("the teacher must be frozen before building an ensemble")
        x = x.to(next(teacher.net.parameters()).dtype)
        fn = lambda b: forward_tensor(teacher, b)
    else:
        fn = teacher

    if isinstance(rng, torch.Generator):
        noise = torch.randn((n, *x.shape), generator=rng, dtype=x.dtype) * sigma
    else:
        noise = torch.as_tensor(rng.normal(0.0, 1.0, (n, *x.shape)), dtype=x.dtype) * sigma
    batch = (x[None] + noise).reshape(n * x.shape[0], *x.shape[1:])
    with torch.no_grad():
        out = fn(batch).reshape(n, *x.shape)
    if single:
        out = out[:, 0]
    return TeacherEnsemble.from_members(out, sigma)


def confidence_consistency_loss(student, ens, w: LossWeights, mean_logits=None, uncertainty=None):
    """Uncertainty-weighted squared probability gap plus the beta * mean(U) term.

    The ensemble is detached: gradients reach the student logits only.
    ``mean_logits``/``uncertainty`` may be passed directly instead of ``ens``.
    """
    s, plain = _tensor(student)
    if ens is not None:
        mean_logits, uncertainty = ens.mean_logits, ens.uncertainty
    pbar = _tensor(mean_logits)[0].detach().to(s.dtype)
    u = _tensor(uncertainty)[0].detach().to(s.dtype)
    n_px = s.shape[-1] * s.shape[-2]
    d = _flat((torch.sigmoid(s) - torch.sigmoid(pbar)) ** 2)
    u = _flat(u)
    weighted = (d * u).sum(-1) / (u.sum(-1) + n_px * w.eta)
    loss = weighted + w.beta / n_px * u.sum(-1)
    return _out(loss.mean(), plain)


def motion_consistency_loss(s_t, s_t1, f_fwd, f_bwd, pairing=Pairing.AS_WRITTEN):
    """Dual-stream temporal consistency on sigmoid probabilities.

    as_written:   S_t vs W(S_{t+1}, F_fwd)  and  S_{t+1} vs W(S_t, F_bwd)
    conventional: S_{t+1} vs W(S_t, F_fwd)  and  S_t vs W(S_{t+1}, F_bwd)
    """
    a, plain = _tensor(s_t)
    b, _ = _tensor(s_t1)
    fw = f_fwd if isinstance(f_fwd, (FlowField, torch.Tensor)) else _tensor(f_fwd)[0]
    bw = f_bwd if isinstance(f_bwd, (FlowField, torch.Tensor)) else _tensor(f_bwd)[0]
    pa, pb = torch.sigmoid(a), torch.sigmoid(b)
    if Pairing(pairing) == Pairing.AS_WRITTEN:
        r1 = pa - warp(pb, fw)
        r2 = pb - warp(pa, bw)
    else:
        r1 = pb - warp(pa, fw)
        r2 = pa - warp(pb, bw)
    n_px = a.shape[-1] * a.shape[-2]
    loss = (_flat(r1 ** 2).sum(-1) + _flat(r2 ** 2).sum(-1)) / (2 * n_px)
    return _out(loss.mean(), plain)


def flow_coherence_loss(s_t, f_fwd, w: LossWeights):
    """Soft-mask-weighted variance of the forward flow around its weighted mean.

    The lambda_coh prefactor is applied once, by :func:`total_loss`.
    """
    s, plain = _tensor(s_t)
    if isinstance(f_fwd, torch.Tensor):
        f = f_fwd.to(s.dtype)
    else:
        f = _tensor(f_fwd)[0].to(s.dtype)
    p = _flat(torch.sigmoid(s))                       # [B, P]
    f = f.reshape(-1, 2, p.shape[-1])                 # [B, 2, P]
    mass = p.sum(-1)                                  # [B]
    phi = (p[:, None] * f).sum(-1) / (mass[:, None] + w.eps)
    spread = (p * ((f - phi[..., None]) ** 2).sum(1)).sum(-1)
    ok = mass >= 10 * w.eps
    loss = torch.where(ok, spread / torch.where(ok, mass, torch.ones_like(mass)), torch.zeros_like(mass))
    return _out(loss.mean(), plain)


def weighted_terms(components, w: LossWeights):
    scale = {"dice": w.lambda_dice, "bce": w.lambda_bce, "conf": w.lambda_conf,
             "opti": w.lambda_opti, "coh": w.lambda_coh}
    out = {}
    for k in TERMS:
        v = components.get(k, 0.0)
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if math.isnan(fv):
            raise FloatingPointError(f"loss component {k} is NaN")
        out[k] = scale[k] * v
    return out


def total_loss(components, w: LossWeights):
    """Weighted sum of the five terms; missing terms count as 0."""
    unknown = set(components) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss components {sorted(unknown)}")
    terms = weighted_terms(components, w)
    total = 0.0
    for k in TERMS:
        total = total + terms[k]
    return total
