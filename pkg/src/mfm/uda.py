"""Self-training with an EMA teacher plus the masked-feature auxiliary loss."""
from __future__ import annotations

import copy
import enum
from dataclasses import dataclass

import numpy as np
import torch

from . import tensor as T
from .rebuilder import Rebuilder, fuse, resize_mask
from .segmodel import IGNORE_INDEX, supervised_loss


class ObjectiveKind(str, enum.Enum):
    PIXEL_CLS = "pixel_cls"
    PIXEL_REC_NORM = "pixel_rec_norm"
    FEAT_REC_TEACHER = "feat_rec_teacher"
    FEAT_REC_SELF = "feat_rec_self"
    MASKING_ONLY = "masking_only"
    NONE = "none"


@dataclass
class PseudoBatch:
    labels: torch.Tensor
    q: float


@dataclass
class LossReport:
    l_sup: float
    l_uda: float
    l_mfm: float
    l_overall: float
    q: float


def make_teacher(student):
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(teacher, student, alpha):
    """theta_T <- alpha * theta_T + (1 - alpha) * theta_S, parameter-wise."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter trees differ: "
                         f"{sorted(t_params.keys() ^ s_params.keys())}")
    for name, s in s_params.items():
        t = t_params[name]
        if t.shape != s.shape:
            raise ValueError(f"{name}: teacher {tuple(t.shape)} vs student {tuple(s.shape)}")
        t.mul_(alpha).add_(s.detach(), alpha=1.0 - alpha)
    return teacher


@torch.no_grad()
def pseudo_label(teacher_logits, threshold):
    """Argmax labels where max softmax >= threshold, else 255."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    prob = T.softmax(teacher_logits.double(), dim=1)
    conf, labels = prob.max(dim=1)
    confident = conf >= threshold
    labels = labels.masked_fill(~confident, IGNORE_INDEX)
    return PseudoBatch(labels=labels, q=float(confident.double().mean()))


def mfm_loss(x_t, pseudo: PseudoBatch, model, rebuilder: Rebuilder, rng=None, mask=None,
             features=None, q_weight=True):
    """Decoder CE of the reconstructed target features against pseudo-labels."""
    if pseudo.labels.shape[-2:] != x_t.shape[-2:]:
        raise ValueError("pseudo-labels must match the target image extent")
    ft = model.encode(x_t) if features is None else features
    fr = rebuilder.reconstruct(ft, rng=rng, mask=mask)
    loss = supervised_loss(model.decode(fr, x_t.shape[-2:]), pseudo.labels)
    return loss * pseudo.q if q_weight else loss


def _as_list(f):
    return [f] if torch.is_tensor(f) else list(f)


def _masked_mse(pred, target, ms):
    """Mean squared error over masked positions and all channels (0 if none)."""
    m = ms.unsqueeze(-3).to(pred.dtype)
    diff = T.add(pred, -target)
    sq = T.hadamard(T.hadamard(diff, diff), m)
    count = m.sum() * pred.shape[1]
    return sq.sum() / count.clamp(min=1.0)


def patchify(images, patch):
    """N×3×H×W -> N×L×(3·p·p), patches in row-major grid order."""
    n, c, h, w = images.shape
    gh, gw = h // patch, w // patch
    x = images[:, :, : gh * patch, : gw * patch].reshape(n, c, gh, patch, gw, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(n, gh * gw, patch * patch * c)


def normalized_patches(images, patch, eps=1e-6):
    target = patchify(images, patch)
    mean = target.mean(dim=-1, keepdim=True)
    var = target.var(dim=-1, keepdim=True, unbiased=False)
    return (target - mean) / (var + eps) ** 0.5


def comparator_loss(kind, x_t, model, teacher, rebuilder: Rebuilder, rng=None, mask=None,
                    pseudo: PseudoBatch | None = None, features=None, q_weight=True):
    """Alternative auxiliary objectives sharing the feature-masking machinery."""
    kind = ObjectiveKind(kind)
    if kind in (ObjectiveKind.PIXEL_CLS, ObjectiveKind.NONE):
        raise ValueError(f"comparator_loss does not handle {kind.value}")
    ft = _as_list(model.encode(x_t) if features is None else features)
    if mask is None:
        mask = rebuilder.sample_masks(x_t.shape[0], rng)
    masks_s = [resize_mask(mask, f.shape[-2:]) for f in ft]

    if kind is ObjectiveKind.PIXEL_REC_NORM:
        tokens = rebuilder.transform(rebuilder.embed_features(ft[-1]), mask)
        pred = rebuilder.pixel_head(tokens)
        target = normalized_patches(x_t, rebuilder.patch)
        if target.shape != pred.shape:
            raise ValueError(f"pixel head {tuple(pred.shape)} vs patches {tuple(target.shape)}")
        m = mask.reshape(mask.shape[0], -1, 1).to(pred.dtype)
        diff = T.add(pred, -target)
        sq = T.hadamard(T.hadamard(diff, diff), m)
        return sq.sum() / (m.sum() * pred.shape[-1]).clamp(min=1.0)

    if kind is ObjectiveKind.MASKING_ONLY:
        if pseudo is None:
            raise ValueError("masking_only needs pseudo-labels")
        fused = []
        for f, tok, ms in zip(ft, rebuilder.feature_tokens, masks_s):
            fo = tok.view(1, -1, 1, 1).expand_as(f)
            fused.append(fuse(f, fo, ms))
        fr = fused[0] if len(fused) == 1 else fused
        loss = supervised_loss(model.decode(fr, x_t.shape[-2:]), pseudo.labels)
        return loss * pseudo.q if q_weight else loss

    offsets = rebuilder.rebuild(ft, mask)
    fused = [fuse(f, o, ms) for f, o, ms in zip(ft, offsets, masks_s)]
    if kind is ObjectiveKind.FEAT_REC_TEACHER:
        with torch.no_grad():
            targets = _as_list(teacher.encode(x_t))
    else:
        targets = [f.detach() for f in ft]
    losses = [_masked_mse(fr, tg, ms) for fr, tg, ms in zip(fused, targets, masks_s)]
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return total / len(losses)


def auxiliary_loss(kind, x_t, model, teacher, rebuilder, rng=None, mask=None, pseudo=None,
                   features=None, q_weight=True):
    kind = ObjectiveKind(kind)
    if kind is ObjectiveKind.NONE:
        return torch.zeros((), dtype=x_t.dtype)
    if kind is ObjectiveKind.PIXEL_CLS:
        return mfm_loss(x_t, pseudo, model, rebuilder, rng=rng, mask=mask, features=features,
                        q_weight=q_weight)
    return comparator_loss(kind, x_t, model, teacher, rebuilder, rng=rng, mask=mask, pseudo=pseudo,
                           features=features, q_weight=q_weight)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    rebuilder_lr: float = 6e-5
    weight_decay: float = 0.01
    poly_power: float = 0.9
    steps: int = 2000
    lam: float = 1.0
    tau: float = 0.968
    alpha: float = 0.999
    objective: str = "pixel_cls"
    q_weight: bool = True
    mfm_on_source: bool = False  # extension: also apply the aux loss to labelled source images
    uda: bool = True


class Trainer:
    """Owns student, EMA teacher, rebuilder, optimizer and the mask RNG."""

    def __init__(self, model, rebuilder: Rebuilder | None, cfg: TrainConfig, seed=0):
        self.model = model
        self.rebuilder = rebuilder
        self.cfg = cfg
        self.teacher = make_teacher(model)
        self.rng = np.random.default_rng([seed, 7])
        groups = [{"params": list(model.parameters()), "lr": cfg.lr}]
        if rebuilder is not None:
            groups.append({"params": list(rebuilder.parameters()), "lr": cfg.rebuilder_lr})
        self.opt = torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)
        total = max(cfg.steps, 1)
        poly = lambda step: (1 - min(step, total) / total) ** cfg.poly_power  # noqa: E731
        const = lambda step: 1.0  # noqa: E731
        self.sched = torch.optim.lr_scheduler.LambdaLR(self.opt, [poly] + [const] * (len(groups) - 1))
        self.step_count = 0

    @property
    def objective(self):
        return ObjectiveKind(self.cfg.objective)

    def losses(self, xs, ys, xt, lam=None, mask=None):
        """Loss terms for one batch; does not touch parameters.

        Returns (l_sup, l_uda, l_mfm, l_overall, q) with l_overall in float64.
        """
        lam = self.cfg.lam if lam is None else lam
        model = self.model
        l_sup = supervised_loss(model(xs), ys)
        with torch.no_grad():
            pseudo = pseudo_label(self.teacher(xt), self.cfg.tau)
        ft = model.encode(xt)
        if self.cfg.uda:
            l_uda = supervised_loss(model.decode(ft, xt.shape[-2:]), pseudo.labels)
            if self.cfg.q_weight:
                l_uda = l_uda * pseudo.q
        else:
            l_uda = torch.zeros((), dtype=l_sup.dtype)
        kind = self.objective
        if kind is ObjectiveKind.NONE or self.rebuilder is None:
            l_mfm = torch.zeros((), dtype=l_sup.dtype)
        else:
            if mask is None:
                mask = self.rebuilder.sample_masks(xt.shape[0], self.rng)
            l_mfm = auxiliary_loss(kind, xt, model, self.teacher, self.rebuilder, mask=mask,
                                   pseudo=pseudo, features=ft, q_weight=self.cfg.q_weight)
            if self.cfg.mfm_on_source:
                src = PseudoBatch(labels=ys, q=1.0)
                smask = self.rebuilder.sample_masks(xs.shape[0], self.rng)
                l_mfm = l_mfm + auxiliary_loss(kind, xs, model, self.teacher, self.rebuilder, mask=smask,
                                               pseudo=src, q_weight=False)
        for name, value in (("l_sup", l_sup), ("l_uda", l_uda), ("l_mfm", l_mfm)):
            if not torch.isfinite(value):
                raise T.NumericalError(f"non-finite {name} at step {self.step_count}")
        total = l_sup.double() + l_uda.double()
        if kind is not ObjectiveKind.NONE and lam != 0:
            total = total + lam * l_mfm.double()
        return l_sup, l_uda, l_mfm, total, pseudo.q

    def train_step(self, xs, ys, xt):
        self.model.train()
        l_sup, l_uda, l_mfm, total, q = self.losses(xs, ys, xt)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        self.sched.step()
        for group in self.opt.param_groups:
            for p in group["params"]:
                if not torch.isfinite(p).all():
                    raise T.NumericalError(f"non-finite parameter after step {self.step_count}")
        if self.cfg.uda:
            # early steps track the student closely, as in mean-teacher warm-up
            alpha = min(1.0 - 1.0 / (self.step_count + 1), self.cfg.alpha)
            ema_update(self.teacher, self.model, alpha)
        self.step_count += 1
        return LossReport(l_sup.item(), l_uda.item(), l_mfm.item(), total.item(), q)
