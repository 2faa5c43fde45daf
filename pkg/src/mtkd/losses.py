"""Training and distillation objectives.

Feature-level terms compare student and teacher feature sequences with the
Euclidean norm per position (token level) or of the mean-pooled difference
(sentence level). Decoder terms work on output distributions. Every term is
restricted to unmasked positions and averaged over the batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .models import FeatureSeq, StepDistributions

TEACHERS = ("i", "s", "d")
TERM_NAMES = ("tkd_i", "skd_i", "tkd_s", "skd_s", "tkd_d", "skd_d")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class KDWeights:
    """Loss weights. ``enable_token`` / ``enable_sentence`` list the teachers
    (``"i"`` image encoder, ``"s"`` sequential encoder, ``"d"`` decoder) whose
    token- or sentence-level term is switched on."""

    lambda_kd: float = 0.8
    lambda_i: float = 1.0
    lambda_s: float = 1.0
    lambda_d: float = 1.0
    enable_token: frozenset = frozenset(TEACHERS)
    enable_sentence: frozenset = frozenset(TEACHERS)
    squared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "enable_token", frozenset(self.enable_token))
        object.__setattr__(self, "enable_sentence", frozenset(self.enable_sentence))
        if not (0.0 <= self.lambda_kd <= 1.0):
            raise LossError(f"lambda_kd must lie in [0, 1], got {self.lambda_kd}")
        for name in ("lambda_i", "lambda_s", "lambda_d"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise LossError(f"{name} must be finite and >= 0, got {v}")
        bad = (self.enable_token | self.enable_sentence) - set(TEACHERS)
        if bad:
            raise LossError(f"unknown teacher keys {sorted(bad)}")

    def teacher_weight(self, teacher: str) -> float:
        return {"i": self.lambda_i, "s": self.lambda_s, "d": self.lambda_d}[teacher]

    def active(self, term: str) -> bool:
        """Whether ``term`` (e.g. ``"skd_s"``) can contribute to the total."""
        level, teacher = term.split("_")
        enabled = self.enable_token if level == "tkd" else self.enable_sentence
        return self.lambda_kd > 0 and self.teacher_weight(teacher) > 0 and teacher in enabled

    def needs(self, teacher: str) -> bool:
        return any(self.active(f"{lvl}_{teacher}") for lvl in ("tkd", "skd"))

    @classmethod
    def for_teachers(cls, teachers: str, **kwargs) -> "KDWeights":
        """Weights with only the listed teachers switched on, e.g. ``"ds"``."""
        teachers = set(teachers.lower())
        return cls(
            lambda_i=1.0 if "i" in teachers else 0.0,
            lambda_s=1.0 if "s" in teachers else 0.0,
            lambda_d=1.0 if "d" in teachers else 0.0,
            **kwargs,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["enable_token"] = sorted(self.enable_token)
        d["enable_sentence"] = sorted(self.enable_sentence)
        return d


@dataclass
class LossReport:
    total: torch.Tensor
    l_timt: torch.Tensor
    l_kd: torch.Tensor
    terms: dict = field(default_factory=dict)

    def as_floats(self) -> dict:
        out = {"total": float(self.total.detach()), "l_timt": float(self.l_timt.detach()),
               "l_kd": float(self.l_kd.detach())}
        for name in TERM_NAMES:
            out[name] = float(self.terms.get(name, 0.0))
        return out

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.as_floats()}, sort_keys=True)


def _mask_f(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return mask.to(like.dtype)


def ce_loss(dists: StepDistributions, gold: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Negative log-likelihood of ``gold`` summed over unmasked steps, averaged over the batch."""
    logp = dists.log_probs
    gold = torch.as_tensor(gold)
    if gold.dim() == 1:
        gold = gold[None]
    if gold.shape != logp.shape[:2]:
        raise LossError(f"gold shape {tuple(gold.shape)} does not match {tuple(logp.shape[:2])} distribution rows")
    if mask is None:
        mask = torch.ones_like(gold, dtype=torch.bool)
    picked = logp.gather(-1, gold[..., None]).squeeze(-1)
    picked = torch.where(mask, picked, torch.zeros_like(picked))
    return -picked.sum() / gold.shape[0]


def _check_pair(student: FeatureSeq, teacher: FeatureSeq) -> None:
    if student.data.shape != teacher.data.shape:
        raise LossError(
            f"student features {tuple(student.data.shape)} and teacher features "
            f"{tuple(teacher.data.shape)} are not aligned"
        )
    if not torch.equal(student.mask, teacher.mask):
        raise LossError("student and teacher feature masks differ")


def _norm(x: torch.Tensor, squared: bool) -> torch.Tensor:
    sq = (x * x).sum(dim=-1)
    if squared:
        return sq
    # sqrt has an infinite slope at 0 (padded rows, identical features); use the zero subgradient
    nonzero = sq > 0
    safe = torch.where(nonzero, sq, torch.ones_like(sq))
    return torch.where(nonzero, torch.sqrt(safe), torch.zeros_like(sq))


def token_kd_l2(student: FeatureSeq, teacher: FeatureSeq, squared: bool = False) -> torch.Tensor:
    _check_pair(student, teacher)
    diff = student.data - teacher.data.detach()
    m = _mask_f(student.mask, diff)
    per_pos = _norm(diff, squared) * m
    lengths = m.sum(dim=1).clamp_min(1.0)
    return (per_pos.sum(dim=1) / lengths).mean()


def _pool(fs: FeatureSeq, data: torch.Tensor) -> torch.Tensor:
    m = _mask_f(fs.mask, data)
    return (data * m[..., None]).sum(dim=1) / m.sum(dim=1, keepdim=True).clamp_min(1.0)


def sentence_kd_l2(student: FeatureSeq, teacher: FeatureSeq, squared: bool = False) -> torch.Tensor:
    _check_pair(student, teacher)
    diff = _pool(student, student.data) - _pool(teacher, teacher.data.detach())
    return _norm(diff, squared).mean()


def decoder_token_kd(
    student: StepDistributions, teacher: StepDistributions, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Cross-entropy of the student's step distributions against the teacher's full distributions."""
    s_logp = student.log_probs
    t_p = teacher.probs.detach()
    if s_logp.shape != t_p.shape:
        raise LossError(f"student {tuple(s_logp.shape)} and teacher {tuple(t_p.shape)} distributions differ in shape")
    # 0 * log 0 counts as 0
    prod = torch.where(t_p > 0, t_p * s_logp, torch.zeros_like(s_logp))
    per_step = -prod.sum(dim=-1)
    if mask is not None:
        per_step = torch.where(mask, per_step, torch.zeros_like(per_step))
    return per_step.sum() / per_step.shape[0]


def decoder_sentence_kd(
    student: StepDistributions, teacher_tokens: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Log-likelihood loss with the teacher's decoded sentence standing in for the reference.

    ``student`` must come from a pass teacher-forced on that same sentence.
    """
    return ce_loss(student, teacher_tokens, mask)


def entropy(dists: StepDistributions, mask: torch.Tensor | None = None) -> torch.Tensor:
    p = dists.probs
    per_step = -torch.where(p > 0, p * dists.log_probs, torch.zeros_like(p)).sum(dim=-1)
    if mask is not None:
        per_step = torch.where(mask, per_step, torch.zeros_like(per_step))
    return per_step.sum() / per_step.shape[0]


def combined_loss(l_timt: torch.Tensor, terms: Mapping[str, torch.Tensor], weights: KDWeights) -> LossReport:
    """Mix the translation loss with the weighted distillation terms.

    Inactive terms (toggled off, or zero teacher weight) contribute nothing even
    if present in ``terms``; missing active terms are an error.
    """
    zero = torch.zeros((), dtype=l_timt.dtype)
    per_teacher = {}
    for t in TEACHERS:
        acc = zero
        for lvl in ("tkd", "skd"):
            name = f"{lvl}_{t}"
            if weights.active(name):
                if name not in terms:
                    raise LossError(f"active term {name} missing")
                acc = acc + terms[name]
        per_teacher[t] = acc
    l_kd = (
        weights.lambda_i * per_teacher["i"]
        + weights.lambda_s * per_teacher["s"]
        + weights.lambda_d * per_teacher["d"]
    )
    total = (1.0 - weights.lambda_kd) * l_timt + weights.lambda_kd * l_kd
    reported = {name: terms[name].detach() if name in terms else zero for name in TERM_NAMES}
    return LossReport(total=total, l_timt=l_timt, l_kd=l_kd, terms=reported)


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    epsilon: float = 1e-4,
    n_probe: int = 20,
    seed: int = 0,
    watch: torch.nn.Module | None = None,
) -> float:
    """Max relative error between autograd and central finite differences.

    ``params`` should be float64 leaf tensors with ``requires_grad``; up to
    ``n_probe`` random coordinates of each are perturbed in place and restored.
    If ``watch`` is given, probes whose perturbation flips the sign of any
    ``nn.ReLU`` input inside it are skipped: the difference quotient straddles
    a kink there and says nothing about the gradient. Probes where both the
    analytic and the numeric value sit below the difference quotient's
    roundoff resolution (about 100 ulp of the loss over ``epsilon``) are
    skipped as well: a structurally zero gradient, such as an attention key
    bias under softmax shift invariance, cannot be resolved by the quotient.
    The relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    signs: list[torch.Tensor] = []
    hooks = []
    if watch is not None:
        for m in watch.modules():
            if isinstance(m, torch.nn.ReLU):
                hooks.append(m.register_forward_hook(lambda _m, inp, _out: signs.append(inp[0].detach() > 0)))

    def run():
        signs.clear()
        value = loss_fn()
        return value, list(signs)

    try:
        return _probe(run, params, epsilon, n_probe, seed)
    finally:
        for h in hooks:
            h.remove()


def _probe(run, params, epsilon, n_probe, seed) -> float:
    loss, base = run()
    if not torch.isfinite(loss):
        raise LossError("loss is not finite")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    resolution = 100 * np.finfo(np.float64).eps * max(abs(loss.item()), 1.0) / epsilon
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            g = torch.zeros_like(p) if g is None else g
            gflat = g.reshape(-1)
            picks = rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False)
            for k in picks:
                k = int(k)
                orig = flat[k].item()
                flat[k] = orig + epsilon
                up, s_up = run()
                flat[k] = orig - epsilon
                down, s_down = run()
                flat[k] = orig
                up, down = up.item(), down.item()
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise LossError("loss is not finite under perturbation")
                if any(not torch.equal(a, b) for a, b in zip(base, s_up)) or any(
                    not torch.equal(a, b) for a, b in zip(base, s_down)
                ):
                    continue
                numeric = (up - down) / (2 * epsilon)
                analytic = gflat[k].item()
                if max(abs(analytic), abs(numeric)) < resolution:
                    continue
                denom = max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst
