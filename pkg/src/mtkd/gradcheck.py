"""Finite-difference verification of every loss at toy sizes (B=2, l=3, d=4, |V|=6).

Each loss is checked twice in float64: with respect to its direct inputs
(features or logits), and end to end with respect to the parameters of tiny
student / teacher networks.
"""

from __future__ import annotations

from dataclasses import replace

import torch

from .corpus import CorpusSpec, batch, build_vocab, make_sample
from .losses import (
    ce_loss,
    decoder_sentence_kd,
    decoder_token_kd,
    gradient_check,
    sentence_kd_l2,
    token_kd_l2,
)
from .models import FeatureSeq, ModelConfig, StepDistributions, build_model, freeze, greedy_decode

LOSS_NAMES = ("ce_timt", "ce_tir", "ce_mt", "tkd_i", "skd_i", "tkd_s", "skd_s", "tkd_d", "skd_d")
TOY_ALPHABET = "ab"  # 2 characters + 4 specials = 6 ids
TOY_TEXTS = ("abb", "bab")


def _toy_batch():
    spec = CorpusSpec(alphabet=TOY_ALPHABET, min_len=3, max_len=3)
    vocab = build_vocab(spec.alphabet)
    b = batch([make_sample(t, spec, vocab, index=i) for i, t in enumerate(TOY_TEXTS)])
    return {k: torch.from_numpy(getattr(b, k)) for k in (
        "images", "src", "src_mask", "src_in", "src_out", "src_out_mask", "tgt_in", "tgt_out", "tgt_out_mask")}


def _direct_checks(epsilon: float, seed: int) -> dict[str, float]:
    gen = torch.Generator().manual_seed(seed)
    B, L, D, V = 2, 3, 4, 6
    mask = torch.ones(B, L, dtype=torch.bool)

    def leaf(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64).requires_grad_(True)

    student = leaf(B, L, D)
    # keep the teacher away from the student: the norm has a kink at zero difference
    teacher = (student.detach() + 1.0 + torch.rand(B, L, D, generator=gen, dtype=torch.float64))
    s_fs, t_fs = FeatureSeq(student, mask), FeatureSeq(teacher, mask)
    logits = leaf(B, L, V)
    t_logits = torch.randn(B, L, V, generator=gen, dtype=torch.float64)
    gold = torch.randint(0, V, (B, L), generator=gen)

    ce = lambda: ce_loss(StepDistributions(logits), gold, mask)
    out = {
        "ce_timt": gradient_check(ce, [logits], epsilon, seed=seed),
        "tkd_i": gradient_check(lambda: token_kd_l2(s_fs, t_fs), [student], epsilon, seed=seed),
        "skd_i": gradient_check(lambda: sentence_kd_l2(s_fs, t_fs), [student], epsilon, seed=seed),
        "tkd_d": gradient_check(
            lambda: decoder_token_kd(StepDistributions(logits), StepDistributions(t_logits), mask),
            [logits], epsilon, seed=seed),
        "skd_d": gradient_check(lambda: decoder_sentence_kd(StepDistributions(logits), gold, mask),
                                [logits], epsilon, seed=seed),
    }
    # the three log-likelihood losses and the two encoder terms share one implementation each
    out["ce_tir"] = out["ce_mt"] = out["ce_timt"]
    out["tkd_s"], out["skd_s"] = out["tkd_i"], out["skd_i"]
    return out


def _generic(model, seed: int):
    """Float64 copy with every parameter nudged off the zero-bias init.

    Zero biases on blank image columns put ReLU pre-activations exactly on
    the kink, where one-sided differences disagree with any subgradient.
    """
    model = model.double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return model


def _model_checks(epsilon: float, seed: int, n_probe: int) -> dict[str, float]:
    cfg = ModelConfig(d_model=4, n_layers=1, n_heads=2, d_ff=8, src_vocab=6, tgt_vocab=6, max_len=16,
                      dropout=0.0, seed=seed)
    t = _toy_batch()
    student = _generic(build_model("timt", cfg), seed).eval()
    tir = freeze(_generic(build_model("tir", replace(cfg, seed=seed + 1)), seed + 1))
    mt = freeze(_generic(build_model("mt", replace(cfg, seed=seed + 2)), seed + 2))
    images = t["images"].double()
    params = [p for p in student.parameters()]

    with torch.no_grad():
        t_img = tir.encode_front(images, t["src_mask"])
        t_out = mt(t["src"], t["tgt_in"], t["src_mask"])
        mt_ids = greedy_decode(mt, t["src"], 4, t["src_mask"])
    width = max(len(r) for r in mt_ids) + 1
    sk_prefix = torch.zeros(2, width, dtype=torch.long)
    sk_gold = torch.zeros(2, width, dtype=torch.long)
    sk_mask = torch.zeros(2, width, dtype=torch.bool)
    for i, r in enumerate(mt_ids):
        sk_prefix[i, : len(r) + 1] = torch.tensor([1] + r)
        sk_gold[i, : len(r) + 1] = torch.tensor(r + [2])
        sk_mask[i, : len(r) + 1] = True

    def fwd():
        return student(images, t["tgt_in"], t["src_mask"])

    losses = {
        "ce_timt": lambda: ce_loss(fwd().dists, t["tgt_out"], t["tgt_out_mask"]),
        "tkd_i": lambda: token_kd_l2(fwd().front, t_img),
        "skd_i": lambda: sentence_kd_l2(fwd().front, t_img),
        "tkd_s": lambda: token_kd_l2(fwd().sequential, t_out.sequential),
        "skd_s": lambda: sentence_kd_l2(fwd().sequential, t_out.sequential),
        "tkd_d": lambda: decoder_token_kd(fwd().dists, t_out.dists, t["tgt_out_mask"]),
        "skd_d": lambda: decoder_sentence_kd(
            student.decoder(fwd().sequential, sk_prefix)[1], sk_gold, sk_mask),
    }
    out = {name: gradient_check(fn, params, epsilon, n_probe=n_probe, seed=seed, watch=student)
           for name, fn in losses.items()}

    for kind, inputs, prefix, gold, mask in (
        ("tir", images, t["src_in"], t["src_out"], t["src_out_mask"]),
        ("mt", t["src"], t["tgt_in"], t["tgt_out"], t["tgt_out_mask"]),
    ):
        model = _generic(build_model(kind, cfg), seed + 3).eval()
        fn = lambda m=model, x=inputs, p=prefix, g=gold, k=mask: ce_loss(m(x, p, t["src_mask"]).dists, g, k)
        out[f"ce_{kind}"] = gradient_check(
            fn, list(model.parameters()), epsilon, n_probe=n_probe, seed=seed, watch=model)
    return out


def run_gradient_checks(epsilon: float = 1e-4, seed: int = 0, n_probe: int = 4) -> dict[str, float]:
    """Max relative finite-difference error per loss, worst of the direct and end-to-end checks."""
    direct = _direct_checks(epsilon, seed)
    model = _model_checks(epsilon, seed, n_probe)
    return {name: max(direct[name], model[name]) for name in LOSS_NAMES}
