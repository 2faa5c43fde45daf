"""Corpus BLEU, pipeline-vs-end-to-end comparison and report files."""

from __future__ import annotations

import json
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch

from .corpus import UNK, batch
from .models import EncoderDecoder, count_params, greedy_decode


class EvaluationError(ValueError):
    pass


class EmptyReport(EvaluationError):
    pass


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_order: int = 4) -> float:
    """Corpus-level BLEU-4 on token sequences (a plain string counts as a sequence of characters).

    Modified n-gram precisions are pooled over the corpus. For n >= 2 a zero
    match count is smoothed to 1 / (count + 1); a zero unigram match gives 0.
    """
    if len(hypotheses) != len(references):
        raise EvaluationError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise EvaluationError("empty corpus")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        if not ref:
            raise EvaluationError("empty reference")
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_order):
        m, t = matches[n], totals[n]
        if m == 0:
            m, t = 1, t + 1
        log_p += math.log(m / t) / max_order
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return 100.0 * bp * math.exp(log_p)


class Pipeline:
    """Recognition teacher followed by translation teacher, run as two decoders."""

    kind = "pipeline"

    def __init__(self, tir: EncoderDecoder, mt: EncoderDecoder):
        self.tir = tir
        self.mt = mt

    def parameters(self):
        yield from self.tir.parameters()
        yield from self.mt.parameters()

    @torch.no_grad()
    def translate_batch(self, images, mask, max_len: int) -> list[list[int]]:
        recognised = greedy_decode(self.tir, images, max_len, mask)
        # an empty recognition still needs one position for the translation encoder
        rows = [r if r else [UNK] for r in recognised]
        width = max(len(r) for r in rows)
        ids = torch.zeros((len(rows), width), dtype=torch.long)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r)
        return greedy_decode(self.mt, ids, max_len, ids.ne(0))


@dataclass
class EvalReport:
    model: str
    split: str
    bleu: float
    n_params: int
    latency_ms_mean: float
    latency_ms_median: float
    latency_samples: int

    def __post_init__(self):
        if not 0.0 <= self.bleu <= 100.0:
            raise EvaluationError(f"bleu {self.bleu} outside [0, 100]")
        if self.n_params <= 0:
            raise EvaluationError("n_params must be positive")


def _decode_one(model, sample, max_len):
    b = batch([sample])
    images = torch.from_numpy(b.images)
    mask = torch.from_numpy(b.src_mask)
    if isinstance(model, Pipeline):
        return model.translate_batch(images, mask, max_len)[0]
    return greedy_decode(model, images, max_len, mask)[0]


def measure_latency(model, samples, max_len: int, warmup: int = 10, n_timed: int = 100) -> list[float]:
    """Per-sentence decode time in ms, batch size 1, single thread. Only decoding is timed."""
    if len(samples) < warmup + n_timed:
        raise EvaluationError(f"need at least {warmup + n_timed} samples for latency, got {len(samples)}")
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for s in samples[:warmup]:
            _decode_one(model, s, max_len)
        times = []
        for s in samples[warmup : warmup + n_timed]:
            b = batch([s])
            images = torch.from_numpy(b.images)
            mask = torch.from_numpy(b.src_mask)
            start = time.perf_counter()
            if isinstance(model, Pipeline):
                model.translate_batch(images, mask, max_len)
            else:
                greedy_decode(model, images, max_len, mask)
            times.append((time.perf_counter() - start) * 1000.0)
        return times
    finally:
        torch.set_num_threads(threads)


def evaluate_model(model, samples, vocab, max_len: int, split: str = "test", name: str | None = None,
                   warmup: int = 10, n_timed: int = 100) -> EvalReport:
    from .training import translate_samples

    if isinstance(model, EncoderDecoder):
        model.eval()
    hyps = translate_samples(model, samples, vocab, max_len)
    bleu = corpus_bleu(hyps, [s.tgt for s in samples])
    times = measure_latency(model, samples, max_len, warmup, n_timed)
    return EvalReport(
        model=name or getattr(model, "kind", "model"),
        split=split,
        bleu=bleu,
        n_params=count_params(model),
        latency_ms_mean=statistics.fmean(times),
        latency_ms_median=statistics.median(times),
        latency_samples=len(times),
    )


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def emit_report(out_dir, reports: Sequence[EvalReport], curve=None, ablation=None) -> dict[str, Path]:
    """Write ``report.json``, ``summary.txt`` and, given a curve, ``lambda_curve.csv``.

    ``curve`` is a sequence of ``(lambda_kd, bleu)`` pairs; ``ablation`` a
    sequence of row dicts with ``no``, ``teachers``, ``valid_bleu``, ``test_bleu``.
    """
    if not reports:
        raise EmptyReport("at least one evaluation report is required")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise EvaluationError(f"cannot create {out_dir}: {exc}") from exc
    curve = [(float(lam), float(b)) for lam, b in (curve or [])]
    ablation = list(ablation or [])
    doc = {
        "reports": [asdict(r) for r in reports],
        "ablation": ablation,
        "lambda_curve": [{"lambda_kd": lam, "bleu": b} for lam, b in curve],
    }
    paths = {"report": out_dir / "report.json", "summary": out_dir / "summary.txt"}
    paths["report"].write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")

    lines = ["model       split   bleu    params   latency_ms(mean/median)"]
    for r in reports:
        lines.append(
            f"{r.model:<11} {r.split:<7} {_fmt(r.bleu):>6} {r.n_params:>9} "
            f"{_fmt(r.latency_ms_mean)}/{_fmt(r.latency_ms_median)} (n={r.latency_samples})"
        )
    if ablation:
        lines += ["", "no  teachers  valid_bleu  test_bleu"]
        for row in ablation:
            lines.append(f"{row['no']:<3} {row['teachers'].upper():<9} {_fmt(row['valid_bleu']):>10} "
                         f"{_fmt(row['test_bleu']):>10}")
    if curve:
        lines += ["", "lambda_kd  bleu"]
        lines += [f"{lam:<10g} {_fmt(b)}" for lam, b in curve]
    paths["summary"].write_text("\n".join(lines) + "\n")

    if curve:
        paths["curve"] = out_dir / "lambda_curve.csv"
        body = "lambda_kd,bleu\n" + "".join(f"{lam!r},{b!r}\n" for lam, b in curve)
        paths["curve"].write_text(body)
    return paths
