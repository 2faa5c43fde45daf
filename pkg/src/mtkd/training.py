"""Teacher pretraining, distilled student training and the experiment protocols."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .corpus import BOS, EOS, PAD, Batch, Corpus, TripleSample, iter_batches
from .evaluation import corpus_bleu
from .losses import KDWeights, LossReport, ce_loss, combined_loss, decoder_sentence_kd, \
    decoder_token_kd, sentence_kd_l2, token_kd_l2
from .models import EncoderDecoder, ModelConfig, build_model, freeze, greedy_decode, load_checkpoint, \
    save_checkpoint

log = logging.getLogger(__name__)

# ablation row order: bit pattern over (image, sequential, decoder) teachers
ABLATION_ROWS = (
    (1, "d"),
    (2, "s"),
    (3, "sd"),
    (4, "i"),
    (5, "id"),
    (6, "is"),
    (7, "isd"),
)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class IncompatibleTeacher(TrainingError, ValueError):
    """Teacher and student disagree on dimensions or vocabulary."""


class MissingTeacher(TrainingError, ValueError):
    """An active distillation term has no teacher to learn from."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0  # <= 0 disables clipping
    seed: int = 0
    kd: KDWeights = field(default_factory=KDWeights)
    deterministic: bool = True
    warm_start: bool = False  # copy the recognition teacher's image encoder into the student
    valid_limit: int = 0  # 0 uses the whole validation split for model selection

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be > 0")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")


@dataclass
class RunRecord:
    epoch: int
    losses: dict
    valid_bleu: float | None = None
    valid_accuracy: float | None = None
    seconds: float = field(default=0.0, compare=False)
    checkpoint: str | None = None

    def to_json(self) -> str:
        """Deterministic fields only; wall-clock time goes to the separate timing file."""
        d = asdict(self)
        del d["seconds"]
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainResult:
    model: EncoderDecoder
    records: list[RunRecord]
    checkpoint: Path | None = None

    @property
    def best_record(self) -> RunRecord:
        key = (lambda r: r.valid_bleu) if self.records[0].valid_bleu is not None else (lambda r: r.valid_accuracy)
        return max(self.records, key=key)


def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def param_digest(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _t(b: Batch) -> dict:
    return {k: torch.from_numpy(getattr(b, k)) for k in (
        "images", "src", "src_mask", "src_in", "src_out", "src_out_mask", "tgt_in", "tgt_out", "tgt_out_mask")}


def _model_inputs(model: EncoderDecoder, t: dict):
    if model.input_kind == "image":
        return t["images"], t["src_mask"]
    return t["src"], t["src_mask"]


def _targets(model: EncoderDecoder, t: dict):
    if model.kind == "tir":
        return t["src_in"], t["src_out"], t["src_out_mask"]
    return t["tgt_in"], t["tgt_out"], t["tgt_out_mask"]


def _optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.learning_rate,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
    )


def _step(model, opt, loss, cfg: TrainConfig, where: str):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {float(loss)} at {where}")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
    opt.step()


def _mean_reports(rows: list[dict]) -> dict:
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def _valid_samples(corpus: Corpus, cfg: TrainConfig) -> list[TripleSample]:
    v = corpus.valid
    return v[: cfg.valid_limit] if cfg.valid_limit else v


def decode_limit(corpus: Corpus) -> int:
    return corpus.spec.max_len + 1


@torch.no_grad()
def token_accuracy(model: EncoderDecoder, samples: Sequence[TripleSample], batch_size: int = 256) -> float:
    was = model.training
    model.eval()
    hit = total = 0
    for b in iter_batches(samples, batch_size):
        t = _t(b)
        x, m = _model_inputs(model, t)
        prefix, gold, mask = _targets(model, t)
        pred = model(x, prefix, m).dists.logits.argmax(-1)
        hit += int(((pred == gold) & mask).sum())
        total += int(mask.sum())
    model.train(was)
    return hit / max(total, 1)


def translate_samples(model, samples: Sequence[TripleSample], vocab, max_len: int, batch_size: int = 256) -> list[str]:
    """Greedy-decode a list of samples with ``model`` (an EncoderDecoder or a Pipeline)."""
    out: list[str] = []
    for b in iter_batches(samples, batch_size):
        t = _t(b)
        if hasattr(model, "translate_batch"):
            ids = model.translate_batch(t["images"], t["src_mask"], max_len)
        else:
            x, m = _model_inputs(model, t)
            ids = greedy_decode(model, x, max_len, m)
        out.extend(vocab.decode(seq) for seq in ids)
    return out


def bleu_on(model, samples: Sequence[TripleSample], vocab, max_len: int) -> float:
    hyps = translate_samples(model, samples, vocab, max_len)
    refs = [s.tgt for s in samples]
    return corpus_bleu(hyps, refs)


def _write_lines(path: Path | None, lines: Iterable[str]) -> None:
    if path is None:
        return
    with open(path, "w") as fh:
        for line in lines:
            fh.write(line + "\n")


def _pretrain(kind: str, corpus: Corpus, model_config: ModelConfig, cfg: TrainConfig, out_dir=None) -> TrainResult:
    if corpus is None or not corpus.train:
        raise TrainingError("corpus missing or empty")
    set_determinism(cfg.seed, cfg.deterministic)
    model = build_model(kind, replace(model_config, seed=cfg.seed))
    opt = _optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    valid = _valid_samples(corpus, cfg)
    records: list[RunRecord] = []
    step_log: list[str] = []
    best_acc, best_state = -1.0, None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        model.train()
        rows = []
        for b in iter_batches(corpus.train, cfg.batch_size, rng.permutation(len(corpus.train))):
            t = _t(b)
            x, m = _model_inputs(model, t)
            prefix, gold, mask = _targets(model, t)
            loss = ce_loss(model(x, prefix, m).dists, gold, mask)
            _step(model, opt, loss, cfg, f"{kind} epoch {epoch} step {step}")
            report = LossReport(total=loss.detach(), l_timt=loss.detach(), l_kd=torch.zeros(()))
            rows.append(report.as_floats())
            step_log.append(report.to_json(epoch=epoch, step=step, lr=cfg.learning_rate))
            step += 1
        acc = token_accuracy(model, valid)
        records.append(RunRecord(epoch, _mean_reports(rows), valid_accuracy=acc,
                                 seconds=time.perf_counter() - start))
        log.info("%s epoch %d loss %.4f valid acc %.4f", kind, epoch, records[-1].losses["total"], acc)
        if acc > best_acc:
            best_acc, best_state = acc, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return _finish(kind, model, records, step_log, out_dir)


def _finish(name: str, model, records, step_log, out_dir) -> TrainResult:
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = save_checkpoint(model, out_dir / f"{name}.ckpt")
        for r in records:
            r.checkpoint = ckpt.name
        _write_lines(out_dir / f"{name}_train_log.jsonl", step_log)
        _write_lines(out_dir / f"{name}_runs.jsonl", (r.to_json() for r in records))
        _write_lines(out_dir / f"{name}_timing.jsonl",
                     (json.dumps({"epoch": r.epoch, "seconds": r.seconds}) for r in records))
    return TrainResult(model=model, records=records, checkpoint=ckpt)


def pretrain_tir(corpus: Corpus, model_config: ModelConfig, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Recognition teacher: image -> source characters."""
    return _pretrain("tir", corpus, model_config, cfg, out_dir)


def pretrain_mt(corpus: Corpus, model_config: ModelConfig, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Translation teacher: source characters -> target characters."""
    return _pretrain("mt", corpus, model_config, cfg, out_dir)


def _load_teacher(teacher, kind: str) -> EncoderDecoder | None:
    if teacher is None:
        return None
    if isinstance(teacher, (str, Path)):
        teacher = load_checkpoint(teacher)
    if teacher.kind != kind:
        raise IncompatibleTeacher(f"expected a {kind} teacher, got {teacher.kind}")
    return freeze(teacher)


def _check_compatible(student_cfg: ModelConfig, teacher: EncoderDecoder | None) -> None:
    if teacher is None:
        return
    tc = teacher.config
    if tc.d_model != student_cfg.d_model:
        raise IncompatibleTeacher(
            f"{teacher.kind} teacher d_model={tc.d_model} differs from student d_model={student_cfg.d_model}; "
            "feature distillation needs aligned features"
        )
    if tc.src_vocab != student_cfg.src_vocab or tc.tgt_vocab != student_cfg.tgt_vocab:
        raise IncompatibleTeacher(f"{teacher.kind} teacher vocabulary sizes differ from the student's")


@torch.no_grad()
def mt_sentence_cache(mt: EncoderDecoder, samples: Sequence[TripleSample], max_len: int) -> dict[int, list[int]]:
    """Greedy translation-teacher outputs keyed by sample index; empty outputs are left empty
    (they become a lone EOS target)."""
    cache: dict[int, list[int]] = {}
    for b in iter_batches(samples, 256):
        t = _t(b)
        outs = greedy_decode(mt, t["src"], max_len, t["src_mask"])
        for idx, ids in zip(b.indices, outs):
            cache[idx] = ids[:max_len]
    return cache


def _sentence_targets(cache: dict[int, list[int]], indices: Sequence[int]):
    rows = [cache[i] for i in indices]
    width = max(len(r) for r in rows) + 1
    prefix = torch.full((len(rows), width), PAD, dtype=torch.long)
    gold = torch.full((len(rows), width), PAD, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, r in enumerate(rows):
        prefix[i, : len(r) + 1] = torch.tensor([BOS] + r)
        gold[i, : len(r) + 1] = torch.tensor(r + [EOS])
        mask[i, : len(r) + 1] = True
    return prefix, gold, mask


def student_losses(student, t: dict, weights: KDWeights, tir=None, mt=None, sentence_cache=None,
                   indices=None) -> LossReport:
    """Forward the student on one batch and assemble the combined objective.

    Teachers only run for terms that can contribute to the total.
    """
    images, mask = t["images"], t["src_mask"]
    out = student(images, t["tgt_in"], mask)
    l_timt = ce_loss(out.dists, t["tgt_out"], t["tgt_out_mask"])
    terms = {}
    sq = weights.squared
    if weights.needs("i"):
        with torch.no_grad():
            t_img = tir.encode_front(images, mask)
        if weights.active("tkd_i"):
            terms["tkd_i"] = token_kd_l2(out.front, t_img, sq)
        if weights.active("skd_i"):
            terms["skd_i"] = sentence_kd_l2(out.front, t_img, sq)
    if weights.needs("s") or weights.active("tkd_d"):
        with torch.no_grad():
            t_out = mt(t["src"], t["tgt_in"], mask)
        if weights.active("tkd_s"):
            terms["tkd_s"] = token_kd_l2(out.sequential, t_out.sequential, sq)
        if weights.active("skd_s"):
            terms["skd_s"] = sentence_kd_l2(out.sequential, t_out.sequential, sq)
        if weights.active("tkd_d"):
            terms["tkd_d"] = decoder_token_kd(out.dists, t_out.dists, t["tgt_out_mask"])
    if weights.active("skd_d"):
        prefix, gold, gmask = _sentence_targets(sentence_cache, indices)
        _, dists = student.decoder(out.sequential, prefix)
        terms["skd_d"] = decoder_sentence_kd(dists, gold, gmask)
    return combined_loss(l_timt, terms, weights)


def train_student(
    corpus: Corpus,
    tir,
    mt,
    model_config: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    name: str = "student",
) -> TrainResult:
    """Train the end-to-end student against frozen teachers under ``cfg.kd``.

    ``tir`` / ``mt`` may be models, checkpoint paths, or None when the weights
    never consult that teacher.
    """
    if corpus is None or not corpus.train:
        raise TrainingError("corpus missing or empty")
    weights = cfg.kd
    tir = _load_teacher(tir, "tir")
    mt = _load_teacher(mt, "mt")
    if weights.needs("i") and tir is None:
        raise MissingTeacher("image-encoder distillation requested but no recognition teacher given")
    if (weights.needs("s") or weights.needs("d")) and mt is None:
        raise MissingTeacher("translation-teacher distillation requested but no translation teacher given")
    _check_compatible(model_config, tir)
    _check_compatible(model_config, mt)

    set_determinism(cfg.seed, cfg.deterministic)
    max_len = decode_limit(corpus)
    # teachers are frozen, so one greedy pass serves every epoch
    cache = mt_sentence_cache(mt, corpus.train, max_len) if weights.active("skd_d") else None

    student = build_model("timt", replace(model_config, seed=cfg.seed))
    if cfg.warm_start:
        if tir is None:
            raise MissingTeacher("warm_start needs a recognition teacher")
        student.front.load_state_dict(tir.front.state_dict())
    opt = _optimizer(student, cfg)
    rng = np.random.default_rng(cfg.seed)
    valid = _valid_samples(corpus, cfg)
    records: list[RunRecord] = []
    step_log: list[str] = []
    best_bleu, best_state = -1.0, None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        student.train()
        rows = []
        for b in iter_batches(corpus.train, cfg.batch_size, rng.permutation(len(corpus.train))):
            t = _t(b)
            report = student_losses(student, t, weights, tir, mt, cache, b.indices)
            _step(student, opt, report.total, cfg, f"{name} epoch {epoch} step {step}")
            rows.append(report.as_floats())
            step_log.append(report.to_json(epoch=epoch, step=step, lr=cfg.learning_rate))
            step += 1
        student.eval()
        bleu = bleu_on(student, valid, corpus.tgt_vocab, max_len)
        records.append(RunRecord(epoch, _mean_reports(rows), valid_bleu=bleu, seconds=time.perf_counter() - start))
        log.info("%s epoch %d loss %.4f valid bleu %.2f", name, epoch, records[-1].losses["total"], bleu)
        if bleu > best_bleu:
            best_bleu, best_state = bleu, copy.deepcopy(student.state_dict())
    student.load_state_dict(best_state)
    student.eval()
    return _finish(name, student, records, step_log, out_dir)


# --- experiment protocols ---------------------------------------------------


@dataclass
class StudentRun:
    label: str
    seed: int
    weights: KDWeights
    valid_bleu: float
    test_bleu: float


def _run_key(weights: KDWeights, seed: int) -> str:
    return json.dumps({"kd": weights.to_dict(), "seed": seed}, sort_keys=True)


def run_student(corpus, tir, mt, model_config, cfg: TrainConfig, weights: KDWeights, seed: int, label: str,
                cache: dict | None = None) -> StudentRun:
    """One student run evaluated on the validation and test splits, memoised in ``cache``."""
    key = _run_key(weights, seed)
    if cache is not None and key in cache:
        hit = cache[key]
        return replace(hit, label=label)
    run_cfg = replace(cfg, kd=weights, seed=seed)
    res = train_student(corpus, tir, mt, model_config, run_cfg)
    max_len = decode_limit(corpus)
    run = StudentRun(
        label=label,
        seed=seed,
        weights=weights,
        valid_bleu=bleu_on(res.model, corpus.valid, corpus.tgt_vocab, max_len),
        test_bleu=bleu_on(res.model, corpus.test, corpus.tgt_vocab, max_len),
    )
    if cache is not None:
        cache[key] = run
    return run


@dataclass
class AblationRow:
    no: int
    teachers: str
    runs: list[StudentRun]

    @property
    def valid_bleu(self) -> float:
        return float(np.mean([r.valid_bleu for r in self.runs]))

    @property
    def test_bleu(self) -> float:
        return float(np.mean([r.test_bleu for r in self.runs]))

    def to_dict(self) -> dict:
        return {
            "no": self.no,
            "teachers": self.teachers,
            "valid_bleu": self.valid_bleu,
            "test_bleu": self.test_bleu,
            "per_seed": [{"seed": r.seed, "valid_bleu": r.valid_bleu, "test_bleu": r.test_bleu} for r in self.runs],
        }


@dataclass
class AblationTable:
    rows: list[AblationRow]
    baseline: AblationRow | None = None

    def row(self, teachers: str) -> AblationRow:
        want = "".join(sorted(teachers))
        for r in self.rows:
            if "".join(sorted(r.teachers)) == want:
                return r
        raise KeyError(teachers)


def ablate_teachers(corpus, tir, mt, model_config, cfg: TrainConfig, seeds: Sequence[int] | None = None,
                    include_baseline: bool = True, cache: dict | None = None) -> AblationTable:
    """Train a student for every non-empty teacher subset, in ablation row order (No.1 D ... No.7 ISD)."""
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    base = cfg.kd
    rows = []
    for no, teachers in ABLATION_ROWS:
        weights = replace(base,
                          lambda_i=base.lambda_i if "i" in teachers else 0.0,
                          lambda_s=base.lambda_s if "s" in teachers else 0.0,
                          lambda_d=base.lambda_d if "d" in teachers else 0.0)
        runs = [run_student(corpus, tir, mt, model_config, cfg, weights, s, teachers, cache) for s in seeds]
        rows.append(AblationRow(no, teachers, runs))
    baseline = None
    if include_baseline:
        weights = replace(base, lambda_kd=0.0)
        runs = [run_student(corpus, tir, mt, model_config, cfg, weights, s, "none", cache) for s in seeds]
        baseline = AblationRow(0, "", runs)
    return AblationTable(rows, baseline)


@dataclass
class CurvePoint:
    lambda_kd: float
    runs: list[StudentRun]

    @property
    def bleu(self) -> float:
        return float(np.mean([r.valid_bleu for r in self.runs]))

    @property
    def test_bleu(self) -> float:
        return float(np.mean([r.test_bleu for r in self.runs]))


def sweep_lambda(corpus, tir, mt, model_config, cfg: TrainConfig, grid: Sequence[float],
                 seeds: Sequence[int] | None = None, cache: dict | None = None) -> list[CurvePoint]:
    grid = [float(g) for g in grid]
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise TrainingError("lambda grid must be a non-empty subset of [0, 1]")
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    points = []
    for lam in grid:
        weights = replace(cfg.kd, lambda_kd=lam)
        runs = [run_student(corpus, tir, mt, model_config, cfg, weights, s, f"lambda={lam:g}", cache)
                for s in seeds]
        points.append(CurvePoint(lam, runs))
    return points
