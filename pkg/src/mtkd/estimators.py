"""scikit-learn style estimators over the functional training API.

    rec = TextImageRecognizer(epochs=4).fit(images, sources)
    mt = TextTranslator(epochs=4).fit(sources, targets)
    student = MTKDTranslator(recognizer=rec, translator=mt).fit(images, targets, src_texts=sources)
    student.predict(images); student.score(images, targets)

Images are float32 arrays of height 32 whose width is 8 pixels per source
character. Scores are corpus BLEU in [0, 100].
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .corpus import BOS, EOS, GLYPH_WIDTH, UNK, Corpus, CorpusSpec, TextImage, TripleSample, Vocab, \
    build_vocab, iter_batches, render_text_image
from .evaluation import Pipeline, corpus_bleu
from .losses import KDWeights
from .models import EncoderDecoder, ModelConfig, greedy_decode
from .training import TrainConfig, pretrain_mt, pretrain_tir, train_student, translate_samples
from .validation import check_aligned, check_consistent_length, check_images, check_is_fitted, check_texts


def _alphabet(*text_lists) -> str:
    return "".join(sorted({ch for texts in text_lists for t in texts for ch in t}))


def _wrap(vocab: Vocab, text: str) -> list[int]:
    return [BOS] + vocab.encode(text) + [EOS]


def _samples(images, src, tgt, vocab: Vocab) -> list[TripleSample]:
    out = []
    for i, img in enumerate(images):
        s = src[i] if src is not None else None
        # without a source string, placeholders keep the source mask as wide as the image
        src_ids = _wrap(vocab, s) if s is not None else [BOS] + [UNK] * (img.shape[1] // GLYPH_WIDTH) + [EOS]
        t = tgt[i] if tgt is not None else ""
        out.append(TripleSample(image=TextImage(img), src_ids=src_ids, tgt_ids=_wrap(vocab, t),
                                src=s or "", tgt=t, index=i))
    return out


class _Seq2SeqEstimator(BaseEstimator):
    """Shared hyper-parameters, validation split and decoding."""

    def __init__(self, alphabet=None, d_model=64, n_layers=2, n_heads=2, d_ff=128, dropout=0.1,
                 epochs=10, batch_size=32, learning_rate=3e-4, clip_norm=1.0,
                 validation_fraction=0.1, random_state=0):
        self.alphabet = alphabet
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self, vocab: Vocab) -> ModelConfig:
        return ModelConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, d_ff=self.d_ff,
                           src_vocab=len(vocab), tgt_vocab=len(vocab), dropout=self.dropout,
                           seed=self.random_state)

    def _train_config(self, kd: KDWeights | None = None) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
                           clip_norm=self.clip_norm, seed=self.random_state, kd=kd or KDWeights())

    def _split(self, samples: list[TripleSample], vocab: Vocab, max_len: int) -> Corpus:
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {self.validation_fraction}")
        n = len(samples)
        n_valid = max(1, int(round(n * self.validation_fraction)))
        if n_valid >= n:
            raise ValueError(f"need more than {n_valid} samples to hold out a validation split")
        order = np.random.default_rng(self.random_state).permutation(n)
        valid = [replace(samples[i], split="valid") for i in order[:n_valid]]
        train = [samples[i] for i in order[n_valid:]]
        spec = CorpusSpec(alphabet=self.alphabet_, min_len=1, max_len=max_len, n_train=len(train),
                          n_valid=n_valid, n_test=1, seed=self.random_state)
        return Corpus(spec=spec, vocab=vocab, train=train, valid=valid, test=valid)

    def _decode(self, samples) -> list[str]:
        return translate_samples(self.model_, samples, self.vocab_, self.max_len_)

    def score(self, X, y) -> float:
        """Corpus BLEU of ``predict(X)`` against ``y``."""
        y = check_texts(y, name="y")
        return corpus_bleu(self.predict(X), y)


class TextImageRecognizer(_Seq2SeqEstimator):
    """Recognition model: text image -> the source string written in it."""

    def fit(self, X, y):
        images = check_images(X)
        texts = check_texts(y, self.alphabet, "y")
        check_consistent_length(images, texts)
        check_aligned(images, texts)
        self.alphabet_ = self.alphabet or _alphabet(texts)
        self.vocab_ = build_vocab(self.alphabet_)
        self.max_len_ = max(len(t) for t in texts) + 1
        corpus = self._split(_samples(images, texts, None, self.vocab_), self.vocab_, self.max_len_ - 1)
        res = pretrain_tir(corpus, self._model_config(self.vocab_), self._train_config())
        self.model_: EncoderDecoder = res.model
        self.records_ = res.records
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        images = check_images(X)
        samples = _samples(images, None, None, self.vocab_)
        return [self.vocab_.decode(ids) for ids in _recognise(self.model_, samples, self.max_len_)]


def _recognise(model, samples, max_len):
    out = []
    for b in iter_batches(samples, 256):
        out.extend(greedy_decode(model, torch.from_numpy(b.images), max_len, torch.from_numpy(b.src_mask)))
    return out


class TextTranslator(_Seq2SeqEstimator):
    """Text-to-text translation model: source string -> target string."""

    def fit(self, X, y):
        src = check_texts(X, self.alphabet, "X")
        tgt = check_texts(y, self.alphabet, "y")
        check_consistent_length(src, tgt)
        self.alphabet_ = self.alphabet or _alphabet(src, tgt)
        self.vocab_ = build_vocab(self.alphabet_)
        self.max_len_ = max(len(t) for t in src + tgt) + 1
        images = [render_text_image(s).pixels for s in src]
        corpus = self._split(_samples(images, src, tgt, self.vocab_), self.vocab_, self.max_len_ - 1)
        res = pretrain_mt(corpus, self._model_config(self.vocab_), self._train_config())
        self.model_: EncoderDecoder = res.model
        self.records_ = res.records
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        src = check_texts(X, self.alphabet_, "X")
        images = [render_text_image(s).pixels for s in src]
        return self._decode(_samples(images, src, None, self.vocab_))


class MTKDTranslator(_Seq2SeqEstimator):
    """End-to-end text-image translator distilled from fitted recognition and translation teachers.

    ``teachers`` names the active teachers: ``i`` (recognition image encoder),
    ``s`` (translation sequential encoder), ``d`` (translation decoder).
    """

    def __init__(self, recognizer=None, translator=None, teachers="isd", lambda_kd=0.8, lambda_i=1.0,
                 lambda_s=1.0, lambda_d=1.0, alphabet=None, d_model=64, n_layers=2, n_heads=2, d_ff=128,
                 dropout=0.1, epochs=10, batch_size=32, learning_rate=3e-4, clip_norm=1.0,
                 validation_fraction=0.1, random_state=0):
        super().__init__(alphabet=alphabet, d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_ff=d_ff,
                         dropout=dropout, epochs=epochs, batch_size=batch_size, learning_rate=learning_rate,
                         clip_norm=clip_norm, validation_fraction=validation_fraction,
                         random_state=random_state)
        self.recognizer = recognizer
        self.translator = translator
        self.teachers = teachers
        self.lambda_kd = lambda_kd
        self.lambda_i = lambda_i
        self.lambda_s = lambda_s
        self.lambda_d = lambda_d

    def _weights(self) -> KDWeights:
        on = set(self.teachers or "")
        return KDWeights(lambda_kd=self.lambda_kd,
                         lambda_i=self.lambda_i if "i" in on else 0.0,
                         lambda_s=self.lambda_s if "s" in on else 0.0,
                         lambda_d=self.lambda_d if "d" in on else 0.0)

    def _teacher(self, est, needed: bool, what: str):
        if not needed:
            return None
        if est is None:
            raise ValueError(f"the {what} teacher is active but none was given")
        check_is_fitted(est, "model_")
        return est.model_

    def fit(self, X, y, src_texts=None):
        weights = self._weights()
        images = check_images(X)
        tgt = check_texts(y, None, "y")
        needs_src = weights.needs("s") or weights.needs("d")
        if src_texts is None and needs_src:
            raise ValueError("src_texts are required when a translation teacher is active")
        src = check_texts(src_texts, None, "src_texts") if src_texts is not None else None
        check_consistent_length(images, tgt, *([src] if src is not None else []))
        if src is not None:
            check_aligned(images, src)
        tir = self._teacher(self.recognizer, weights.needs("i"), "recognition")
        mt = self._teacher(self.translator, needs_src, "translation")
        alphabets = {e.alphabet_ for e, m in ((self.recognizer, tir), (self.translator, mt)) if m is not None}
        if len(alphabets) > 1:
            raise ValueError("teachers were fitted on different alphabets")
        self.alphabet_ = alphabets.pop() if alphabets else (self.alphabet or _alphabet(tgt, src or []))
        check_texts(tgt, self.alphabet_, "y")
        if src is not None:
            check_texts(src, self.alphabet_, "src_texts")
        self.vocab_ = build_vocab(self.alphabet_)
        self.max_len_ = max(len(t) for t in tgt) + 1
        corpus = self._split(_samples(images, src, tgt, self.vocab_), self.vocab_, self.max_len_ - 1)
        res = train_student(corpus, tir, mt, self._model_config(self.vocab_), self._train_config(weights))
        self.model_: EncoderDecoder = res.model
        self.records_ = res.records
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        return self._decode(_samples(check_images(X), None, None, self.vocab_))


def pipeline_predict(recognizer: TextImageRecognizer, translator: TextTranslator, X) -> list[str]:
    """Recognise then translate, as two separate fitted models."""
    check_is_fitted(recognizer, "model_")
    check_is_fitted(translator, "model_")
    samples = _samples(check_images(X), None, None, translator.vocab_)
    return translate_samples(Pipeline(recognizer.model_, translator.model_), samples, translator.vocab_,
                             translator.max_len_)
