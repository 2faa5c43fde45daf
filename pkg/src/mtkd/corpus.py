"""Synthetic triple-aligned corpus: source strings, rendered images, toy translations.

Every sample is a function of ``(seed, split, index)`` only, so generation is
order independent and can be parallelised per sample.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

IMAGE_HEIGHT = 32
IMAGE_CHANNELS = 1
GLYPH_WIDTH = 8
IMAGE_MAGIC = b"MTKDIMG1"
GLYPH_SEED = 0  # one fixed "font" shared by every corpus
SPLITS = ("train", "valid", "test")
_SPLIT_CODES = {"train": 0, "valid": 1, "test": 2}


class CorpusError(ValueError):
    """Base class for corpus validation errors."""


class EmptyAlphabet(CorpusError):
    pass


class DuplicateCharacter(CorpusError):
    pass


class UnknownCharacter(CorpusError):
    pass


class EmptyInput(CorpusError):
    pass


@dataclass(frozen=True)
class Vocab:
    id_of: dict
    token_of: dict

    @property
    def size(self) -> int:
        return len(self.id_of)

    def __len__(self) -> int:
        return len(self.id_of)

    def encode(self, text: str) -> list[int]:
        try:
            return [self.id_of[ch] for ch in text]
        except KeyError as exc:
            raise UnknownCharacter(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        """Map ids back to text, dropping special tokens and stopping at EOS."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i < len(SPECIAL_TOKENS):
                continue
            out.append(self.token_of[i])
        return "".join(out)


def build_vocab(alphabet: Sequence[str]) -> Vocab:
    """Specials take ids 0..3, alphabet characters follow in the given order."""
    alphabet = list(alphabet)
    if not alphabet:
        raise EmptyAlphabet("alphabet must contain at least one character")
    if len(set(alphabet)) != len(alphabet):
        raise DuplicateCharacter(f"duplicate characters in alphabet {''.join(alphabet)!r}")
    tokens = list(SPECIAL_TOKENS) + alphabet
    id_of = {tok: i for i, tok in enumerate(tokens)}
    token_of = {i: tok for i, tok in enumerate(tokens)}
    return Vocab(id_of=id_of, token_of=token_of)


@dataclass(frozen=True)
class CorpusSpec:
    alphabet: str = "abcdefghijklmnop"
    min_len: int = 3
    max_len: int = 8
    n_train: int = 5000
    n_valid: int = 500
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.alphabet:
            raise EmptyAlphabet("alphabet must contain at least one character")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise DuplicateCharacter(f"duplicate characters in alphabet {self.alphabet!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise CorpusError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        for name in ("n_train", "n_valid", "n_test"):
            if getattr(self, name) <= 0:
                raise CorpusError(f"{name} must be positive")

    def count(self, split: str) -> int:
        return getattr(self, f"n_{split}")


def translate_oracle(src: str, spec: CorpusSpec) -> str:
    """Shift every character half-way round the alphabet, then reverse the string."""
    alphabet = spec.alphabet
    n = len(alphabet)
    shift = n // 2
    pos = {ch: k for k, ch in enumerate(alphabet)}
    out = []
    for ch in src:
        if ch not in pos:
            raise UnknownCharacter(f"character {ch!r} not in alphabet")
        out.append(alphabet[(pos[ch] + shift) % n])
    return "".join(reversed(out))


@dataclass
class TextImage:
    pixels: np.ndarray  # (H, W, C) float32 in [0, 1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def _char_seed(char: str, global_seed: int) -> int:
    digest = hashlib.sha256(f"{global_seed}\x00{char}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@lru_cache(maxsize=4096)
def _glyph(char: str, glyph_width: int, global_seed: int) -> bytes:
    rng = np.random.default_rng(_char_seed(char, global_seed))
    while True:
        bits = rng.random((IMAGE_HEIGHT, glyph_width)) < 0.5
        # an all-zero column block would be indistinguishable from padding
        if bits.any():
            return np.packbits(bits).tobytes()


def glyph_bitmap(char: str, glyph_width: int = GLYPH_WIDTH, global_seed: int = GLYPH_SEED) -> np.ndarray:
    """The fixed binary pattern for one character, as a float32 (32, glyph_width) array."""
    if len(char) != 1:
        raise UnknownCharacter(f"glyphs exist for single characters only, got {char!r}")
    packed = np.frombuffer(_glyph(char, glyph_width, global_seed), dtype=np.uint8)
    bits = np.unpackbits(packed)[: IMAGE_HEIGHT * glyph_width]
    return bits.reshape(IMAGE_HEIGHT, glyph_width).astype(np.float32)


def render_text_image(
    src: str,
    glyph_width: int = GLYPH_WIDTH,
    alphabet: str | None = None,
    global_seed: int = GLYPH_SEED,
) -> TextImage:
    if not src:
        raise EmptyInput("cannot render an empty string")
    if alphabet is not None:
        for ch in src:
            if ch not in alphabet:
                raise UnknownCharacter(f"no glyph for character {ch!r}")
    columns = [glyph_bitmap(ch, glyph_width, global_seed) for ch in src]
    pixels = np.concatenate(columns, axis=1)[:, :, None]
    return TextImage(pixels=np.ascontiguousarray(pixels, dtype=np.float32))


@dataclass
class TripleSample:
    image: TextImage
    src_ids: list[int]  # BOS + chars + EOS
    tgt_ids: list[int]  # BOS + chars + EOS
    src: str = ""
    tgt: str = ""
    split: str = "train"
    index: int = 0


def _wrap(ids: list[int]) -> list[int]:
    return [BOS] + ids + [EOS]


def make_sample(src: str, spec: CorpusSpec, vocab: Vocab, split: str = "train", index: int = 0) -> TripleSample:
    tgt = translate_oracle(src, spec)
    return TripleSample(
        image=render_text_image(src, alphabet=spec.alphabet),
        src_ids=_wrap(vocab.encode(src)),
        tgt_ids=_wrap(vocab.encode(tgt)),
        src=src,
        tgt=tgt,
        split=split,
        index=index,
    )


def sample_string(spec: CorpusSpec, split: str, index: int) -> str:
    rng = np.random.default_rng([spec.seed, _SPLIT_CODES[split], index])
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    picks = rng.integers(0, len(spec.alphabet), size=length)
    return "".join(spec.alphabet[k] for k in picks)


@dataclass
class Corpus:
    spec: CorpusSpec
    vocab: Vocab
    train: list[TripleSample] = field(default_factory=list)
    valid: list[TripleSample] = field(default_factory=list)
    test: list[TripleSample] = field(default_factory=list)

    @property
    def src_vocab(self) -> Vocab:
        return self.vocab

    @property
    def tgt_vocab(self) -> Vocab:
        # the toy translation permutes the same character set
        return self.vocab

    def split(self, name: str) -> list[TripleSample]:
        if name not in SPLITS:
            raise CorpusError(f"unknown split {name!r}")
        return getattr(self, name)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    vocab = build_vocab(spec.alphabet)
    corpus = Corpus(spec=spec, vocab=vocab)
    for split in SPLITS:
        samples = [
            make_sample(sample_string(spec, split, i), spec, vocab, split, i)
            for i in range(spec.count(split))
        ]
        setattr(corpus, split, samples)
    return corpus


@dataclass
class Batch:
    """Padded arrays for one minibatch.

    ``src`` holds raw character ids (no BOS/EOS) so that its length equals the
    image feature length after the encoder's fixed x8 width reduction.
    """

    images: np.ndarray  # (B, H, W, C)
    src: np.ndarray  # (B, L) raw characters, PAD-filled
    src_mask: np.ndarray  # (B, L)
    src_in: np.ndarray  # (B, L+1) BOS + chars, for the recognition decoder
    src_out: np.ndarray  # (B, L+1) chars + EOS
    src_out_mask: np.ndarray
    tgt_in: np.ndarray  # (B, T+1) BOS + chars
    tgt_out: np.ndarray  # (B, T+1) chars + EOS
    tgt_out_mask: np.ndarray
    indices: list[int] = field(default_factory=list)

    @property
    def image_mask(self) -> np.ndarray:
        return self.src_mask

    def __len__(self) -> int:
        return self.images.shape[0]


def _pad(rows: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return out, mask


def batch(samples: Sequence[TripleSample], pad_id: int = PAD) -> Batch:
    if len(samples) == 0:
        raise EmptyInput("cannot batch an empty sample list")
    max_w = max(s.image.width for s in samples)
    first = samples[0].image
    images = np.zeros((len(samples), first.height, max_w, first.channels), dtype=np.float32)
    for i, s in enumerate(samples):
        images[i, :, : s.image.width, :] = s.image.pixels

    raw_src = [s.src_ids[1:-1] for s in samples]
    raw_tgt = [s.tgt_ids[1:-1] for s in samples]
    src, src_mask = _pad(raw_src, pad_id)
    src_in, _ = _pad([[BOS] + r for r in raw_src], pad_id)
    src_out, src_out_mask = _pad([r + [EOS] for r in raw_src], pad_id)
    tgt_in, _ = _pad([[BOS] + r for r in raw_tgt], pad_id)
    tgt_out, tgt_out_mask = _pad([r + [EOS] for r in raw_tgt], pad_id)
    return Batch(
        images=images,
        src=src,
        src_mask=src_mask,
        src_in=src_in,
        src_out=src_out,
        src_out_mask=src_out_mask,
        tgt_in=tgt_in,
        tgt_out=tgt_out,
        tgt_out_mask=tgt_out_mask,
        indices=[s.index for s in samples],
    )


def iter_batches(samples: Sequence[TripleSample], batch_size: int, order: Sequence[int] | None = None):
    if batch_size < 1:
        raise CorpusError("batch_size must be >= 1")
    order = range(len(samples)) if order is None else order
    order = list(order)
    for start in range(0, len(order), batch_size):
        yield batch([samples[i] for i in order[start : start + batch_size]])


# --- on-disk format -------------------------------------------------------


def write_image(path: str | Path, image: TextImage) -> None:
    """Raw image: magic, then H, W, C as little-endian u32, then float32 pixels row-major."""
    h, w, c = image.pixels.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        fh.write(struct.pack("<III", h, w, c))
        fh.write(np.ascontiguousarray(image.pixels, dtype="<f4").tobytes())


def read_image(path: str | Path) -> TextImage:
    data = Path(path).read_bytes()
    if data[:8] != IMAGE_MAGIC:
        raise CorpusError(f"{path}: bad image magic")
    h, w, c = struct.unpack("<III", data[8:20])
    expected = 20 + 4 * h * w * c
    if len(data) != expected:
        raise CorpusError(f"{path}: expected {expected} bytes, found {len(data)}")
    pixels = np.frombuffer(data[20:], dtype="<f4").reshape(h, w, c).astype(np.float32)
    return TextImage(pixels=pixels)


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    spec_record = asdict(corpus.spec)
    (directory / "corpus_spec.json").write_text(json.dumps(spec_record, sort_keys=True, indent=2) + "\n")
    with open(directory / "manifest.jsonl", "w") as fh:
        for split in SPLITS:
            for s in corpus.split(split):
                name = f"images/{split}_{s.index:06d}.img"
                write_image(directory / name, s.image)
                record = {"split": split, "index": s.index, "src": s.src, "tgt": s.tgt, "image": name}
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return directory


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl in {directory}")
    spec = CorpusSpec(**json.loads((directory / "corpus_spec.json").read_text()))
    vocab = build_vocab(spec.alphabet)
    corpus = Corpus(spec=spec, vocab=vocab)
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            sample = TripleSample(
                image=read_image(directory / rec["image"]),
                src_ids=_wrap(vocab.encode(rec["src"])),
                tgt_ids=_wrap(vocab.encode(rec["tgt"])),
                src=rec["src"],
                tgt=rec["tgt"],
                split=rec["split"],
                index=rec["index"],
            )
            corpus.split(rec["split"]).append(sample)
    return corpus
