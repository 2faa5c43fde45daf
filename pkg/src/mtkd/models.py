"""Encoder-decoder networks shared by the end-to-end student and both teachers.

All three models are an input encoder (strided conv stack or token embedding),
a transformer sequential encoder and a transformer decoder with an output
projection. ``kind`` picks the combination:

    timt  image -> target text   (student)
    tir   image -> source text   (recognition teacher)
    mt    source text -> target  (translation teacher)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import BOS, EOS, IMAGE_CHANNELS, IMAGE_HEIGHT, PAD

DOWNSAMPLE = 8
CHECKPOINT_MAGIC = b"MTKDCKP1"
KINDS = {
    "timt": ("image", "tgt"),
    "tir": ("image", "src"),
    "mt": ("text", "tgt"),
}


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    src_vocab: int = 20
    tgt_vocab: int = 20
    max_len: int = 64
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "src_vocab", "tgt_vocab", "max_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must lie in [0, 1)")


@dataclass
class FeatureSeq:
    """Batched feature sequences, ``data`` is (B, L, d) and ``mask`` (B, L) marks real rows."""

    data: torch.Tensor
    mask: torch.Tensor

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def detach(self) -> "FeatureSeq":
        return FeatureSeq(self.data.detach(), self.mask)


@dataclass
class StepDistributions:
    logits: torch.Tensor  # (B, z, V)

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=-1)

    @property
    def log_probs(self) -> torch.Tensor:
        return torch.log_softmax(self.logits, dim=-1)

    @classmethod
    def from_probs(cls, probs) -> "StepDistributions":
        probs = torch.as_tensor(probs)
        if probs.dim() == 2:
            probs = probs[None]
        return cls(torch.log(probs))


@dataclass
class ModelOutput:
    front: FeatureSeq  # image features, or text embeddings for the MT model
    sequential: FeatureSeq
    decoder_states: torch.Tensor
    dists: StepDistributions


def sinusoidal_positions(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe.float()


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(self, x, memory, key_mask=None, causal=False):
        b, lq, d = x.shape
        lk = memory.shape[1]
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        allowed = torch.ones(b, 1, lq, lk, dtype=torch.bool, device=x.device)
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        if causal:
            allowed = allowed & torch.ones(lq, lk, dtype=torch.bool, device=x.device).tril()
        scores = scores.masked_fill(~allowed, float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.up = nn.Linear(d_model, d_ff)
        self.down = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.down(self.drop(self.act(self.up(x))))


class EncoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, key_mask=mask))
        return x + self.drop(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm3 = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, y, memory, memory_mask):
        h = self.norm1(y)
        y = y + self.drop(self.self_attn(h, h, causal=True))
        y = y + self.drop(self.cross_attn(self.norm2(y), memory, key_mask=memory_mask))
        return y + self.drop(self.ff(self.norm3(y)))


def infer_image_mask(images: torch.Tensor) -> torch.Tensor:
    """Feature positions up to the last glyph-width block holding any ink."""
    b, h, w, c = images.shape
    ink = images.reshape(b, h, w // DOWNSAMPLE, DOWNSAMPLE, c).ne(0).any(dim=4).any(dim=3).any(dim=1)
    tail = torch.flip(torch.cummax(torch.flip(ink.to(torch.int64), [1]), dim=1).values, [1])
    return tail.bool()


class ImageEncoder(nn.Module):
    """Three stride-2 conv blocks: width shrinks x8, height 32 -> 4 then averaged away."""

    def __init__(self, d_model: int, channels: tuple[int, int] = (32, 64)):
        super().__init__()
        c1, c2 = channels
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(IMAGE_CHANNELS, c1, 3, stride=2, padding=1),
                nn.Conv2d(c1, c2, 3, stride=2, padding=1),
                nn.Conv2d(c2, d_model, 3, stride=2, padding=1),
            ]
        )
        self.norm = nn.LayerNorm(d_model)
        self.act = nn.ReLU()

    def forward(self, images: torch.Tensor, mask: torch.Tensor | None = None) -> FeatureSeq:
        if images.dim() != 4:
            raise ModelError(f"expected (B, H, W, C) images, got shape {tuple(images.shape)}")
        b, h, w, c = images.shape
        if h != IMAGE_HEIGHT or c != IMAGE_CHANNELS:
            raise ModelError(f"images must be {IMAGE_HEIGHT} px high with {IMAGE_CHANNELS} channel, got H={h} C={c}")
        if w % DOWNSAMPLE:
            raise ModelError(f"image width {w} not divisible by {DOWNSAMPLE}")
        if mask is None:
            mask = infer_image_mask(images)
        # keep padded columns at exactly zero so a sample's features do not depend on batch padding
        cols = mask.repeat_interleave(DOWNSAMPLE, dim=1).to(images.dtype)
        x = images.permute(0, 3, 1, 2)
        for conv in self.convs:
            x = self.act(conv(x))
            cols = cols[:, ::2]
            x = x * cols[:, None, None, :]
        x = x.mean(dim=2).transpose(1, 2)
        x = self.norm(x) * mask[..., None].to(x.dtype)
        return FeatureSeq(x, mask)


class TextEncoder(nn.Module):
    def __init__(self, vocab: int, d_model: int):
        super().__init__()
        self.embed = nn.Embedding(vocab, d_model)
        self.scale = math.sqrt(d_model)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None) -> FeatureSeq:
        if ids.numel() and (int(ids.max()) >= self.embed.num_embeddings or int(ids.min()) < 0):
            raise ModelError("token id out of range")
        if mask is None:
            mask = ids.ne(PAD)
        x = self.embed(ids) * self.scale
        return FeatureSeq(x * mask[..., None].to(x.dtype), mask)


class SequentialEncoder(nn.Module):
    def __init__(self, d_model, n_heads, d_ff, n_layers, dropout, max_len=512, use_positions=True):
        super().__init__()
        self.d_model = d_model
        self.use_positions = use_positions
        self.register_buffer("pe", sinusoidal_positions(max_len, d_model), persistent=False)
        self.drop = nn.Dropout(dropout)
        self.layers = nn.ModuleList([EncoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_layers)])
        self.norm = nn.LayerNorm(d_model)

    def forward(self, features: FeatureSeq) -> FeatureSeq:
        x, mask = features.data, features.mask
        if x.shape[-1] != self.d_model:
            raise ModelError(f"expected feature dim {self.d_model}, got {x.shape[-1]}")
        if self.use_positions:
            x = x + self.pe[: x.shape[1]].to(x.dtype)
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x, mask)
        x = self.norm(x) * mask[..., None].to(x.dtype)
        return FeatureSeq(x, mask)


class Decoder(nn.Module):
    def __init__(self, vocab, d_model, n_heads, d_ff, n_layers, dropout, max_len=512):
        super().__init__()
        self.vocab = vocab
        self.embed = nn.Embedding(vocab, d_model)
        self.scale = math.sqrt(d_model)
        self.register_buffer("pe", sinusoidal_positions(max_len, d_model), persistent=False)
        self.drop = nn.Dropout(dropout)
        self.layers = nn.ModuleList([DecoderLayer(d_model, n_heads, d_ff, dropout) for _ in range(n_layers)])
        self.norm = nn.LayerNorm(d_model)
        self.out = nn.Linear(d_model, vocab, bias=False)

    def forward(self, memory: FeatureSeq, prefix: torch.Tensor) -> tuple[torch.Tensor, StepDistributions]:
        if prefix.dim() != 2 or prefix.shape[1] == 0:
            raise ModelError("decoder prefix must be a non-empty (B, z) id tensor")
        if int(prefix.max()) >= self.vocab or int(prefix.min()) < 0:
            raise ModelError("token id out of range")
        y = self.embed(prefix) * self.scale + self.pe[: prefix.shape[1]].to(memory.data.dtype)
        y = self.drop(y)
        for layer in self.layers:
            y = layer(y, memory.data, memory.mask)
        states = self.norm(y)
        return states, StepDistributions(self.out(states))


def _init_parameters(module: nn.Module, seed: int) -> None:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
            if isinstance(owner, nn.LayerNorm):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))


class EncoderDecoder(nn.Module):
    def __init__(self, kind: str, config: ModelConfig):
        super().__init__()
        if kind not in KINDS:
            raise ModelError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.config = config
        front, out_side = KINDS[kind]
        c = config
        if front == "image":
            self.front = ImageEncoder(c.d_model)
        else:
            self.front = TextEncoder(c.src_vocab, c.d_model)
        self.encoder = SequentialEncoder(c.d_model, c.n_heads, c.d_ff, c.n_layers, c.dropout, c.max_len)
        out_vocab = c.tgt_vocab if out_side == "tgt" else c.src_vocab
        self.decoder = Decoder(out_vocab, c.d_model, c.n_heads, c.d_ff, c.n_layers, c.dropout, c.max_len)
        _init_parameters(self, c.seed)

    @property
    def input_kind(self) -> str:
        return KINDS[self.kind][0]

    def encode_front(self, inputs: torch.Tensor, mask: torch.Tensor | None = None) -> FeatureSeq:
        return self.front(inputs, mask)

    def encode(self, inputs, mask=None) -> tuple[FeatureSeq, FeatureSeq]:
        front = self.encode_front(inputs, mask)
        return front, self.encoder(front)

    def decode_teacher_forced(self, memory: FeatureSeq, prefix: torch.Tensor) -> StepDistributions:
        return self.decoder(memory, prefix)[1]

    def forward(self, inputs, prefix, mask=None) -> ModelOutput:
        front, seq = self.encode(inputs, mask)
        states, dists = self.decoder(seq, prefix)
        return ModelOutput(front=front, sequential=seq, decoder_states=states, dists=dists)


def build_model(kind: str, config: ModelConfig) -> EncoderDecoder:
    return EncoderDecoder(kind, config)


def image_encode(model: EncoderDecoder, images, mask=None) -> FeatureSeq:
    if model.input_kind != "image":
        raise ModelError(f"{model.kind} model has no image encoder")
    return model.encode_front(torch.as_tensor(images), mask)


def text_encode(model: EncoderDecoder, ids, mask=None) -> FeatureSeq:
    if model.input_kind != "text":
        raise ModelError(f"{model.kind} model has no text encoder")
    return model.encode_front(torch.as_tensor(ids), mask)


def sequential_encode(model: EncoderDecoder, features: FeatureSeq) -> FeatureSeq:
    return model.encoder(features)


def decode_teacher_forced(model: EncoderDecoder, memory: FeatureSeq, prefix) -> StepDistributions:
    prefix = torch.as_tensor(prefix)
    if prefix.dim() == 1:
        prefix = prefix[None]
    if prefix.shape[-1] == 0:
        raise ModelError("empty decoder prefix")
    if not bool((prefix[:, 0] == BOS).all()):
        raise ModelError("decoder prefix must start with BOS")
    return model.decode_teacher_forced(memory, prefix)


@torch.no_grad()
def greedy_decode(model: EncoderDecoder, inputs, max_len: int, mask=None) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` steps; returned ids exclude BOS and EOS.

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest id.
    """
    if max_len < 1:
        raise ModelError("max_len must be >= 1")
    was_training = model.training
    model.eval()
    try:
        _, memory = model.encode(torch.as_tensor(inputs), mask)
        b = memory.data.shape[0]
        prefix = torch.full((b, 1), BOS, dtype=torch.long)
        finished = torch.zeros(b, dtype=torch.bool)
        out: list[list[int]] = [[] for _ in range(b)]
        for _ in range(max_len):
            logits = model.decode_teacher_forced(memory, prefix).logits[:, -1]
            nxt = logits.argmax(dim=-1)
            for i in range(b):
                if finished[i]:
                    continue
                tok = int(nxt[i])
                if tok == EOS:
                    finished[i] = True
                else:
                    out[i].append(tok)
            if bool(finished.all()):
                break
            nxt = torch.where(finished, torch.full_like(nxt, PAD), nxt)
            prefix = torch.cat([prefix, nxt[:, None]], dim=1)
        return out
    finally:
        model.train(was_training)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --- checkpoints ----------------------------------------------------------
#
# layout: 8-byte magic "MTKDCKP1", u32 little-endian header length, UTF-8 JSON
# header {"kind", "config", "params": [{"name", "shape"}, ...]}, then each
# parameter as little-endian float32, row-major, in header order.


def save_checkpoint(model: EncoderDecoder, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = list(model.named_parameters())
    header = {
        "kind": model.kind,
        "config": asdict(model.config),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(p.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> EncoderDecoder:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    model = build_model(header["kind"], ModelConfig(**header["config"]))
    expected = {n: p for n, p in model.named_parameters()}
    names = [rec["name"] for rec in header["params"]]
    if sorted(names) != sorted(expected):
        missing = set(expected) - set(names)
        extra = set(names) - set(expected)
        raise CheckpointError(f"{path}: parameter names differ (missing={sorted(missing)}, unexpected={sorted(extra)})")
    offset = 12 + hlen
    with torch.no_grad():
        for rec in header["params"]:
            p = expected[rec["name"]]
            if list(p.shape) != rec["shape"]:
                raise CheckpointError(f"{path}: {rec['name']} has shape {rec['shape']}, expected {list(p.shape)}")
            n = p.numel() * 4
            if offset + n > len(data):
                raise CheckpointError(f"{path}: truncated at {rec['name']}")
            arr = np.frombuffer(data[offset : offset + n], dtype="<f4").reshape(rec["shape"])
            p.copy_(torch.from_numpy(arr.astype(np.float32)))
            offset += n
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return model


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model
