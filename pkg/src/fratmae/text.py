"""Textual metadata prompts, a word-level tokenizer, a small text encoder and
the InfoNCE alignment loss between PET and text CLS embeddings."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Block, init_params

TAGS = ("<tracer>", "<diagnosis>", "<age>", "<sex>")
PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS) + TAGS

_PROMPT_RE = re.compile(r"^<tracer> (.+) <diagnosis> (.+) <age> (\d+) <sex> (M|F)$")


@dataclass(frozen=True)
class TextMetadata:
    tracer: str
    diagnosis: str
    age: int
    sex: str

    def __post_init__(self):
        if not self.tracer.strip() or not self.diagnosis.strip():
            raise ValueError("tracer and diagnosis must be non-empty")
        for value in (self.tracer, self.diagnosis):
            if any(tag in value for tag in TAGS) or value != value.strip():
                raise ValueError(f"metadata field {value!r} cannot be formatted unambiguously")
        if int(self.age) != self.age or self.age < 0:
            raise ValueError(f"age must be a non-negative integer, got {self.age!r}")
        if self.sex not in ("M", "F"):
            raise ValueError(f"sex must be 'M' or 'F', got {self.sex!r}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "TextMetadata":
        return cls(tracer=d["tracer"], diagnosis=d["diagnosis"], age=int(d["age"]), sex=d["sex"])


def format_prompt(meta: TextMetadata) -> str:
    return f"<tracer> {meta.tracer} <diagnosis> {meta.diagnosis} <age> {meta.age} <sex> {meta.sex}"


def parse_prompt(prompt: str) -> TextMetadata:
    m = _PROMPT_RE.match(prompt)
    if m is None:
        raise ValueError(f"not a metadata prompt: {prompt!r}")
    return TextMetadata(tracer=m.group(1), diagnosis=m.group(2), age=int(m.group(3)), sex=m.group(4))


class Vocabulary:
    """Whitespace word vocabulary. Ids are stable: specials first, then
    corpus words in sorted order."""

    def __init__(self, words: Sequence[str], max_len: int = 16):
        self.words = list(words)
        self.max_len = max_len
        self.index = {w: i for i, w in enumerate(self.words)}
        if self.words[: len(SPECIALS)] != list(SPECIALS):
            raise ValueError("vocabulary must start with the special tokens")

    @classmethod
    def build(cls, corpus: Iterable[str], max_len: int = 16) -> "Vocabulary":
        seen = set()
        for prompt in corpus:
            seen.update(prompt.split())
        return cls(list(SPECIALS) + sorted(seen - set(SPECIALS)), max_len=max_len)

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    def encode(self, prompt: str) -> List[int]:
        unk = self.index[UNK]
        ids = [self.index[BOS]] + [self.index.get(w, unk) for w in prompt.split()]
        ids = ids[: self.max_len - 1] + [self.index[EOS]]
        return ids + [self.pad_id] * (self.max_len - len(ids))

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.words[i] for i in ids if self.words[i] not in (PAD, BOS, EOS)]

    def to_dict(self) -> Dict:
        return {"words": self.words, "max_len": self.max_len}

    @classmethod
    def from_dict(cls, d: Dict) -> "Vocabulary":
        return cls(d["words"], d["max_len"])


def tokenize_prompt(prompt: str, vocab: Vocabulary) -> List[int]:
    return vocab.encode(prompt)


@dataclass
class TextConfig:
    width: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    align_dim: int = 64
    max_len: int = 16
    normalize: bool = True  # unit-normalise both embeddings before the dot product


class TextEncoder(nn.Module):
    """Small transformer over prompt tokens; CLS pooling, linear projection,
    unit-normalised output (unless ``cfg.normalize`` is off)."""

    def __init__(self, vocab_size: int, cfg: TextConfig):
        super().__init__()
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_len + 1, cfg.width))
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.align_dim)

    def forward(self, ids: torch.Tensor, pad_id: Optional[int] = 0) -> torch.Tensor:
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError("token id out of vocabulary range")
        B, L = ids.shape
        x = self.embed(ids)
        x = torch.cat([self.cls_token.expand(B, -1, -1), x], dim=1) + self.pos_embed[:, : L + 1]
        key_pad = None
        if pad_id is not None:
            key_pad = torch.cat([torch.zeros(B, 1, dtype=torch.bool, device=ids.device), ids == pad_id], dim=1)
        for blk in self.blocks:
            x = blk(x, key_padding_mask=key_pad)
        cls = self.proj(self.norm(x[:, 0]))
        return F.normalize(cls, dim=-1) if self.cfg.normalize else cls


def encode_text(ids: torch.Tensor, encoder: TextEncoder, pad_id: int = 0) -> torch.Tensor:
    return encoder(ids, pad_id=pad_id)


def info_nce(
    pet_cls: torch.Tensor,
    text_cls: torch.Tensor,
    tau,
    symmetric: bool = False,
    check_normalized: bool = True,
) -> torch.Tensor:
    """Mean over rows of -log softmax(s_ii / tau) with s_ij = <pet_i, text_j>.

    Row ``i`` of both batches must be a true pair. ``tau`` may be a float or a
    positive scalar tensor (learnable temperature).
    """
    if pet_cls.shape != text_cls.shape or pet_cls.ndim != 2 or pet_cls.shape[0] < 1:
        raise ValueError(f"expected matching N x dim batches, got {tuple(pet_cls.shape)} and {tuple(text_cls.shape)}")
    if float(tau) <= 0:
        raise ValueError(f"temperature must be positive, got {float(tau)}")
    if check_normalized:
        for name, z in (("pet", pet_cls), ("text", text_cls)):
            norms = z.detach().norm(dim=-1)
            if (norms - 1).abs().max() > 1e-4:
                raise ValueError(f"{name} embeddings are not unit-normalised")
    logits = pet_cls @ text_cls.t() / tau
    target = torch.arange(logits.shape[0], device=logits.device)
    loss = F.cross_entropy(logits, target)
    if symmetric:
        loss = 0.5 * (loss + F.cross_entropy(logits.t(), target))
    return loss


class AlignmentHead(nn.Module):
    """PET CLS projection, text encoder and temperature for ContextAlign."""

    def __init__(self, pet_dim: int, vocab: Vocabulary, cfg: TextConfig,
                 temperature: float = 0.07, learnable_temperature: bool = False):
        super().__init__()
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.vocab = vocab
        self.normalize = cfg.normalize
        self.pet_projection = nn.Linear(pet_dim, cfg.align_dim)
        self.text_encoder = TextEncoder(len(vocab), cfg)
        log_tau = torch.tensor(math.log(temperature))
        if learnable_temperature:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp()

    def embed_pet(self, pet_cls: torch.Tensor) -> torch.Tensor:
        z = self.pet_projection(pet_cls)
        return F.normalize(z, dim=-1) if self.normalize else z

    def embed_text(self, prompts: Sequence[str]) -> torch.Tensor:
        ids = torch.tensor([self.vocab.encode(p) for p in prompts], dtype=torch.long,
                           device=self.pet_projection.weight.device)
        return self.text_encoder(ids, pad_id=self.vocab.pad_id)

    def loss(self, pet_cls: torch.Tensor, prompts: Sequence[str], symmetric: bool = False) -> torch.Tensor:
        return info_nce(self.embed_pet(pet_cls), self.embed_text(prompts), self.tau, symmetric=symmetric,
                        check_normalized=self.normalize)

    def reset_parameters(self, seed: int) -> None:
        init_params(self, seed)
