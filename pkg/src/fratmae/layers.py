"""Transformer building blocks shared by the image encoders, the cross-attention
decoders and the text encoder."""

from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


class Attention(nn.Module):
    """Multi-head scaled dot-product attention.

    Queries come from ``x``; keys and values from ``context`` (``x`` itself
    when ``context`` is None). No positional bias is added inside.
    """

    def __init__(self, dim: int, num_heads: int, kv_dim: Optional[int] = None, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.dim = dim
        self.kv_dim = kv_dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q = nn.Linear(dim, dim, bias=qkv_bias)
        self.k = nn.Linear(kv_dim, dim, bias=qkv_bias)
        self.v = nn.Linear(kv_dim, dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        if x.shape[-1] != self.dim or context.shape[-1] != self.kv_dim:
            raise ValueError(
                f"width mismatch: query {x.shape[-1]} vs {self.dim}, kv {context.shape[-1]} vs {self.kv_dim}"
            )
        B, Nq, _ = x.shape
        Nk = context.shape[1]
        q = self.q(x).reshape(B, Nq, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(context).reshape(B, Nk, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(context).reshape(B, Nk, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        if key_padding_mask is not None:
            attn = attn.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, self.dim)
        return self.proj(out)


def cross_attention(query_tokens: torch.Tensor, kv_tokens: torch.Tensor, attn: Attention) -> torch.Tensor:
    """Queries from the masked-modality stream, keys/values from the unmasked one."""
    return attn(query_tokens, context=kv_tokens)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: self-attention then MLP, both residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, key_padding_mask=None):
        x = x + self.attn(self.norm1(x), key_padding_mask=key_padding_mask)
        return x + self.mlp(self.norm2(x))


class CrossBlock(nn.Module):
    """Decoder block: optional query-stream self-attention, optional
    cross-attention to a context stream, then MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0,
                 self_attention: bool = True, cross: bool = True):
        super().__init__()
        if not (self_attention or cross):
            raise ValueError("decoder block needs self- or cross-attention")
        self.self_attn = None
        self.cross_attn = None
        if self_attention:
            self.norm1 = nn.LayerNorm(dim)
            self.self_attn = Attention(dim, num_heads)
        if cross:
            self.norm_q = nn.LayerNorm(dim)
            self.norm_kv = nn.LayerNorm(dim)
            self.cross_attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, context=None):
        if self.self_attn is not None:
            x = x + self.self_attn(self.norm1(x))
        if self.cross_attn is not None:
            if context is None:
                raise ValueError("cross-attention block needs a key/value stream")
            x = x + cross_attention(self.norm_q(x), self.norm_kv(context), self.cross_attn)
        return x + self.mlp(self.norm2(x))


def init_params(module: nn.Module, seed: int, std: float = 0.02) -> nn.Module:
    """Deterministic init: truncated normal (std 0.02) weights, zero biases,
    unit LayerNorm scales. Parameters are visited in name order."""
    gen = torch.Generator().manual_seed(int(seed))
    norm_params = set()
    for m in module.modules():
        if isinstance(m, nn.LayerNorm):
            norm_params.update(id(p) for p in m.parameters())
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if id(p) in norm_params:
                continue
            if name.endswith("bias"):
                p.zero_()
            elif name.endswith("log_tau"):
                continue
            else:
                tmp = torch.empty(p.shape, dtype=torch.float64)
                nn.init.trunc_normal_(tmp, std=std, a=-2 * std, b=2 * std, generator=gen)
                p.copy_(tmp.to(p.dtype))
    return module
