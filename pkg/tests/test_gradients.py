"""Autodiff against central finite differences, float64, widths <= 8."""

import time

import pytest
import torch
import torch.nn.functional as F

from fd import fd_relative_error
from fratmae.encoder import EncoderConfig, build_encoder
from fratmae.heads import seg_loss
from fratmae.layers import Block, CrossBlock, init_params
from fratmae.text import TextConfig, TextEncoder, info_nce

TOL = 1e-4


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=_gen(seed), dtype=torch.float64)


def _scale_up(module, seed, std=0.3):
    """Larger weights than the training init so every path has a visible gradient."""
    init_params(module, seed, std=std)
    return module.double()


def encoder_block_error():
    blk = _scale_up(Block(8, 2, mlp_ratio=2.0), 0)
    x = _randn(2, 5, 8, seed=1).requires_grad_()
    probe = _randn(2, 5, 8, seed=2)
    return fd_relative_error(lambda: (blk(x) * probe).sum(), [x, *blk.parameters()])


def decoder_block_error():
    blk = _scale_up(CrossBlock(8, 2, mlp_ratio=2.0), 3)
    x = _randn(2, 4, 8, seed=4).requires_grad_()
    ctx = _randn(2, 6, 8, seed=5).requires_grad_()
    probe = _randn(2, 4, 8, seed=6)
    return fd_relative_error(lambda: (blk(x, ctx) * probe).sum(), [x, ctx, *blk.parameters()])


def infonce_error():
    pet = _randn(4, 8, seed=7).requires_grad_()
    text = _randn(4, 8, seed=8).requires_grad_()
    return fd_relative_error(lambda: info_nce(F.normalize(pet, dim=-1), F.normalize(text, dim=-1), 0.07),
                             [pet, text])


def seg_loss_error():
    logits = _randn(2, 2, 3, 4, 2, seed=9).requires_grad_()
    target = (torch.rand(2, 3, 4, 2, generator=_gen(10)) > 0.6).long()
    return fd_relative_error(lambda: seg_loss(logits.softmax(dim=1), target), [logits])


CHECKS = {
    "encoder_block": encoder_block_error,
    "cross_decoder_block": decoder_block_error,
    "infonce": infonce_error,
    "dice_ce": seg_loss_error,
}


@pytest.mark.parametrize("name", sorted(CHECKS))
def test_gradient_matches_finite_differences(name):
    assert CHECKS[name]() < TOL


def test_full_encoder_patch_embedding():
    cfg = EncoderConfig(embed_dim=8, depth=4, heads=2, mlp_ratio=2.0, token_size=(2, 2, 2), grid_dims=(1, 2, 2))
    enc = build_encoder(cfg, 0)
    init_params(enc, 0, std=0.3)
    enc.double()
    tokens = _randn(1, 3, 8, seed=11)
    index = torch.tensor([0, 2, 3])
    probe = _randn(1, 4, 8, seed=12)
    err = fd_relative_error(lambda: (enc(tokens, index).tokens * probe).sum(), [enc.patch_embed.weight])
    assert err < TOL


def test_text_encoder():
    enc = _scale_up(TextEncoder(10, TextConfig(width=8, depth=1, heads=2, align_dim=4, max_len=5)), 13)
    ids = torch.tensor([[2, 4, 5, 3, 0], [2, 6, 3, 0, 0]])
    probe = _randn(2, 4, seed=14)
    params = [enc.proj.weight, enc.embed.weight, enc.blocks[0].attn.q.weight]
    assert fd_relative_error(lambda: (enc(ids, pad_id=0) * probe).sum(), params) < TOL


def test_layernorm_parameters():
    blk = _scale_up(Block(8, 2, mlp_ratio=2.0), 15)
    with torch.no_grad():
        for p in (blk.norm1.weight, blk.norm2.weight):
            p.add_(_randn(8, seed=16) * 0.1)
    x = _randn(1, 4, 8, seed=17)
    probe = _randn(1, 4, 8, seed=18)
    params = [blk.norm1.weight, blk.norm1.bias, blk.norm2.weight, blk.norm2.bias]
    assert fd_relative_error(lambda: (blk(x) * probe).sum(), params) < TOL


def test_suite_is_fast():
    start = time.perf_counter()
    for fn in CHECKS.values():
        fn()
    assert time.perf_counter() - start < 60
