import numpy as np
import pytest
import torch
from scipy.stats import binomtest

from conftest import make_pairs, small_pretrain_config
from fratmae.data import make_batch
from fratmae.decoder import CrossDecoder, DecoderConfig, build_decoder, decode_cross, reconstruction_loss
from fratmae.encoder import EncodedRepresentation
from fratmae.layers import Attention, cross_attention, init_params
from fratmae.masking import MaskingPlan, sample_masking_plan
from fratmae.patches import center_origin
from fratmae.pretrain import Pretrainer, pretrain_step
from fratmae.text import Vocabulary, format_prompt
from fratmae.volume import Modality


def _attn(dim=4, heads=1, seed=0):
    return init_params(Attention(dim, heads), seed).double()


class TestCrossAttention:
    def test_single_kv_token(self):
        attn = _attn(8, 2)
        q = torch.randn(1, 5, 8, dtype=torch.float64)
        kv = torch.randn(1, 1, 8, dtype=torch.float64)
        out = cross_attention(q, kv, attn)
        expected = attn.proj(attn.v(kv)).expand(1, 5, 8)
        torch.testing.assert_close(out, expected)

    def test_kv_permutation_invariant(self):
        attn = _attn(8, 2, seed=1)
        q = torch.randn(2, 3, 8, dtype=torch.float64)
        kv = torch.randn(2, 6, 8, dtype=torch.float64)
        torch.testing.assert_close(cross_attention(q, kv, attn), cross_attention(q, kv[:, [4, 1, 5, 0, 3, 2]], attn))

    def test_dense_oracle(self):
        # hand-rolled single-head attention on fixed small weights
        attn = Attention(4, 1).double()
        rng = np.random.default_rng(0)
        W = {n: rng.uniform(-0.5, 0.5, (4, 4)) for n in "qkvo"}
        bias = {n: rng.uniform(-0.1, 0.1, 4) for n in "qkvo"}
        with torch.no_grad():
            for n, lin in zip("qkvo", (attn.q, attn.k, attn.v, attn.proj)):
                lin.weight.copy_(torch.from_numpy(W[n]))
                lin.bias.copy_(torch.from_numpy(bias[n]))
        X = rng.normal(size=(2, 4))
        C = rng.normal(size=(3, 4))
        Q = X @ W["q"].T + bias["q"]
        K = C @ W["k"].T + bias["k"]
        V = C @ W["v"].T + bias["v"]
        out = np.zeros((2, 4))
        for i in range(2):
            s = np.array([Q[i] @ K[j] / 2.0 for j in range(3)])
            a = np.exp(s - s.max())
            a /= a.sum()
            out[i] = sum(a[j] * V[j] for j in range(3)) @ W["o"].T + bias["o"]
        got = cross_attention(torch.from_numpy(X)[None], torch.from_numpy(C)[None], attn)[0].detach().numpy()
        np.testing.assert_allclose(got, out, atol=1e-6, rtol=0)

    def test_width_mismatch(self):
        attn = _attn(8, 2)
        with pytest.raises(ValueError):
            cross_attention(torch.zeros(1, 2, 8, dtype=torch.float64), torch.zeros(1, 2, 6, dtype=torch.float64), attn)


def _decoder(cross=True, seed=0, T=12):
    return build_decoder(16, T, 8, DecoderConfig(embed_dim=8, depth=2, heads=2), cross, seed)


def _rep(n, index=None, seed=0, B=2):
    g = torch.Generator().manual_seed(seed)
    return EncodedRepresentation(torch.randn(B, n + 1, 16, generator=g), [], (2, 3, 2), index)


class TestDecode:
    def test_output_has_all_tokens(self):
        dec = _decoder()
        for ratio in (0.25, 0.5, 0.75):
            plan = sample_masking_plan(12, ratio, np.random.default_rng(0))
            index = torch.as_tensor(plan.visible_index())
            pred = decode_cross(_rep(len(index), index), _rep(12, seed=1), plan, dec)
            assert pred.shape == (2, 12, 8)

    def test_batched_index(self):
        dec = _decoder()
        plan = sample_masking_plan(12, 0.5, np.random.default_rng(0), batch_size=2)
        index = torch.as_tensor(plan.visible_index())
        assert decode_cross(_rep(6, index), _rep(12, seed=1), plan, dec).shape == (2, 12, 8)

    def test_cross_path_is_live(self):
        dec = _decoder(seed=4)
        plan = sample_masking_plan(12, 0.5, np.random.default_rng(1))
        index = torch.as_tensor(plan.visible_index())
        rep_s, rep_u = _rep(6, index), _rep(12, seed=2)
        zeroed = EncodedRepresentation(torch.zeros_like(rep_u.tokens), [], rep_u.grid_dims)
        a = decode_cross(rep_s, rep_u, plan, dec)
        b = decode_cross(rep_s, zeroed, plan, dec)
        masked = torch.as_tensor(plan.token_mask == 0)
        assert (a - b)[:, masked].abs().max() > 0

    def test_plan_mismatch(self):
        dec = _decoder()
        plan = sample_masking_plan(12, 0.5, np.random.default_rng(0))
        with pytest.raises(ValueError):
            decode_cross(_rep(5, torch.arange(5)), _rep(12), plan, dec)

    def test_cross_requires_context(self):
        with pytest.raises(ValueError):
            _decoder()(_rep(12))

    def test_self_only_decoder(self):
        dec = _decoder(cross=False)
        assert dec.kv_embed is None
        assert dec(_rep(12)).shape == (2, 12, 8)


class TestReconstructionLoss:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.target = torch.randn(3, 10, 5, generator=g)
        self.mask = np.ones(10, np.uint8)
        self.mask[[1, 4, 6, 7, 9]] = 0

    def test_zero_at_target(self):
        assert reconstruction_loss(self.target, self.target, self.mask).item() == 0.0

    def test_unit_offset(self):
        pred = self.target + 1.0
        assert reconstruction_loss(pred, self.target, self.mask).item() == pytest.approx(1.0, abs=1e-6)

    def test_visible_perturbation_exact(self):
        pred = self.target + torch.randn_like(self.target)
        base = reconstruction_loss(pred, self.target, self.mask)
        bumped = pred.clone()
        bumped[:, self.mask == 1] += 100.0
        assert reconstruction_loss(bumped, self.target, self.mask).item() == base.item()

    def test_gradient_zero_on_visible(self):
        pred = (self.target + 0.3).requires_grad_()
        reconstruction_loss(pred, self.target, self.mask).backward()
        assert torch.all(pred.grad[:, self.mask == 1] == 0)
        assert torch.all(pred.grad[:, self.mask == 0] != 0)

    def test_nothing_masked(self):
        assert reconstruction_loss(self.target + 1, self.target, np.ones(10, np.uint8)).item() == 0.0

    def test_full_support(self):
        assert reconstruction_loss(self.target + 2, self.target, self.mask, "full").item() == pytest.approx(4.0)

    def test_errors(self):
        with pytest.raises(ValueError):
            reconstruction_loss(self.target, self.target[:, :9], self.mask)
        with pytest.raises(ValueError):
            reconstruction_loss(self.target, self.target, self.mask[:9])
        with pytest.raises(ValueError):
            reconstruction_loss(self.target, self.target, self.mask, "sometimes")


@pytest.mark.slow
def test_cross_modal_context_helps():
    """After brief training at uptake_correlation=1, reconstruction with the
    true partner modality beats reconstruction with another case's partner.

    The cohort varies body outline and organ layout between cases so the
    partner CT carries case-specific information. Lesions are left out: they
    are barely visible on CT and only add PET error no partner can explain.
    """
    pairs = make_pairs(16, seed=5, uptake_correlation=1.0, noise_sigma=0.0, n_lesions=0, n_organs=6,
                       organ_radius=(0.15, 0.35), body_jitter=0.2)
    cfg = small_pretrain_config("fratmae_no_contextalign", seed=0)
    trainer = Pretrainer(cfg, Vocabulary.build([format_prompt(p.metadata) for p in pairs]), total_steps=200)
    rng = np.random.default_rng(0)
    while trainer.step_count < 200:
        idx = rng.choice(16, size=4, replace=False)
        pretrain_step(make_batch([pairs[i] for i in idx], cfg.patch, rng=trainer.rng), trainer)

    model = trainer.model.eval()
    spec = cfg.patch
    batch = make_batch(pairs, spec, origins=[center_origin(p.shape, spec) for p in pairs])
    ct, pet = torch.from_numpy(batch.ct), torch.from_numpy(batch.pet)
    eval_rng = np.random.default_rng(99)
    wins = 0
    with torch.no_grad():
        for trial in range(20):
            base = sample_masking_plan(spec.num_tokens, 0.5, eval_rng)
            plan = MaskingPlan(Modality.PET, base.token_mask)
            i = trial % 16
            j = (i + 1 + int(eval_rng.integers(15))) % 16  # any other case
            true_pred = model.losses(ct[i:i + 1], pet[i:i + 1], plan)["pred"]
            wrong_pred = model.losses(ct[j:j + 1], pet[i:i + 1], plan)["pred"]
            e_true = reconstruction_loss(true_pred, pet[i:i + 1], plan.token_mask).item()
            e_wrong = reconstruction_loss(wrong_pred, pet[i:i + 1], plan.token_mask).item()
            wins += e_true < e_wrong
    assert binomtest(wins, 20, 0.5, alternative="greater").pvalue < 0.05, wins
