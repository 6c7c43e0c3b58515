import dataclasses
import math

import numpy as np
import pytest
import torch

from conftest import make_pairs, seg_cohort, small_pretrain_config, staging_cohort, tiny_pretrain_config
from fratmae.data import make_batch
from fratmae.encoder import EncodedRepresentation, EncoderConfig
from fratmae.finetune import (
    FinetuneConfig,
    build_downstream,
    evaluate,
    predict_volume,
    task_patch_spec,
    train_downstream,
)
from fratmae.heads import (
    DownstreamModel,
    SegmentationDecoder,
    center_crop,
    fuse_layerwise,
    seg_loss,
    segment,
    stage_classify,
)
from fratmae.model import encoder_state
from fratmae.patches import PatchSpec
from fratmae.pretrain import Pretrainer, pretrain_step
from fratmae.text import Vocabulary, format_prompt
from fratmae.volume import Modality, StageLabel, Volume, VolumePair


def _rep(ch, grid=(2, 3, 2), seed=0, B=2):
    g = torch.Generator().manual_seed(seed)
    n = math.prod(grid) + 1
    layers = [torch.randn(B, n, ch, generator=g) for _ in range(4)]
    return EncodedRepresentation(layers[-1], layers, grid)


class TestFusion:
    @pytest.mark.parametrize("ch", [8, 96])
    def test_channels_double(self, ch):
        fused = fuse_layerwise(_rep(ch), _rep(ch, seed=1))
        assert len(fused.per_level) == 4
        assert all(x.shape == (2, 2 * ch, 2, 3, 2) for x in fused.per_level)

    def test_ct_first(self):
        a, b = _rep(8), _rep(8, seed=1)
        ab, ba = fuse_layerwise(a, b), fuse_layerwise(b, a)
        for x, y in zip(ab.per_level, ba.per_level):
            assert torch.equal(x[:, :8], y[:, 8:]) and torch.equal(x[:, 8:], y[:, :8])

    def test_cls_excluded_and_grid_order(self):
        a = _rep(4)
        fused = fuse_layerwise(a, _rep(4, seed=1))
        lvl = fused.per_level[0]
        assert lvl[0, :4].flatten(1).shape[1] == 2 * 3 * 2
        # token t (row-major) sits at grid cell unravel(t)
        for t in range(12):
            i, j, k = np.unravel_index(t, (2, 3, 2))
            assert torch.equal(lvl[0, :4, i, j, k], a.per_layer[0][0, 1 + t])

    def test_errors(self):
        with pytest.raises(ValueError):
            fuse_layerwise(_rep(4, (2, 3, 2)), _rep(4, (3, 2, 2)))
        partial = _rep(4)
        partial.visible_index = torch.arange(5)
        with pytest.raises(ValueError):
            fuse_layerwise(partial, _rep(4))


def _seg_model(seed=0):
    cfg = EncoderConfig(embed_dim=16, depth=4, heads=2, token_size=(4, 4, 4), grid_dims=(2, 2, 2))
    return DownstreamModel("seg", cfg).reset_parameters(seed)


def _inputs(B=2, seed=0):
    g = torch.Generator().manual_seed(seed)
    image = torch.randn(B, 2, 8, 8, 8, generator=g)
    tok = lambda x: x.reshape(B, 2, 4, 2, 4, 2, 4).permute(0, 2, 4, 6, 1, 3, 5).reshape(B, 8, 64)
    return tok(image[:, 0]), tok(image[:, 1]), image


class TestSegment:
    def test_output_shape_and_normalisation(self):
        ct, pet, image = _inputs()
        probs = segment(_seg_model(), ct, pet, image)
        assert probs.shape == (2, 2, 8, 8, 8)
        assert (probs.sum(1) - 1).abs().max() < 1e-6

    def test_anisotropic_tokens(self):
        dec = SegmentationDecoder(8, (2, 4, 4))
        assert dec.factors == [(1, 2, 2), (2, 2, 2)]
        with pytest.raises(ValueError):
            SegmentationDecoder(8, (3, 4, 4))

    def test_requires_image(self):
        ct, pet, _ = _inputs()
        with pytest.raises(ValueError):
            _seg_model()(ct, pet)

    def test_all_levels_receive_gradient(self):
        model = _seg_model()
        ct, pet, image = _inputs()
        target = (image[:, 1] > 0.5).long()
        enc = model.encode_pair(ct, pet)
        fused = fuse_layerwise(*enc)
        for lvl in fused.per_level:
            lvl.retain_grad()
        seg_loss(model.head(fused, image).softmax(1), target).backward()
        for i, lvl in enumerate(fused.per_level):
            assert lvl.grad is not None and lvl.grad.norm() > 0, i
        for name, p in model.head.named_parameters():
            assert p.grad is not None and p.grad.norm() > 0, name


class TestSegLoss:
    def setup_method(self):
        g = torch.Generator().manual_seed(0)
        self.target = (torch.rand(2, 4, 4, 4, generator=g) > 0.5).long()

    def _onehot(self, t):
        return torch.stack([1 - t, t], dim=1).double()

    def test_perfect(self):
        assert seg_loss(self._onehot(self.target), self.target).item() < 1e-4

    def test_uniform_ce_is_ln2(self):
        probs = torch.full((2, 2, 4, 4, 4), 0.5, dtype=torch.float64)
        t = torch.zeros(2, 4, 4, 4, dtype=torch.long)
        t[:, :2] = 1  # balanced
        tf = t.flatten(1).double()
        dice = (2 * 0.5 * tf.sum(1) + 1e-5) / (0.5 * 64 + tf.sum(1) + 1e-5)
        ce = seg_loss(probs, t).item() - (1 - dice).mean().item()
        assert abs(ce - math.log(2)) < 1e-12

    def test_empty_target_empty_prediction(self):
        t = torch.zeros(1, 3, 3, 3, dtype=torch.long)
        loss = seg_loss(self._onehot(t), t)
        assert torch.isfinite(loss) and loss.item() < 1e-4

    def test_errors(self):
        with pytest.raises(ValueError):
            seg_loss(self._onehot(self.target), 2 * self.target)
        with pytest.raises(ValueError):
            seg_loss(self._onehot(self.target), self.target[:, :3])


class TestCenterCrop:
    def test_reference_origin(self):
        shape = (160, 160, 192)
        meta = make_pairs(1)[0].metadata
        pair = VolumePair(Volume(np.zeros(shape)), Volume(np.zeros(shape), modality=Modality.PET), meta)
        spec = PatchSpec((32, 160, 192), 2, "coronal", (8, 16, 16))
        ct, pet, _, origin = center_crop(pair, spec)
        assert origin == (48, 0, 0)
        assert ct.shape == pet.shape == (32, 160, 192)

    def test_idempotent_and_shared_origin(self):
        pair = make_pairs(1)[0]
        spec = PatchSpec((16, 16, 16), 1, "axial", (4, 4, 4))
        ct, pet, mask, origin = center_crop(pair, spec)
        again = dataclasses.replace(pair, ct=dataclasses.replace(pair.ct, data=ct),
                                    pet=dataclasses.replace(pair.pet, data=pet), lesion_mask=mask)
        ct2, pet2, _, origin2 = center_crop(again, spec)
        assert origin2 == (0, 0, 0)
        assert np.array_equal(ct, ct2) and np.array_equal(pet, pet2)
        assert np.array_equal(ct, pair.ct.data[origin[0]:origin[0] + 16])
        assert np.array_equal(pet, pair.pet.data[origin[0]:origin[0] + 16])

    def test_undersized(self):
        pair = make_pairs(1)[0]
        with pytest.raises(ValueError):
            center_crop(pair, PatchSpec((16, 16, 16), 4, "coronal", (4, 4, 4)))


class TestStaging:
    def test_probabilities(self):
        cfg = EncoderConfig(embed_dim=16, depth=4, heads=2, token_size=(4, 4, 4), grid_dims=(2, 2, 2))
        ct, pet, _ = _inputs()
        for features in ("cls_pool", "cls"):
            model = DownstreamModel("stage", cfg, features=features).reset_parameters(0)
            p = stage_classify(model, ct, pet)
            assert p.shape == (2, 2) and (p.sum(-1) - 1).abs().max() < 1e-6

    def test_unknown_features(self):
        cfg = EncoderConfig(embed_dim=16, depth=4, heads=2, token_size=(4, 4, 4), grid_dims=(2, 2, 2))
        with pytest.raises(ValueError):
            DownstreamModel("stage", cfg, features="everything")


class TestTransfer:
    def test_encoder_weights_bit_identical(self, pairs8):
        cfg = small_pretrain_config("fratmae")
        tr = Pretrainer(cfg, Vocabulary.build([format_prompt(p.metadata) for p in pairs8]), total_steps=2)
        for _ in range(2):
            pretrain_step(make_batch(pairs8[:4], cfg.patch, rng=tr.rng), tr)
        state = encoder_state(tr.model)
        for task in ("seg", "stage"):
            model = build_downstream(FinetuneConfig(task=task), cfg, state)
            for k, v in model.state_dict().items():
                if k.startswith("encoders."):
                    assert torch.equal(v, state[k]), k

    def test_missing_encoder_tensors(self):
        cfg = small_pretrain_config("mae")
        with pytest.raises(ValueError):
            build_downstream(FinetuneConfig(task="seg"), cfg, {"encoders.CT.cls_token": torch.zeros(1)})

    def test_freeze(self):
        model = build_downstream(FinetuneConfig(task="stage", freeze_encoders=True), small_pretrain_config())
        assert not any(p.requires_grad for p in model.encoders.parameters())
        assert all(p.requires_grad for p in model.head.parameters())


@pytest.mark.slow
def test_all_background_fit():
    pairs = make_pairs(6, seed=3, n_lesions=0)
    pcfg = tiny_pretrain_config()
    # 100 steps at 1e-3 leaves ~2% of voxels on the wrong side of 0.5; the
    # empty-target Dice term has almost no gradient, so CE does the work alone
    model = train_downstream(FinetuneConfig(task="seg", steps=100, lr_init=3e-3, seed=0), pcfg, pairs)
    spec = task_patch_spec("seg", pcfg)
    fg = np.mean([predict_volume(model, p, spec).mean() for p in make_pairs(3, seed=4, n_lesions=0)])
    assert fg < 0.01


@pytest.mark.slow
def test_separable_segmentation():
    pcfg = tiny_pretrain_config()
    fcfg = FinetuneConfig(task="seg", steps=300, lr_init=1e-3, seed=0, n_bootstrap=100)
    model = train_downstream(fcfg, pcfg, seg_cohort(16, seed=0))
    assert evaluate(model, fcfg, pcfg, seg_cohort(8, seed=1))["metrics"]["dice"]["point"] >= 0.7


@pytest.mark.slow
def test_shuffled_labels_do_not_leak():
    pcfg = tiny_pretrain_config()
    train = staging_cohort(16, seed=0)
    labels = [p.stage_label for p in train]
    perm = np.random.default_rng(0).permutation(len(train))
    shuffled = [dataclasses.replace(p, stage_label=StageLabel(labels[j])) for p, j in zip(train, perm)]
    test = staging_cohort(64, seed=1)
    accs = []
    for seed in range(3):
        fcfg = FinetuneConfig(task="stage", steps=500, lr_init=1e-3, seed=seed, n_bootstrap=100)
        model = train_downstream(fcfg, pcfg, shuffled)
        accs.append(evaluate(model, fcfg, pcfg, test)["metrics"]["accuracy"]["point"])
    assert 0.35 <= float(np.mean(accs)) <= 0.65, accs
