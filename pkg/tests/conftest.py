import numpy as np
import pytest
import torch

from fratmae.data import preprocess
from fratmae.decoder import DecoderConfig
from fratmae.encoder import EncoderConfig
from fratmae.patches import PatchSpec
from fratmae.pretrain import PretrainConfig
from fratmae.text import TextConfig
from fratmae.volume import SyntheticSpec, generate_synthetic_pair

SMALL_GRID = (32, 16, 16)


def small_patch_spec(mode="coronal", k=2):
    return PatchSpec(patch_dims=(16, 16, 16), k=k, mode=mode, token_size=(4, 4, 4))


def small_pretrain_config(ablation="fratmae", seed=0, **kw):
    """Seconds-scale pre-training settings on 32x16x16 phantoms."""
    kw.setdefault("lr_init", 1e-3)
    kw.setdefault("epochs", 1)
    return PretrainConfig(
        ablation=ablation,
        seed=seed,
        batch_size=4,
        patch=small_patch_spec(),
        encoder=EncoderConfig(embed_dim=32, depth=4, heads=4),
        decoder=DecoderConfig(embed_dim=32, depth=2, heads=4),
        text=TextConfig(width=32, depth=1, heads=4, align_dim=32),
        **kw,
    )


def make_pairs(n, seed=0, **kw):
    kw.setdefault("grid_dims", SMALL_GRID)
    kw.setdefault("n_lesions", 2)
    kw.setdefault("noise_sigma", 0.005)
    return [preprocess(generate_synthetic_pair(SyntheticSpec(seed=1000 * seed + i, **kw))) for i in range(n)]


@pytest.fixture(scope="session")
def pairs8():
    return make_pairs(8)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(max(1, min(4, torch.get_num_threads())))
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_pretrain_config():
    from fratmae.config import preset

    return preset("tiny").pretrain


def seg_cohort(n, seed, **kw):
    """Three hot lesions per case; with ``n_organs=0`` lesions are the only
    structure brighter than body tissue (separable phantom)."""
    kw.setdefault("n_organs", 0)
    return make_pairs(n, seed=seed, n_lesions=3, **kw)


def staging_cohort(n, seed):
    """Balanced early/advanced cohort: early cases carry one lesion in one height
    third, advanced cases one lesion in each of the three thirds."""
    from fratmae.volume import SyntheticSpec, generate_synthetic_pair

    out = []
    for i in range(n):
        k = 1 if i % 2 == 0 else 3
        spec = SyntheticSpec(grid_dims=SMALL_GRID, n_organs=0, n_lesions=k, lesion_thirds=k, lesion_radius=3,
                             noise_sigma=0.005, seed=10_000 * (seed + 1) + i)
        out.append(preprocess(generate_synthetic_pair(spec)))
    return out


# acceptance results keyed by (criterion, part), one summary line per criterion
ACCEPTANCE = {}


def record(criterion: int, ok: bool, detail: str, part: str = "") -> None:
    ACCEPTANCE[(criterion, part)] = (bool(ok), detail)
    print(f"criterion {criterion}{part}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted({c for c, _ in ACCEPTANCE}):
        parts = sorted((p, v) for (c, p), v in ACCEPTANCE.items() if c == n)
        ok = all(v[0] for _, v in parts)
        detail = "; ".join(f"({p}) {v[1]}" if p else v[1] for p, v in parts)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
