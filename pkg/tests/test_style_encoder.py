import pytest
import torch

from inkfuse.style_encoder import (
    PatchEmbeddingConfig,
    PatchProvenance,
    StyleEncoder,
    patch_provenance,
)
from oracles import finite_difference_check

SMALL = PatchEmbeddingConfig(embed_dim=32, depth=1, heads=4, memory_dim=512)


@pytest.fixture(scope="module")
def small_encoder():
    torch.manual_seed(0)
    return StyleEncoder(SMALL).eval()


def test_default_geometry():
    cfg = PatchEmbeddingConfig()
    assert (cfg.grid, cfg.num_patches_per_image, cfg.num_tokens, cfg.memory_length) == (14, 196, 197, 980)
    assert (cfg.embed_dim, cfg.memory_dim) == (384, 512)


def test_config_rejects_indivisible_patch():
    with pytest.raises(ValueError):
        PatchEmbeddingConfig(patch_size=15)


@pytest.mark.parametrize("batch", [1, 3])
def test_memory_shape(small_encoder, batch):
    with torch.no_grad():
        mem = small_encoder(torch.rand(batch, 5, 3, 224, 224) * 2 - 1)
    assert mem.shape == (980, batch, 512)
    assert torch.isfinite(mem).all()


def test_identical_inputs_give_identical_memories(small_encoder):
    white = torch.ones(2, 5, 3, 224, 224)
    with torch.no_grad():
        mem = small_encoder(white)
    assert torch.equal(mem[:, 0], mem[:, 1])
    with torch.no_grad():
        assert torch.equal(small_encoder(white), mem)


def test_wrong_resolution_names_expected_size(small_encoder):
    with pytest.raises(ValueError, match="224x224"):
        small_encoder(torch.zeros(1, 5, 3, 128, 128))


def test_layer_norm_statistics(small_encoder):
    with torch.no_grad():
        mem = small_encoder(torch.rand(2, 5, 3, 224, 224) * 2 - 1).double()
    assert mem.mean(-1).abs().max() < 1e-4
    assert (mem.var(-1, unbiased=False) - 1).abs().max() < 1e-3  # LayerNorm eps = 1e-5 biases the variance slightly


def test_block_equivariance(small_encoder):
    style = torch.rand(1, 5, 3, 224, 224) * 2 - 1
    perm = [3, 0, 4, 1, 2]
    with torch.no_grad():
        mem = small_encoder(style)
        mem_p = small_encoder(style[:, perm])
    blocks = mem.view(5, 196, 1, 512)
    assert torch.equal(mem_p.view(5, 196, 1, 512), blocks[perm])


def test_provenance_examples():
    assert patch_provenance(0) == (0, 0, 0)
    assert patch_provenance(195) == (0, 13, 13)
    assert patch_provenance(500) == (2, 7, 10)


def test_provenance_matches_grid_enumeration():
    expected = [(n, r, c) for n in range(5) for r in range(14) for c in range(14)]
    assert PatchProvenance().table() == expected


@pytest.mark.parametrize("bad", [-1, 980, 10_000])
def test_provenance_out_of_range(bad):
    with pytest.raises(IndexError):
        patch_provenance(bad)


def test_finite_difference_tiny_config():
    torch.manual_seed(1)
    cfg = PatchEmbeddingConfig(patch_size=56, embed_dim=8, depth=1, heads=2, memory_dim=8)
    enc = StyleEncoder(cfg).double().eval()
    style = (torch.rand(1, 5, 3, 224, 224, dtype=torch.float64) * 2 - 1).requires_grad_()
    weights = torch.randn(cfg.memory_length, 1, 8, dtype=torch.float64)
    params = [p for p in enc.parameters()]
    err = finite_difference_check(lambda: (enc(style) * weights).sum(), params + [style], max_coords=15)
    assert err < 1e-3
