import numpy as np
import pytest

from camoret import numerics as nx
from camoret.errors import ConfigError, StructuralError
from camoret.params import ParamStore
from camoret.vit import EncoderConfig, ViTEncoder, encode, patchify, unpatchify

SMALL = dict(image_size=16, patch_size=4, channels=3, embed_dim=16, num_heads=2, num_blocks=2,
             mlp_ratio=2)


def make(seed=0, **kw):
    cfg = EncoderConfig(**{**SMALL, **kw})
    return ViTEncoder(cfg, ParamStore(seed))


def test_patchify_top_left_block():
    img = np.arange(16.0).reshape(4, 4, 1)
    p = patchify(img, 2)
    assert p.shape == (4, 4)
    assert p[0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert p[3].tolist() == [10.0, 11.0, 14.0, 15.0]


def test_patchify_constant_image_and_round_trip(rng):
    p = patchify(np.full((8, 8, 3), 0.25), 4)
    assert (p == p[0]).all()
    img = rng.random((8, 8, 3))
    assert np.array_equal(unpatchify(patchify(img, 4), 4, 8, 8, 3), img)


def test_patchify_rejects_non_divisible():
    with pytest.raises(ConfigError):
        patchify(np.zeros((6, 6, 3)), 4)
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=10, patch_size=4)
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=10, num_heads=4)


def test_token_count_is_n_plus_one():
    cfg = EncoderConfig()
    assert cfg.num_patches == 64 and cfg.patch_dim == 192
    enc = make()
    x = enc.embed(np.zeros((2, enc.cfg.num_patches, enc.cfg.patch_dim)))
    assert x.shape == (2, enc.cfg.num_patches + 1, 16)


def test_embed_zero_patches_zero_pos_gives_bias():
    enc = make()
    enc.store["vit.pos"].data[...] = 0.0
    enc.store["vit.patch.b"].data[...] = np.arange(16.0)
    x = enc.embed(np.zeros((1, 16, 48))).data
    assert np.array_equal(x[0, 1:], np.broadcast_to(np.arange(16.0), (16, 16)))


def test_embed_is_local(rng):
    enc = make()
    a = rng.random((1, 16, 48))
    b = a.copy()
    b[0, 5] += 1.0
    diff = np.abs(enc.embed(a).data - enc.embed(b).data).sum(axis=-1)[0]
    assert np.nonzero(diff)[0].tolist() == [6]


def test_block_identity_when_output_projections_zero(rng):
    enc = make()
    for l in range(2):
        for n in ("attn.o.w", "attn.o.b", "mlp.fc2.w", "mlp.fc2.b"):
            enc.store[f"vit.block{l}.{n}"].data[...] = 0.0
    x = nx.Tensor(rng.standard_normal((2, 17, 16)))
    assert np.array_equal(enc.block(x, 0).data, x.data)


def test_attention_rows_sum_to_one(rng):
    enc = make()
    trace = []
    encode(enc, rng.random((2, 16, 16, 3)), trace=trace)
    assert len(trace) == 2
    for probs in trace:
        assert probs.shape == (2, 2, 17, 17)
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


def test_expert_branch_on_black_image_is_finite_and_deterministic():
    enc = make()
    a, _ = encode(enc, np.zeros((1, 16, 16, 3)), branch="expert")
    b, _ = encode(enc, np.zeros((1, 16, 16, 3)), branch="expert")
    assert len(a) == 2
    for x, y in zip(a, b):
        assert x.branch == "expert" and np.isfinite(x.tokens.data).all()
        assert np.array_equal(x.tokens.data, y.tokens.data)


def test_shared_weights_give_identical_branches_with_white_mask(rng):
    from camoret.cod import apply_mask

    enc = make()
    img = rng.random((2, 16, 16, 3))
    g, _ = encode(enc, img, branch="global")
    e, _ = encode(enc, apply_mask(img, np.ones((2, 16, 16))), branch="expert")
    for x, y in zip(g, e):
        assert np.array_equal(x.tokens.data, y.tokens.data)


def test_parameters_are_shared_by_reference(rng):
    enc = make()
    img = rng.random((1, 16, 16, 3))
    before, _ = encode(enc, img, branch="expert")
    enc.store["vit.block0.mlp.fc1.w"].data *= 3.0
    after, _ = encode(enc, img, branch="expert")
    g, _ = encode(enc, img, branch="global")
    assert not np.array_equal(before[-1].tokens.data, after[-1].tokens.data)
    assert np.array_equal(after[-1].tokens.data, g[-1].tokens.data)


def test_level_mismatch_is_structural_error(rng):
    from camoret.c2ga import AddFusion

    enc = make()
    img = rng.random((1, 16, 16, 3))
    e, _ = encode(enc, img, branch="expert")
    with pytest.raises(StructuralError):
        encode(enc, img, expert_levels=e[:1], fusion=AddFusion(enc.store, 2, 16))


def test_permutation_equivariance_without_positions(rng):
    enc = make()
    enc.store["vit.pos"].data[...] = 0.0
    p = rng.random((1, 16, 48))
    perm = rng.permutation(16)
    a, _ = encode(enc, patches=p)
    b, _ = encode(enc, patches=p[:, perm])
    assert np.allclose(b[-1].tokens.data[0, 1:], a[-1].tokens.data[0, 1:][perm], atol=1e-12)
    assert np.allclose(b[-1].cls.data, a[-1].cls.data, atol=1e-12)
