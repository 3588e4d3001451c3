import math

import numpy as np
import pytest
import torch

from slidecompress.errors import ConfigError, DegenerateLatentError, EmptyRowError, NumericalError
from slidecompress.resampler import (
    LatentBundle,
    ResamplerConfig,
    _attention_pairs,
    build_resampler,
    cosine_topk,
    coverage_metric,
    dilation_mask,
    diversity_metric,
    encode,
    encode_flops,
    fourier_features,
    topk_keep,
    topk_mask,
)
from slidecompress.slide_io import TileFeatureSet


def _small(**kw):
    base = dict(in_dim=16, dim=16, n_latents=6, heads=4, topk_start=(8, 4), topk_end=(4, 2), fourier_bands=4)
    base.update(kw)
    return ResamplerConfig(**base)


def _slide(n=20, d=16, seed=0):
    r = np.random.default_rng(seed)
    coords = np.array([(i // 7, i % 7) for i in range(n)])
    return TileFeatureSet(f"s{seed}", r.standard_normal((n, d)), coords)


# ---------------------------------------------------------------- config


def test_config_defaults():
    c = ResamplerConfig()
    assert (c.dim, c.n_latents, c.heads, c.cross_blocks) == (512, 256, 8, 2)
    assert c.topk_start == (128, 64) and c.topk_end == (64, 32)


@pytest.mark.parametrize(
    "kw",
    [dict(n_latents=0), dict(dim=10, heads=4), dict(topk_start=(8,)), dict(topk_end=(0, 2)), dict(context_dilation=(((4, 1),),))],
)
def test_config_invalid(kw):
    with pytest.raises(ConfigError):
        _small(**kw)


def test_config_round_trip():
    c = ResamplerConfig.paper()
    assert ResamplerConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- fourier


def test_fourier_origin():
    f = fourier_features(torch.zeros(1, 2, dtype=torch.float64), 3)
    assert f[0].tolist() == [0.0, 1.0, 0.0, 1.0] * 3


def test_fourier_hand_value():
    f = fourier_features(torch.tensor([[1.0, 2.0]], dtype=torch.float64), 2, max_wavelength=8.0)
    w0, w1 = 2 * math.pi / 8, 2 * math.pi * 2 / 8
    want = [math.sin(w0), math.cos(w0), math.sin(2 * w0), math.cos(2 * w0), math.sin(w1), math.cos(w1), math.sin(2 * w1), math.cos(2 * w1)]
    assert np.allclose(f[0].numpy(), want, atol=1e-12)


def test_fourier_period():
    c = torch.tensor([[3.0, 5.0]], dtype=torch.float64)
    shifted = c + torch.tensor([[4096.0, 0.0]], dtype=torch.float64)
    assert torch.allclose(fourier_features(c, 8), fourier_features(shifted, 8), atol=1e-9)


def test_fourier_distinct_on_grid():
    coords = torch.tensor([(r, c) for r in range(32) for c in range(32)], dtype=torch.float64)
    f = fourier_features(coords, 8).numpy()
    d = ((f[:, None] - f[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-12


# ---------------------------------------------------------------- top-k


def test_topk_hand_softmax():
    p = torch.softmax(topk_mask(torch.tensor([3.0, 1.0, 2.0], dtype=torch.float64), 2), -1)
    assert np.allclose(p.numpy(), [0.7311, 0.0, 0.2689], atol=1e-4)
    e = math.exp(1)
    assert math.isclose(p[0].item(), e / (e + 1), rel_tol=1e-12)


def test_topk_full_is_dense():
    x = torch.randn(5, 9, dtype=torch.float64)
    assert torch.equal(torch.softmax(topk_mask(x, 9), -1), torch.softmax(x, -1))
    assert torch.equal(torch.softmax(topk_mask(x, 50), -1), torch.softmax(x, -1))


def test_topk_one_is_onehot():
    x = torch.randn(6, 7, dtype=torch.float64)
    p = torch.softmax(topk_mask(x, 1), -1)
    assert torch.equal(p, torch.nn.functional.one_hot(x.argmax(-1), 7).double())


def test_topk_ties_lower_index():
    keep = topk_keep(torch.tensor([1.0, 2.0, 1.0, 1.0]), 2)
    assert keep.tolist() == [True, True, False, False]


def test_topk_respects_invalid_entries():
    x = torch.tensor([5.0, float("-inf"), 1.0])
    assert topk_keep(x, 3).tolist() == [True, False, True]
    assert int(topk_keep(torch.tensor([float("-inf"), 0.0, float("-inf")]), 2).sum()) == 1


def test_topk_errors():
    with pytest.raises(EmptyRowError):
        topk_keep(torch.full((2, 3), float("-inf")), 1)
    with pytest.raises(NumericalError):
        topk_keep(torch.tensor([0.0, float("nan")]), 1)
    with pytest.raises(ConfigError):
        topk_keep(torch.zeros(3), 0)


def test_cosine_topk_endpoints():
    assert cosine_topk(0, 100, (128, 64), (64, 32)) == (128, 64)
    assert cosine_topk(100, 100, (128, 64), (64, 32)) == (64, 32)
    assert cosine_topk(50, 100, (128, 64), (64, 32)) == (96, 48)
    ks = [cosine_topk(t, 100, (128, 64), (64, 32))[0] for t in range(101)]
    assert all(a >= b for a, b in zip(ks, ks[1:]))


# ---------------------------------------------------------------- dilation


def test_dilation_mask_pattern():
    m = dilation_mask(8, [(4, 2)])[0]
    assert m[0].tolist() == [True, False, True, False, False, False, False, False]
    assert m[5].tolist() == [False, False, False, False, False, True, False, True]


@pytest.mark.parametrize("n,patterns", [(10, [(4, 1)]), (17, [(8, 2), (4, 3)]), (7, [(16, 4)])])
def test_attention_pairs_matches_mask(n, patterns):
    assert _attention_pairs(n, patterns) == int(dilation_mask(n, patterns).sum())


def test_dilated_context_runs_with_padding():
    torch.manual_seed(0)
    cfg = _small(context_dilation=(((4, 1), (8, 2)), ((4, 2),)))
    m = build_resampler(cfg, dtype=torch.float64)
    x = torch.randn(2, 12, 16, dtype=torch.float64)
    mask = torch.ones(2, 12, dtype=torch.bool)
    mask[1, 7:] = False
    out = m(x, torch.zeros(2, 12, 2, dtype=torch.float64), mask)
    assert torch.isfinite(out.latents).all()
    assert float(out.attention.detach()[1, :, 7:].abs().max()) == 0.0


# ---------------------------------------------------------------- encode


@pytest.fixture(scope="module")
def model():
    return build_resampler(_small(), seed=3, dtype=torch.float64)


def test_encode_shapes_and_rows(model):
    b = encode(model, _slide())
    assert b.latents.shape == (1, 6, 16)
    assert b.attention.shape == (1, 6, 20)
    assert torch.allclose(b.attention.sum(-1), torch.ones(1, 6, dtype=torch.float64), atol=1e-6)
    for keep, k in zip(b.keep_masks, model.config.topk_end):
        assert int(keep.sum(-1).max()) <= k


def test_encode_head_rows_stochastic(model):
    x = torch.randn(1, 20, 16, dtype=torch.float64)
    c = torch.as_tensor(_slide().coords, dtype=torch.float64)[None]
    h = x
    mask = torch.ones(1, 20, dtype=torch.bool)
    for layer in model.context:
        h = layer(h, mask)
    keys = h + model.positional(c)
    z = model.latents.expand(1, -1, -1)
    _, probs, keep = model.blocks[0].cross(model.blocks[0].norm_q(z), keys, h, key_mask=mask, k_top=3)
    assert torch.allclose(probs.sum(-1), torch.ones_like(probs.sum(-1)), atol=1e-6)
    assert int((probs > 0).sum(-1).max()) <= 3


def test_single_token(model):
    s = TileFeatureSet("one", np.ones((1, 16)), [(4, 4)])
    b = encode(model, s, k_tops=(5, 5))
    assert torch.equal(b.attention, torch.ones(1, 6, 1, dtype=torch.float64))


def test_permutation_invariance(model):
    s = _slide(seed=1)
    perm = np.random.default_rng(2).permutation(s.n_tiles)
    t = TileFeatureSet("p", s.features[perm], s.coords[perm])
    a, b = encode(model, s), encode(model, t)
    assert torch.allclose(a.latents, b.latents, atol=1e-6)
    assert torch.allclose(a.attention[..., perm], b.attention, atol=1e-6)


def test_padding_invariance(model):
    s = _slide(seed=4)
    x = torch.zeros(1, 27, 16, dtype=torch.float64)
    x[0, :20] = torch.as_tensor(s.features)
    x[0, 20:] = 1e3
    c = torch.zeros(1, 27, 2, dtype=torch.float64)
    c[0, :20] = torch.as_tensor(s.coords, dtype=torch.float64)
    mask = torch.zeros(1, 27, dtype=torch.bool)
    mask[0, :20] = True
    padded = model(x, c, mask)
    plain = encode(model, s)
    assert torch.allclose(padded.latents, plain.latents, atol=1e-9)
    assert float(padded.attention[0, :, 20:].detach().abs().max()) == 0.0


def test_pe_only_on_keys(model):
    # moving tiles changes attention via keys; values ignore position
    s = _slide(seed=5)
    moved = TileFeatureSet("m", s.features, s.coords + 100)
    assert not torch.allclose(encode(model, s).attention, encode(model, moved).attention)


def test_nan_input_fails_fast(model):
    x = torch.randn(1, 5, 16, dtype=torch.float64)
    x[0, 0, 0] = float("nan")
    with pytest.raises(NumericalError):
        model(x, torch.zeros(1, 5, 2, dtype=torch.float64))


def test_build_deterministic():
    a = build_resampler(_small(), seed=9)
    b = build_resampler(_small(), seed=9)
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))


# ---------------------------------------------------------------- metrics


def _bundle(att, mask=None):
    att = torch.as_tensor(att, dtype=torch.float64)
    if mask is None:
        mask = torch.ones(att.shape[0], att.shape[-1], dtype=torch.bool)
    return LatentBundle(torch.zeros(1), att, mask)


def test_coverage_uniform():
    assert coverage_metric(_bundle(torch.full((1, 4, 100), 0.01))) == 1.0


def test_coverage_single_token():
    att = torch.zeros(1, 5, 8)
    att[..., 0] = 1.0
    assert coverage_metric(_bundle(att)) == pytest.approx(1 / 8)


def test_coverage_k1_identical_queries():
    # one head, so every latent's single kept token is the same
    cfg = _small(n_latents=4, heads=1)
    m = build_resampler(cfg, dtype=torch.float64)
    with torch.no_grad():
        m.latents.copy_(m.latents[0].expand_as(m.latents))
    b = encode(m, _slide(n=12), k_tops=(1, 1))
    assert coverage_metric(b) == pytest.approx(1 / 12)


def test_coverage_ignores_padding():
    att = torch.tensor([[[0.5, 0.5, 0.0, 0.0]]])
    mask = torch.tensor([[True, True, False, False]])
    assert coverage_metric(_bundle(att, mask)) == 1.0


def test_diversity_identical_and_orthogonal():
    mean, std = diversity_metric(torch.ones(4, 3))
    assert mean == pytest.approx(1.0) and std == pytest.approx(0.0, abs=1e-12)
    assert diversity_metric(torch.eye(5))[0] == pytest.approx(0.0)


def test_diversity_hand_fixture():
    Z = torch.tensor([[1.0, 0.0], [1.0, 1.0], [0.0, -1.0]])
    pairs = [1 / math.sqrt(2), 0.0, -1 / math.sqrt(2)]
    mean, std = diversity_metric(Z)
    assert mean == pytest.approx(np.mean(pairs), abs=1e-12)
    assert std == pytest.approx(np.std(pairs), abs=1e-7)
    assert diversity_metric(Z, absolute=True)[0] == pytest.approx(np.mean(np.abs(pairs)), abs=1e-7)


def test_diversity_errors():
    with pytest.raises(DegenerateLatentError):
        diversity_metric(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ConfigError):
        diversity_metric(torch.ones(1, 3))


# ---------------------------------------------------------------- flops


def test_encode_flops_monotone_and_sparse():
    dense = ResamplerConfig()
    sparse = ResamplerConfig.paper()
    assert encode_flops(dense, 4096) < encode_flops(dense, 16384)
    assert encode_flops(sparse, 16384) < encode_flops(dense, 16384)
