import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from gradcheck import fd_errors, fusion_fixture
from slidecompress.errors import ConfigError
from slidecompress.fusion import (
    IGNORE,
    CaraLayer,
    FusionConfig,
    Projector,
    ToyLmConfig,
    TokenImportanceScorer,
    build_stack,
    cara_layer,
    forward_fused,
    lm_loss,
    pooled_question,
    rank_loss,
    teacher_distribution,
    text_batch,
    tis_loss,
    top_m,
)
from slidecompress.slide_io import ToyVqaSample

D = torch.float64


def _stack(route_m=4, n_latents=8, gamma=None, seed=0):
    lm = ToyLmConfig(depth=4, width=32, heads=4, vocab=24, max_context=16, cara_layers=(1, 3))
    st = build_stack(FusionConfig(latent_dim=16, n_latents=n_latents, route_m=route_m, lm=lm), seed=seed, dtype=D)
    if gamma is not None:
        with torch.no_grad():
            for c in st.cara.values():
                c.gamma.fill_(gamma)
    return st


def _samples():
    return [
        ToyVqaSample("a", [1, 4, 5, 6, 3], [17, 18], vocab_size=24),
        ToyVqaSample("b", [1, 4, 7, 3], [19], vocab_size=24),
    ]


def _Z(seed=0, B=2, L=8):
    return torch.randn(B, L, 16, generator=torch.Generator().manual_seed(seed), dtype=D)


# ---------------------------------------------------------------- config


def test_config_defaults():
    c = FusionConfig()
    assert (c.route_m, c.lambda_tis, c.lambda_rank, c.margin, c.n_pairs) == (96, 0.02, 0.02, 0.05, 8)
    assert c.lm.cara_layers == (1, 3, 5, 7) and c.lm.d_ff == 256


@pytest.mark.parametrize(
    "kw", [dict(route_m=300), dict(route_m=0), dict(lm=dict(width=30, heads=4)), dict(lm=dict(depth=4, cara_layers=(1, 5)))]
)
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        FusionConfig(**kw)


def test_config_round_trip():
    c = FusionConfig(route_m=8, n_latents=16)
    assert FusionConfig.from_dict(c.to_dict()) == c


# ---------------------------------------------------------------- projector


def test_projector_zero():
    p = Projector(3, 2).double()
    with torch.no_grad():
        for q in p.parameters():
            q.zero_()
    assert torch.equal(p(torch.randn(4, 3, dtype=D)), torch.zeros(4, 2, dtype=D))


def test_projector_hand_2x2():
    p = Projector(2, 2).double()
    with torch.no_grad():
        p.fc1.weight.copy_(torch.tensor([[1.0, 2.0], [0.0, -1.0]]))
        p.fc1.bias.zero_()
        p.fc2.weight.copy_(torch.tensor([[1.0, 0.0], [1.0, 1.0]]))
        p.fc2.bias.zero_()
    z = torch.tensor([[1.0, 1.0]], dtype=D)
    # hidden (3, -1) -> GELU -> second layer
    g3 = 3 * 0.5 * (1 + math.erf(3 / math.sqrt(2)))
    gm1 = -1 * 0.5 * (1 + math.erf(-1 / math.sqrt(2)))
    assert torch.allclose(p(z), torch.tensor([[g3, g3 + gm1]], dtype=D), atol=1e-12)


def test_projector_row_permutation():
    p = Projector(5, 4).double()
    z = torch.randn(6, 5, dtype=D)
    perm = torch.randperm(6)
    assert torch.equal(p(z)[perm], p(z[perm]))


# ---------------------------------------------------------------- TIS


def test_tis_hand_fixture():
    tis = TokenImportanceScorer(2, 2).double()
    with torch.no_grad():
        tis.W_v.weight.copy_(torch.tensor([[1.0, 0.0], [0.5, -1.0]]))
        tis.W_q.weight.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0]]))
        tis.w.weight.copy_(torch.tensor([[1.0, -2.0]]))
    V = torch.tensor([[[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0]]], dtype=D)
    q = torch.tensor([[0.2, -0.4]], dtype=D)
    gelu = lambda x: 0.5 * x * (1 + math.erf(x / math.sqrt(2)))  # noqa: E731
    want = []
    for v in V[0].tolist():
        a0 = gelu(v[0] + q[0, 1].item())
        a1 = gelu(0.5 * v[0] - v[1] + q[0, 0].item())
        want.append(a0 - 2 * a1)
    assert np.allclose(tis(V, q)[0].detach().numpy(), want, atol=1e-12)


def test_top_m_tie_break_and_order():
    s = torch.tensor([[0.0, 0.0, 0.0, 0.0, 0.0]])
    assert top_m(s, 3).tolist() == [[0, 1, 2]]
    s = torch.tensor([[0.1, 0.9, 0.5, 0.9, -1.0]])
    assert top_m(s, 3).tolist() == [[1, 2, 3]]
    assert top_m(s, 5).tolist() == [[0, 1, 2, 3, 4]]
    with pytest.raises(ConfigError):
        top_m(s, 6)


def test_top_m_shift_invariance():
    g = torch.Generator().manual_seed(1)
    for _ in range(50):
        s = torch.randn(3, 12, generator=g, dtype=D)
        c = float(torch.randn(1, generator=g)) * 100
        assert torch.equal(top_m(s, 5), top_m(s + c, 5))


def test_zero_w_selects_first():
    st = _stack()
    with torch.no_grad():
        st.tis.w.weight.zero_()
    out = forward_fused(st, _Z(), _samples())
    assert out.routing.indices.tolist() == [[0, 1, 2, 3]] * 2


def test_route_all_latents():
    st = _stack(route_m=8)
    out = forward_fused(st, _Z(), _samples())
    assert out.routing.indices.tolist() == [list(range(8))] * 2
    assert torch.isfinite(out.parts.l_tis)


def test_pooled_question_is_embedding_mean():
    st = _stack()
    b = text_batch(_samples())
    q = pooled_question(st, b)
    want = st.lm.tok_emb.weight[[1, 4, 7, 3]].mean(0)
    assert torch.allclose(q[1], want, atol=1e-14)


# ---------------------------------------------------------------- CARA


def test_cara_closed_gate_identity():
    layer = CaraLayer(8, 2).double()
    H = torch.randn(1, 5, 8, dtype=D)
    out, alpha = layer(H, torch.randn(1, 3, 8, dtype=D))
    assert torch.equal(out, H)
    assert alpha.shape == (1, 2, 5, 3)


def test_cara_single_key():
    layer = CaraLayer(8, 2).double()
    _, alpha = cara_layer(torch.randn(4, 8, dtype=D), torch.randn(1, 8, dtype=D), layer)
    assert torch.equal(alpha, torch.ones(2, 4, 1, dtype=D))


def test_cara_straight_line_oracle():
    torch.manual_seed(3)
    layer = CaraLayer(8, 2).double()
    with torch.no_grad():
        layer.gamma.fill_(0.4)
        layer.ln.weight.normal_()
        layer.ln.bias.normal_()
    H, V = torch.randn(5, 8, dtype=D), torch.randn(3, 8, dtype=D)
    got, alpha = cara_layer(H, V, layer)
    # independent recomputation with explicit per-head loops
    mu = H.mean(-1, keepdim=True)
    var = ((H - mu) ** 2).mean(-1, keepdim=True)
    ln = (H - mu) / torch.sqrt(var + 1e-5) * layer.ln.weight + layer.ln.bias
    Q, K, Vv = ln @ layer.to_q.weight.T, V @ layer.to_k.weight.T, V @ layer.to_v.weight.T
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        logits = Q[:, sl] @ K[:, sl].T / 2.0
        a = torch.exp(logits - logits.max(-1, keepdim=True).values)
        a = a / a.sum(-1, keepdim=True)
        assert torch.allclose(alpha[h], a, atol=1e-12)
        heads.append(a @ Vv[:, sl])
    want = H + math.tanh(0.4) * (torch.cat(heads, -1) @ layer.to_out.weight.T)
    assert torch.allclose(got, want, atol=1e-12)
    assert torch.allclose(alpha.sum(-1), torch.ones(2, 5, dtype=D), atol=1e-12)


def test_gate_closed_fused_equals_text_only():
    st = _stack()
    out = forward_fused(st, _Z(), _samples())
    text_only = st.lm(text_batch(_samples()).tokens)
    assert torch.equal(out.logits, text_only)


def test_alpha_shapes():
    st = _stack(gamma=0.5)
    out = forward_fused(st, _Z(), _samples())
    T = text_batch(_samples()).tokens.shape[1]
    assert len(out.alphas) == 2
    assert all(a.shape == (2, 4, T, 4) for a in out.alphas)


def test_text_never_sees_latents_without_cara():
    lm = ToyLmConfig(depth=2, width=32, heads=4, vocab=24, max_context=16, cara_layers=())
    st = build_stack(FusionConfig(latent_dim=16, n_latents=8, route_m=4, lm=lm), dtype=D)
    a = forward_fused(st, _Z(0), _samples()).logits
    b = forward_fused(st, _Z(1), _samples()).logits
    assert torch.equal(a, b)


# ---------------------------------------------------------------- teacher


def test_teacher_singletons():
    a = torch.tensor([0.2, 0.5, 0.3], dtype=D).view(1, 1, 1, 3)
    assert torch.allclose(teacher_distribution([a], tau_t=0.5)[0], torch.softmax(a.view(3) / 0.5, -1))


def test_teacher_uniform():
    a = torch.full((2, 3, 4, 5), 0.2, dtype=D)
    assert torch.allclose(teacher_distribution([a, a]), torch.full((2, 5), 0.2, dtype=D))


def test_teacher_two_layers_hand():
    a1 = torch.tensor([[[[0.6, 0.4], [0.2, 0.8]]]], dtype=D)  # (1, 1, T=2, M=2)
    a2 = torch.tensor([[[[1.0, 0.0], [0.5, 0.5]]]], dtype=D)
    mean = [(0.6 + 0.2 + 1.0 + 0.5) / 4, (0.4 + 0.8 + 0.0 + 0.5) / 4]
    e = np.exp(mean)
    assert np.allclose(teacher_distribution([a1, a2])[0].numpy(), e / e.sum(), atol=1e-15)


def test_teacher_valid_positions():
    a = torch.tensor([[[[0.9, 0.1], [0.0, 1.0]]]], dtype=D)
    t = teacher_distribution([a], valid=torch.tensor([[True, False]]))
    assert torch.allclose(t[0], torch.softmax(torch.tensor([0.9, 0.1], dtype=D), -1))


def test_teacher_detached():
    st = _stack(gamma=0.5)
    out = forward_fused(st, _Z(), _samples())
    assert not out.teacher.requires_grad
    # perturbing CARA inputs changes t but the loss has no path through it
    q = st.cara["1"].to_q.weight
    g = torch.autograd.grad(out.parts.l_tis, q, allow_unused=True)[0]
    assert g is None or float(g.abs().max()) == 0.0
    with torch.no_grad():
        q.add_(0.5)
    assert not torch.equal(forward_fused(st, _Z(), _samples()).teacher, out.teacher)


# ---------------------------------------------------------------- losses


def test_tis_loss_identity():
    s = torch.randn(3, 6, dtype=D)
    assert float(tis_loss(torch.softmax(s, -1), s)) == pytest.approx(0.0, abs=1e-15)


def test_tis_loss_log2():
    t = torch.tensor([[1.0, 0.0]], dtype=D)
    assert float(tis_loss(t, torch.zeros(1, 2, dtype=D))) == pytest.approx(math.log(2), abs=1e-15)


def test_tis_loss_temperature_limit():
    t = teacher_distribution([torch.tensor([1.0, 0.0], dtype=D).view(1, 1, 1, 2)], tau_t=1e-3)
    assert float(tis_loss(t, torch.zeros(1, 2, dtype=D))) == pytest.approx(math.log(2), abs=1e-12)


def test_tis_loss_nonnegative():
    g = torch.Generator().manual_seed(0)
    t = torch.softmax(torch.randn(1000, 5, generator=g, dtype=D) * 3, -1)
    s = torch.randn(1000, 5, generator=g, dtype=D) * 3
    log_p = torch.log_softmax(s, -1)
    kl = (t * (t.log() - log_p)).sum(-1)
    assert float(kl.min()) >= 0
    assert float(tis_loss(t, s)) == pytest.approx(float(kl.mean()))


def test_rank_fixture_zero():
    q = torch.tensor([0.4, 0.3, 0.2, 0.1], dtype=D)
    s = torch.tensor([1.0, 0.9, 0.5, 0.45], dtype=D)
    assert float(rank_loss(q, s, margin=0.1, n_pairs=8)) == 0.0


def test_rank_fixture_margin():
    q = torch.tensor([0.4, 0.3, 0.2, 0.1], dtype=D)
    assert float(rank_loss(q, torch.full((4,), 0.7, dtype=D), margin=0.1, n_pairs=8)) == pytest.approx(0.1, abs=1e-15)


def test_rank_zero_margin_ordered():
    q = torch.tensor([0.1, 0.5, 0.2, 0.15, 0.05], dtype=D)
    assert float(rank_loss(q, q * 3, margin=0.0)) == 0.0


def test_rank_degenerate_teacher():
    q = torch.full((6,), 1 / 6, dtype=D)
    assert float(rank_loss(q, torch.randn(6, dtype=D), margin=1.0)) == 0.0


def test_rank_gap_weighting():
    # teacher order 0,1,3,2: pairs (0,3) gap 0.3 hinge 0.2 and (1,2) gap 0.2 hinge 0
    q = torch.tensor([0.5, 0.3, 0.1, 0.2], dtype=D)
    s = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=D)
    assert float(rank_loss(q, s, margin=0.2)) == pytest.approx(0.3 * 0.2 / 0.5)


def test_rank_needs_two():
    with pytest.raises(ConfigError):
        rank_loss(torch.ones(1), torch.ones(1))


def test_lm_loss_uniform():
    logits = torch.zeros(2, 3, 64, dtype=D)
    targets = torch.tensor([[5, IGNORE, 7], [IGNORE, IGNORE, 1]])
    assert float(lm_loss(logits, targets)) == pytest.approx(math.log(64), abs=1e-12)


def test_lm_loss_hand_two_tokens():
    logits = torch.tensor([[[2.0, 0.0, 1.0], [0.0, 3.0, 0.0]]], dtype=D)
    targets = torch.tensor([[0, 2]])
    ce0 = -2.0 + math.log(math.exp(2) + 1 + math.e)
    ce1 = -0.0 + math.log(2 + math.exp(3))
    assert float(lm_loss(logits, targets)) == pytest.approx((ce0 + ce1) / 2, abs=1e-12)


def test_lm_loss_near_zero_for_confident():
    logits = F.one_hot(torch.tensor([[3, 1]]), 5).double() * 100
    assert float(lm_loss(logits, torch.tensor([[3, 1]]))) < 1e-40


def test_text_batch_targets():
    b = text_batch(_samples())
    assert b.tokens[0].tolist() == [1, 4, 5, 6, 3, 17]
    assert b.targets[0].tolist() == [IGNORE] * 4 + [17, 18]
    assert b.targets[1].tolist() == [IGNORE] * 3 + [19, IGNORE, IGNORE]
    assert b.question[1].tolist() == [True] * 4 + [False] * 2


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("loss", ["l_lm", "l_tis", "l_rank"])
def test_fusion_gradients(loss):
    stack, losses = fusion_fixture()
    errors = fd_errors(losses[loss], list(stack.named_parameters()), per_tensor=2)
    assert not {k: v for k, v in errors.items() if v >= 1e-4}


def test_lm_loss_does_not_reach_tis():
    stack, losses = fusion_fixture()
    tis = list(stack.tis.named_parameters())
    grads = torch.autograd.grad(losses["l_lm"](), [p for _, p in tis], allow_unused=True)
    assert all(g is None or float(g.abs().max()) == 0.0 for g in grads)
    with torch.no_grad():
        for _, p in tis:
            base = float(losses["l_lm"]())
            p.view(-1)[0] += 1e-5
            assert abs(float(losses["l_lm"]()) - base) < 1e-12
            p.view(-1)[0] -= 1e-5


def test_fused_deterministic():
    a = forward_fused(_stack(gamma=0.3), _Z(), _samples()).parts.scalars()
    b = forward_fused(_stack(gamma=0.3), _Z(), _samples()).parts.scalars()
    assert a == b


def test_total_loss_weights():
    p = forward_fused(_stack(gamma=0.3), _Z(), _samples()).parts
    sc = p.scalars()
    assert sc["total"] == pytest.approx(sc["l_lm"] + 0.02 * sc["l_tis"] + 0.02 * sc["l_rank"], abs=1e-12)
