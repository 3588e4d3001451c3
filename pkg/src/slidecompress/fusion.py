"""Routed cross-attention fusion into a small causal language model.

Latents are projected to the LM width, a token importance scorer (TIS)
picks the ``M`` latents most relevant to the question, and gated
cross-attention adapters (CARA) inject them at selected decoder layers::

    s_i = w^T GELU(W_v v_i + W_q q~)          I = top-M(s)
    H~ = H + tanh(gamma) * Attn(LN(H), V_I, V_I)

The text stream never self-attends to visual tokens. The TIS is trained by
distillation from CARA attention (KL) plus a pairwise margin ranking loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .slide_io import PAD

IGNORE = -100


@dataclass
class ToyLmConfig:
    depth: int = 8
    width: int = 64
    heads: int = 4
    d_ff: int | None = None
    vocab: int = 64
    max_context: int = 64
    cara_layers: tuple = (1, 3, 5, 7)

    def __post_init__(self):
        self.cara_layers = tuple(sorted(int(x) for x in self.cara_layers))
        if self.d_ff is None:
            self.d_ff = 4 * self.width
        if self.width % self.heads:
            raise ConfigError(f"width={self.width} is not divisible by heads={self.heads}")
        if any(not 0 <= x < self.depth for x in self.cara_layers):
            raise ConfigError(f"cara_layers {self.cara_layers} outside [0, {self.depth})")


@dataclass
class FusionConfig:
    latent_dim: int = 512
    n_latents: int = 256
    route_m: int = 96
    tis_dim: int | None = None
    tau_s: float = 1.0
    tau_t: float = 1.0
    lambda_tis: float = 0.02
    lambda_rank: float = 0.02
    margin: float = 0.05
    n_pairs: int = 8
    lm: ToyLmConfig = field(default_factory=ToyLmConfig)

    def __post_init__(self):
        if isinstance(self.lm, dict):
            self.lm = ToyLmConfig(**self.lm)
        if self.route_m > self.n_latents:
            raise ConfigError(f"route_m={self.route_m} exceeds n_latents={self.n_latents}")
        if self.route_m < 1:
            raise ConfigError("route_m must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --------------------------------------------------------------------------
# toy language model


class CausalSelfAttention(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)

    def forward(self, x, cache=None):
        B, T, d = x.shape
        h = self.heads
        q, k, v = self.qkv(x).view(B, T, 3, h, d // h).permute(2, 0, 3, 1, 4)
        if cache is not None and cache.get("k") is not None:
            k = torch.cat([cache["k"], k], dim=2)
            v = torch.cat([cache["v"], v], dim=2)
        if cache is not None:
            cache["k"], cache["v"] = k, v
        S = k.shape[2]
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        # query j of this chunk sits at absolute position S - T + j
        causal = torch.ones(T, S, dtype=torch.bool).tril(diagonal=S - T)
        scores = scores.masked_fill(~causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, T, d))


class Block(nn.Module):
    def __init__(self, d, heads, d_ff):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = CausalSelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, d_ff), nn.GELU(), nn.Linear(d_ff, d))

    def forward(self, x, cache=None):
        x = x + self.attn(self.ln1(x), cache)
        return x + self.mlp(self.ln2(x))


class ToyLM(nn.Module):
    """Pre-norm causal decoder with learned positions and an untied head."""

    def __init__(self, config: ToyLmConfig):
        super().__init__()
        c = self.config = config
        self.tok_emb = nn.Embedding(c.vocab, c.width)
        self.pos_emb = nn.Embedding(c.max_context, c.width)
        self.blocks = nn.ModuleList(Block(c.width, c.heads, c.d_ff) for _ in range(c.depth))
        self.ln_f = nn.LayerNorm(c.width)
        self.head = nn.Linear(c.width, c.vocab, bias=False)

    def forward(self, tokens, prefix=None, hook=None, caches=None, start=0):
        """Logits for ``tokens`` (B, T).

        ``prefix`` (B, P, d) is prepended as input embeddings; ``hook(layer,
        h)`` is applied to the hidden state before each block; ``caches`` is
        a list of per-layer dicts for incremental decoding from ``start``.
        """
        x = self.tok_emb(tokens)
        if prefix is not None:
            x = torch.cat([prefix, x], dim=1)
        n = x.shape[1]
        if start + n > self.config.max_context:
            raise ConfigError(f"sequence of {start + n} exceeds max_context={self.config.max_context}")
        x = x + self.pos_emb(torch.arange(start, start + n))
        for i, block in enumerate(self.blocks):
            if hook is not None:
                x = hook(i, x)
            x = block(x, None if caches is None else caches[i])
        return self.head(self.ln_f(x))

    def new_caches(self):
        return [{} for _ in self.blocks]


# --------------------------------------------------------------------------
# fusion components


class Projector(nn.Module):
    def __init__(self, in_dim, out_dim):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, z):
        return self.fc2(F.gelu(self.fc1(z)))


@dataclass
class RoutingResult:
    scores: torch.Tensor  # (B, L)
    indices: torch.Tensor  # (B, M), ascending
    tau_s: float = 1.0
    tau_t: float = 1.0

    @property
    def selected_scores(self):
        return self.scores.gather(-1, self.indices)


def top_m(scores, m):
    """Indices of the ``m`` largest scores per row, ties to the lower index,
    returned in ascending order."""
    L = scores.shape[-1]
    if m > L:
        raise ConfigError(f"M={m} exceeds L={L}")
    order = torch.sort(scores.detach(), dim=-1, descending=True, stable=True).indices[..., :m]
    return order.sort(dim=-1).values


class TokenImportanceScorer(nn.Module):
    def __init__(self, d, d_a=None):
        super().__init__()
        d_a = d_a or d
        self.W_v = nn.Linear(d, d_a, bias=False)
        self.W_q = nn.Linear(d, d_a, bias=False)
        self.w = nn.Linear(d_a, 1, bias=False)

    def forward(self, V, q):
        """Scores (B, L) for projected latents ``V`` (B, L, d) and pooled text ``q`` (B, d)."""
        a = F.gelu(self.W_v(V) + self.W_q(q)[:, None, :])
        return self.w(a).squeeze(-1)


class CaraLayer(nn.Module):
    """Gated text-to-vision cross-attention; the gate is tanh(gamma), gamma=0 at init."""

    def __init__(self, d, heads):
        super().__init__()
        self.heads = heads
        self.ln = nn.LayerNorm(d)
        self.to_q = nn.Linear(d, d, bias=False)
        self.to_k = nn.Linear(d, d, bias=False)
        self.to_v = nn.Linear(d, d, bias=False)
        self.to_out = nn.Linear(d, d, bias=False)
        self.gamma = nn.Parameter(torch.zeros(()))

    @property
    def gate(self):
        return torch.tanh(self.gamma)

    def kv(self, V_sel):
        B, M, d = V_sel.shape
        h = self.heads
        k = self.to_k(V_sel).view(B, M, h, d // h).transpose(1, 2)
        v = self.to_v(V_sel).view(B, M, h, d // h).transpose(1, 2)
        return k, v

    def forward(self, H, V_sel=None, kv=None):
        """Returns (H~, alpha) with alpha of shape (B, heads, T, M)."""
        B, T, d = H.shape
        h = self.heads
        k, v = kv if kv is not None else self.kv(V_sel)
        q = self.to_q(self.ln(H)).view(B, T, h, d // h).transpose(1, 2)
        alpha = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // h), dim=-1)
        out = self.to_out((alpha @ v).transpose(1, 2).reshape(B, T, d))
        return H + self.gate * out, alpha


def cara_layer(H, V_sel, layer: CaraLayer):
    """Unbatched convenience: H (T, d), V_sel (M, d) -> (H~ (T, d), alpha (H, T, M))."""
    out, alpha = layer(H[None], V_sel[None])
    return out[0], alpha[0]


class FusionStack(nn.Module):
    def __init__(self, config: FusionConfig):
        super().__init__()
        self.config = config
        d = config.lm.width
        self.projector = Projector(config.latent_dim, d)
        self.tis = TokenImportanceScorer(d, config.tis_dim)
        self.cara = nn.ModuleDict({str(i): CaraLayer(d, config.lm.heads) for i in config.lm.cara_layers})
        self.lm = ToyLM(config.lm)


def build_stack(config: FusionConfig, seed=0, dtype=torch.float32) -> FusionStack:
    from .seeding import sub_seed

    torch.manual_seed(sub_seed(seed, "fusion-init"))
    return FusionStack(config).to(dtype)


# --------------------------------------------------------------------------
# text batches


@dataclass
class TextBatch:
    tokens: torch.Tensor  # (B, T) input ids, PAD on the right
    valid: torch.Tensor  # (B, T)
    question: torch.Tensor  # (B, T) question positions
    targets: torch.Tensor  # (B, T) next-token targets, IGNORE outside answers
    answers: list


def text_batch(samples) -> TextBatch:
    """Teacher-forced inputs: question followed by all but the last answer token."""
    seqs, qlens = [], []
    for s in samples:
        q = list(np.asarray(s.question_tokens))
        a = list(np.asarray(s.answer_tokens))
        seqs.append(q + a[:-1])
        qlens.append(len(q))
    B, T = len(seqs), max(len(x) for x in seqs)
    tokens = torch.full((B, T), PAD, dtype=torch.long)
    valid = torch.zeros(B, T, dtype=torch.bool)
    question = torch.zeros(B, T, dtype=torch.bool)
    targets = torch.full((B, T), IGNORE, dtype=torch.long)
    for b, (seq, ql, s) in enumerate(zip(seqs, qlens, samples)):
        tokens[b, : len(seq)] = torch.as_tensor(seq)
        valid[b, : len(seq)] = True
        question[b, :ql] = True
        a = np.asarray(s.answer_tokens)
        targets[b, ql - 1 : ql - 1 + len(a)] = torch.as_tensor(a)
    return TextBatch(tokens, valid, question, targets, [np.asarray(s.answer_tokens) for s in samples])


# --------------------------------------------------------------------------
# losses


@dataclass
class FusionLossParts:
    l_lm: torch.Tensor
    l_tis: torch.Tensor
    l_rank: torch.Tensor
    total: torch.Tensor
    lambda_tis: float = 0.02
    lambda_rank: float = 0.02

    def scalars(self):
        return {k: float(getattr(self, k).detach()) for k in ("l_lm", "l_tis", "l_rank", "total")}


def lm_loss(logits, targets):
    """Mean cross-entropy over positions whose target is not IGNORE."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)


def teacher_distribution(alphas, valid=None, tau_t=1.0):
    """Detached teacher over the routed set from CARA attention.

    ``alphas`` is a list over layers of (B, H, T, M); averaging runs over
    layers, heads and valid text positions before a softmax at ``tau_t``.
    """
    A = torch.stack([a.detach() for a in alphas]).mean(0)  # (B, H, T, M)
    A = A.mean(1)  # (B, T, M)
    if valid is None:
        a = A.mean(1)
    else:
        w = valid.to(A.dtype)[..., None]
        a = (A * w).sum(1) / w.sum(1)
    return torch.softmax(a / tau_t, dim=-1)


def tis_loss(t, s_sel, tau_s=1.0):
    """Batch-mean KL(t || softmax(s / tau_s))."""
    log_p = torch.log_softmax(s_sel / tau_s, dim=-1)
    log_t = torch.log(t.clamp_min(torch.finfo(t.dtype).tiny))
    kl = torch.where(t > 0, t * (log_t - log_p), torch.zeros_like(t))
    return kl.sum(-1).mean()


def rank_loss(q, s, margin=0.05, n_pairs=8):
    """Gap-weighted pairwise hinge between the teacher's top and middle ranks.

    Pairs the k-th of the teacher's top ``n`` with the k-th starting at
    position M // 2, ``n = min(M // 2, n_pairs)``. Weights are gaps over
    their mean; a batch row with all gaps zero contributes 0.
    """
    q = torch.as_tensor(q)
    s = torch.as_tensor(s)
    if q.dim() == 1:
        q, s = q[None], s[None]
    M = q.shape[-1]
    if M < 2:
        raise ConfigError("ranking needs M >= 2")
    n = min(M // 2, n_pairs)
    order = torch.sort(q.detach(), dim=-1, descending=True, stable=True).indices
    hi, lo = order[:, :n], order[:, M // 2 : M // 2 + n]
    gap = (q.gather(-1, hi) - q.gather(-1, lo)).detach().clamp_min(0)
    hinge = torch.relu(margin - (s.gather(-1, hi) - s.gather(-1, lo)))
    total = gap.sum(-1)
    safe = torch.where(total > 0, total, torch.ones_like(total))
    # mean(w * hinge) with w = gap / mean(gap) equals sum(gap * hinge) / sum(gap)
    per_row = torch.where(total > 0, (gap * hinge).sum(-1) / safe, torch.zeros_like(total))
    return per_row.mean()


# --------------------------------------------------------------------------
# fused forward


@dataclass
class FusedOutput:
    logits: torch.Tensor
    routing: RoutingResult
    parts: FusionLossParts
    alphas: list
    teacher: torch.Tensor


def pooled_question(stack: FusionStack, batch: TextBatch):
    emb = stack.lm.tok_emb(batch.tokens)
    w = batch.question.to(emb.dtype)[..., None]
    return (emb * w).sum(1) / w.sum(1)


def route(stack: FusionStack, Z, batch: TextBatch, indices=None):
    """Project latents and score them; returns (V, RoutingResult)."""
    c = stack.config
    V = stack.projector(Z)
    s = stack.tis(V, pooled_question(stack, batch))
    idx = top_m(s, c.route_m) if indices is None else indices
    return V, RoutingResult(s, idx, c.tau_s, c.tau_t)


def forward_fused(stack: FusionStack, Z, batch, indices=None, teacher=None) -> FusedOutput:
    """Full fused forward with all three losses.

    ``Z`` is (B, L, D'). ``batch`` is a TextBatch or a list of samples.
    ``indices``/``teacher`` override the routing set and teacher (used to
    hold discrete structure fixed when checking gradients).
    """
    if not isinstance(batch, TextBatch):
        batch = text_batch(batch)
    c = stack.config
    V, routing = route(stack, Z, batch, indices)
    V_sel = V.gather(1, routing.indices[..., None].expand(-1, -1, V.shape[-1]))
    alphas = []

    def hook(i, h):
        layer = stack.cara[str(i)] if str(i) in stack.cara else None
        if layer is None:
            return h
        h, alpha = layer(h, V_sel)
        alphas.append(alpha)
        return h

    logits = stack.lm(batch.tokens, hook=hook)
    if teacher is not None:
        t = teacher
    elif alphas:
        t = teacher_distribution(alphas, batch.valid, c.tau_t)
    else:
        # no adapter layers: nothing to distil from, fall back to uniform
        t = torch.full(routing.indices.shape, 1.0 / routing.indices.shape[-1], dtype=V.dtype)
    s_sel = routing.selected_scores
    l_lm = lm_loss(logits, batch.targets)
    l_tis = tis_loss(t, s_sel, c.tau_s)
    l_rank = rank_loss(t, s_sel, c.margin, c.n_pairs) if c.route_m >= 2 else s_sel.new_zeros(())
    total = l_lm + c.lambda_tis * l_tis + c.lambda_rank * l_rank
    parts = FusionLossParts(l_lm, l_tis, l_rank, total, c.lambda_tis, c.lambda_rank)
    return FusedOutput(logits, routing, parts, alphas, t)


def predict(stack: FusionStack, Z, batch: TextBatch):
    """Greedy predictions at every answer position (teacher-forced inputs)."""
    with torch.no_grad():
        out = forward_fused(stack, Z, batch)
    pred = out.logits.argmax(-1)
    mask = batch.targets != IGNORE
    correct = ((pred == batch.targets) | ~mask).all(-1)
    return pred, correct
