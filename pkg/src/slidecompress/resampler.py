"""Top-K cross-attention resampler.

Tokens pass through context (self-attention) layers, then ``L`` learnable
latent queries attend to them through stacked blocks::

    K = (X_ctx + PE) W_k,  V = X_ctx W_v
    Z' = Z + softmax(TopK(LN(Z) W_q K^T / sqrt(d_h))) V W_o
    Z'' = Z' + FFN(LN(Z'))
    Z''' = Z'' + SelfAttn(LN(Z''))

TopK keeps the largest ``k_top`` logits per head and per latent and sets the
rest to -inf. A small decoder (mask token + PE queries cross-attending to the
latents) reconstructs masked tokens for MAE pretraining.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DegenerateLatentError, EmptyRowError, NumericalError
from .seeding import sub_seed


@dataclass
class ResamplerConfig:
    in_dim: int = 512
    dim: int = 512
    n_latents: int = 256
    heads: int = 8
    context_layers: int = 2
    context_heads: int | None = None
    # per context layer: sequence of (segment_length, stride); None means dense
    context_dilation: tuple | None = None
    cross_blocks: int = 2
    topk_start: tuple = (128, 64)
    topk_end: tuple = (64, 32)
    fourier_bands: int = 8
    max_wavelength: float = 4096.0
    ffn_mult: int = 4
    decoder_layers: int = 2

    def __post_init__(self):
        self.topk_start = tuple(int(k) for k in self.topk_start)
        self.topk_end = tuple(int(k) for k in self.topk_end)
        if self.context_dilation is not None:
            self.context_dilation = tuple(tuple(tuple(int(v) for v in p) for p in layer) for layer in self.context_dilation)
        self.validate()

    def validate(self):
        if self.n_latents < 1:
            raise ConfigError("n_latents must be >= 1")
        if self.dim % self.heads:
            raise ConfigError(f"dim={self.dim} is not divisible by heads={self.heads}")
        if self.in_dim % self.ctx_heads:
            raise ConfigError(f"in_dim={self.in_dim} is not divisible by context heads={self.ctx_heads}")
        if len(self.topk_start) != self.cross_blocks or len(self.topk_end) != self.cross_blocks:
            raise ConfigError("one Top-K value per cross block is required")
        if min(self.topk_start + self.topk_end) < 1:
            raise ConfigError("Top-K values must be >= 1")
        if self.context_dilation is not None and len(self.context_dilation) != self.context_layers:
            raise ConfigError("context_dilation needs one pattern list per context layer")

    @property
    def ctx_heads(self):
        return self.context_heads or self.heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def paper(cls):
        """Full-size configuration (512-wide, 256 latents, dilated context)."""
        segments = (1024, 2048, 4096)
        return cls(
            context_dilation=(
                tuple(zip(segments, (1, 2, 4))),
                tuple(zip(segments, (4, 8, 16))),
            )
        )


# --------------------------------------------------------------------------
# functional pieces


def fourier_features(coords, bands, max_wavelength=4096.0):
    """Raw 2-D Fourier features, shape (..., 4 * bands).

    For each band f the block is [sin(w r), cos(w r), sin(w c), cos(w c)]
    with w = 2 pi 2^f / max_wavelength.
    """
    coords = torch.as_tensor(coords)
    if not coords.dtype.is_floating_point:
        coords = coords.to(torch.get_default_dtype())
    omega = 2 * math.pi * (2.0 ** torch.arange(bands, dtype=coords.dtype)) / max_wavelength
    r = coords[..., 0:1] * omega
    c = coords[..., 1:2] * omega
    feats = torch.stack([r.sin(), r.cos(), c.sin(), c.cos()], dim=-1)
    return feats.flatten(-2)


def fourier_pe(coords, bands, projection=None, max_wavelength=4096.0):
    raw = fourier_features(coords, bands, max_wavelength)
    return raw if projection is None else projection(raw.to(projection.weight.dtype))


def topk_keep(logits, k_top):
    """Boolean mask of the ``k_top`` largest finite entries along the last dim.

    Ties at the boundary go to the lower index. Entries equal to -inf are
    treated as invalid and never kept.
    """
    if k_top < 1:
        raise ConfigError("k_top must be >= 1")
    if torch.isnan(logits).any():
        raise NumericalError("NaN attention logits")
    finite = torch.isfinite(logits)
    if not finite.any(-1).all():
        raise EmptyRowError("attention row without any valid entry")
    n = logits.shape[-1]
    if k_top >= n:
        return finite
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices[..., :k_top]
    keep = torch.zeros_like(finite).scatter(-1, order, True)
    return keep & finite


def topk_mask(logits, k_top):
    """Logits with everything outside the Top-K set to -inf."""
    logits = torch.as_tensor(logits)
    return logits.masked_fill(~topk_keep(logits, k_top), float("-inf"))


def cosine_topk(t, steps, start, end):
    """Cosine anneal from ``start`` (t=0) to ``end`` (t=steps), per block."""
    frac = 0.0 if steps <= 0 else min(max(t / steps, 0.0), 1.0)
    w = 0.5 * (1.0 + math.cos(math.pi * frac))
    return tuple(int(round(e + (s - e) * w)) for s, e in zip(start, end))


def dilation_mask(n, patterns):
    """Allowed (query, key) pairs for each (segment, stride) pattern.

    Token i attends to j when both sit in the same segment of length ``w``
    and share the residue of their in-segment offset modulo ``r``.
    Returns a (P, n, n) bool tensor.
    """
    pos = torch.arange(n)
    masks = []
    for w, r in patterns:
        seg = pos // w
        res = (pos % w) % r
        masks.append((seg[:, None] == seg[None, :]) & (res[:, None] == res[None, :]))
    return torch.stack(masks)


# --------------------------------------------------------------------------
# modules


class FeedForward(nn.Module):
    def __init__(self, dim, mult=4, out_dim=None):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, out_dim or dim))

    def forward(self, x):
        return self.net(x)


class Attention(nn.Module):
    """Multi-head attention with optional Top-K sparsification.

    Returns the output and the (B, H, Nq, Nk) probabilities plus the keep
    mask that was applied (None when dense).
    """

    def __init__(self, q_dim, kv_dim, dim, heads, out_dim=None):
        super().__init__()
        self.heads = heads
        self.dim_head = dim // heads
        self.to_q = nn.Linear(q_dim, dim, bias=False)
        self.to_k = nn.Linear(kv_dim, dim, bias=False)
        self.to_v = nn.Linear(kv_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, out_dim or q_dim)

    def _split(self, t):
        B, N, _ = t.shape
        return t.view(B, N, self.heads, self.dim_head).transpose(1, 2)

    def forward(self, q_in, k_in, v_in=None, key_mask=None, attn_mask=None, k_top=None, keep=None):
        v_in = k_in if v_in is None else v_in
        q = self._split(self.to_q(q_in))
        k = self._split(self.to_k(k_in))
        v = self._split(self.to_v(v_in))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.dim_head)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        if attn_mask is not None:
            logits = logits.masked_fill(~attn_mask, float("-inf"))
        if keep is None and k_top is not None:
            keep = topk_keep(logits, k_top)
        if keep is not None:
            logits = logits.masked_fill(~keep, float("-inf"))
        probs = torch.softmax(logits, dim=-1)
        out = (probs @ v).transpose(1, 2).reshape(q_in.shape[0], q_in.shape[1], -1)
        return self.to_out(out), probs, keep


class ContextLayer(nn.Module):
    """Pre-norm self-attention + FFN over tokens, dense or block-dilated."""

    def __init__(self, dim, heads, ffn_mult=4, patterns=None):
        super().__init__()
        self.patterns = patterns
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, dim, dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult)

    def forward(self, x, mask):
        h = self.norm1(x)
        if self.patterns is None:
            a, _, _ = self.attn(h, h, key_mask=mask)
        else:
            # each pattern attends separately; outputs are averaged
            # the diagonal stays open so padded rows never see an empty row
            n = x.shape[1]
            eye = torch.eye(n, dtype=torch.bool, device=x.device)
            masks = dilation_mask(n, self.patterns).to(x.device)
            allowed = (masks[None] & mask[:, None, None, :]) | eye
            a = sum(self.attn(h, h, attn_mask=allowed[:, p, None])[0] for p in range(len(masks))) / len(masks)
        x = x + a
        return x + self.ffn(self.norm2(x))


class CrossBlock(nn.Module):
    def __init__(self, dim, kv_dim, heads, ffn_mult=4):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.cross = Attention(dim, kv_dim, dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, dim, dim, heads)

    def forward(self, z, keys, values, key_mask, k_top, keep=None):
        h, probs, keep = self.cross(self.norm_q(z), keys, values, key_mask=key_mask, k_top=k_top, keep=keep)
        z = z + h
        z = z + self.ffn(self.norm_ffn(z))
        s = self.norm_self(z)
        z = z + self.self_attn(s, s)[0]
        return z, probs, keep


class MaeDecoder(nn.Module):
    """Queries = mask token + PE of masked positions; cross-attend to latents."""

    def __init__(self, in_dim, dim, heads, n_layers=2, ffn_mult=4):
        super().__init__()
        self.mask_token = nn.Parameter(torch.zeros(in_dim))
        self.query_proj = nn.Linear(in_dim, dim)
        self.layers = nn.ModuleList()
        for _ in range(n_layers):
            self.layers.append(
                nn.ModuleDict(
                    dict(
                        norm=nn.LayerNorm(dim),
                        attn=Attention(dim, dim, dim, heads),
                        norm_ffn=nn.LayerNorm(dim),
                        ffn=FeedForward(dim, ffn_mult),
                    )
                )
            )
        self.head = nn.Linear(dim, in_dim)

    def forward(self, pe, latents):
        q = self.query_proj(self.mask_token + pe)
        for layer in self.layers:
            q = q + layer["attn"](layer["norm"](q), latents)[0]
            q = q + layer["ffn"](layer["norm_ffn"](q))
        return self.head(q)


@dataclass
class LatentBundle:
    latents: torch.Tensor  # (B, L, D')
    attention: torch.Tensor  # (B, L, N) final block, head-averaged
    token_mask: torch.Tensor  # (B, N)
    keep_masks: list = field(default_factory=list)  # per block (B, H, L, N)

    @property
    def max_attention(self):
        """u(i) = max over latents of the attention on token i, shape (B, N)."""
        return self.attention.max(dim=1).values


class Resampler(nn.Module):
    def __init__(self, config: ResamplerConfig):
        super().__init__()
        self.config = config
        c = config
        self.pe_proj = nn.Linear(4 * c.fourier_bands, c.in_dim)
        self.context = nn.ModuleList(
            ContextLayer(
                c.in_dim,
                c.ctx_heads,
                c.ffn_mult,
                None if c.context_dilation is None else c.context_dilation[i],
            )
            for i in range(c.context_layers)
        )
        self.latents = nn.Parameter(torch.randn(c.n_latents, c.dim) * 0.02)
        self.blocks = nn.ModuleList(CrossBlock(c.dim, c.in_dim, c.heads, c.ffn_mult) for _ in range(c.cross_blocks))
        self.decoder = MaeDecoder(c.in_dim, c.dim, c.heads, c.decoder_layers, c.ffn_mult)

    def positional(self, coords):
        return fourier_pe(coords, self.config.fourier_bands, self.pe_proj, self.config.max_wavelength)

    def forward(self, x, coords, mask=None, k_tops=None, keep_masks=None) -> LatentBundle:
        """Encode a padded (B, N, D_v) batch; ``mask`` marks valid tokens."""
        B, N, _ = x.shape
        if mask is None:
            mask = torch.ones(B, N, dtype=torch.bool)
        mask = torch.as_tensor(mask, dtype=torch.bool)
        k_tops = k_tops or self.config.topk_end
        h = x
        for layer in self.context:
            h = layer(h, mask)
        keys = h + self.positional(torch.as_tensor(coords))
        z = self.latents.expand(B, -1, -1)
        kept, probs = [], None
        for i, block in enumerate(self.blocks):
            fixed = None if keep_masks is None else keep_masks[i]
            z, probs, keep = block(z, keys, h, mask, k_tops[i], keep=fixed)
            kept.append(keep)
        if not torch.isfinite(z).all():
            raise NumericalError("non-finite latents")
        return LatentBundle(latents=z, attention=probs.mean(dim=1), token_mask=mask, keep_masks=kept)


def build_resampler(config: ResamplerConfig, seed=0, dtype=torch.float32) -> Resampler:
    torch.manual_seed(sub_seed(seed, "init"))
    return Resampler(config).to(dtype)


def encode(model: Resampler, tokens, k_tops=None) -> LatentBundle:
    """Encode one slide (a TileFeatureSet or MergedTokenSet)."""
    dtype = model.latents.dtype
    x = torch.as_tensor(np.asarray(tokens.features), dtype=dtype)[None]
    coords = torch.as_tensor(np.asarray(tokens.coords), dtype=dtype)[None]
    return model(x, coords, k_tops=k_tops)


# --------------------------------------------------------------------------
# metrics


def coverage_metric(bundle: LatentBundle, tau=1e-4):
    """Mean over slides of the fraction of valid tokens with max attention > tau."""
    u = bundle.max_attention.detach()
    mask = bundle.token_mask
    covered = ((u > tau) & mask).sum(-1).double() / mask.sum(-1).double()
    return float(covered.mean())


def diversity_metric(latents, absolute=False):
    """Mean and std of pairwise cosine similarity over unordered latent pairs.

    ``latents`` is (L, D) or (B, L, D); pairs are pooled across the batch.
    """
    Z = torch.as_tensor(latents).detach().double()
    if Z.dim() == 2:
        Z = Z[None]
    L = Z.shape[1]
    if L < 2:
        raise ConfigError("diversity needs at least two latents")
    norms = Z.norm(dim=-1)
    if (norms == 0).any():
        raise DegenerateLatentError("zero-norm latent")
    U = Z / norms[..., None]
    cos = U @ U.transpose(-1, -2)
    iu = torch.triu_indices(L, L, offset=1)
    vals = cos[:, iu[0], iu[1]].reshape(-1)
    if absolute:
        vals = vals.abs()
    std = float(vals.std(unbiased=False)) if vals.numel() > 1 else 0.0
    return float(vals.mean()), std


# --------------------------------------------------------------------------
# cost


def _attention_pairs(n, patterns):
    """Number of (query, key) score pairs for a dilated context layer."""
    if patterns is None:
        return n * n
    total = 0
    for w, r in patterns:
        full, rem = divmod(n, w)
        for length, count in ((w, full), (rem, 1 if rem else 0)):
            if not count:
                continue
            q, extra = divmod(length, r)
            groups = [q + 1] * extra + [q] * (r - extra)
            total += count * sum(g * g for g in groups)
    return total


def encode_flops(config: ResamplerConfig, n_tokens: int) -> int:
    """Matmul flops of one encode over ``n_tokens`` (multiply-add = 2).

    Dilated context layers are counted at their sparse cost; softmax, norms
    and activations are excluded.
    """
    c, n = config, n_tokens
    dv, d, L = c.in_dim, c.dim, c.n_latents
    flops = 2 * n * 4 * c.fourier_bands * dv
    for i in range(c.context_layers):
        patterns = None if c.context_dilation is None else c.context_dilation[i]
        n_patterns = 1 if patterns is None else len(patterns)
        flops += 2 * n * dv * dv * 3 * n_patterns  # q, k, v projections
        flops += 4 * dv * _attention_pairs(n, patterns)
        flops += 2 * n * dv * dv * n_patterns  # output projection
        flops += 4 * n * dv * dv * c.ffn_mult
    for _ in range(c.cross_blocks):
        flops += 2 * L * d * d  # W_q
        flops += 2 * 2 * n * dv * d  # W_k, W_v
        flops += 4 * L * n * d  # scores + weighted sum
        flops += 2 * L * d * d  # W_o
        flops += 4 * L * d * d * c.ffn_mult
        flops += 8 * L * d * d + 4 * L * L * d  # latent self-attention
    return flops
