"""Masked-autoencoder pretraining for the resampler.

Loss::

    L = L_rec + lambda_cover * L_cover + lambda_feat * L_feat
    L_rec   = mean over masked tokens of ||x_hat - x||^2
    L_cover = (1/N) sum_i max(0, tau - u_i),   tau = c / N
    L_feat  = ||offdiag(Z_c Z_c^T / (D' - 1))||_F^2

with ``u_i`` the max attention any latent pays to token ``i`` and ``Z_c`` the
latents centred over their feature axis.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericalError, TrainingError
from .resampler import LatentBundle, Resampler, cosine_topk
from .seeding import substream


@dataclass
class MaeLossParts:
    lambda_cover: float = 5e-4
    lambda_feat: float = 1e-3
    mask_ratio: float = 0.75
    cover_c: float = 0.5  # tau = cover_c / N_valid
    l_rec: torch.Tensor | None = None
    l_cover: torch.Tensor | None = None
    l_feat: torch.Tensor | None = None
    total: torch.Tensor | None = None

    def scalars(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("l_rec", "l_cover", "l_feat", "total")}


@dataclass
class MaeOutput:
    recon: torch.Tensor  # (B, Nm, D_v)
    targets: torch.Tensor  # (B, Nm, D_v)
    recon_mask: torch.Tensor  # (B, Nm)
    bundle: LatentBundle
    masked: list  # per-slide sorted masked indices


def _pack(rows, width, fill=0.0):
    B = len(rows)
    n = max(len(r) for r in rows)
    out = np.full((B, n) + width, fill, dtype=np.float64)
    mask = np.zeros((B, n), dtype=bool)
    for b, r in enumerate(rows):
        out[b, : len(r)] = r
        mask[b, : len(r)] = True
    return out, mask


def mask_indices(n, mask_ratio, rng):
    """Sorted indices of ``floor(mask_ratio * n)`` masked tokens."""
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    n_mask = int(math.floor(mask_ratio * n))
    if n_mask < 1 or n - n_mask < 1:
        raise ConfigError(f"mask_ratio {mask_ratio} on {n} tokens leaves no masked or no visible token")
    return np.sort(rng.permutation(n)[:n_mask])


def mae_forward(model: Resampler, sets, mask_ratio=0.75, seed=0, k_tops=None, keep_masks=None) -> MaeOutput:
    """Mask, encode the visible tokens and reconstruct the masked ones.

    ``sets`` is a list of token sets (anything with ``features`` and
    ``coords``). Masks come from the ``mask`` sub-stream of ``seed``.
    """
    if not isinstance(sets, (list, tuple)):
        sets = [sets]
    rng = substream(seed, "mask")
    dtype = model.latents.dtype
    vis_x, vis_c, msk_x, msk_c, masked = [], [], [], [], []
    for s in sets:
        feats = np.asarray(s.features, dtype=np.float64)
        coords = np.asarray(s.coords, dtype=np.float64)
        idx = mask_indices(len(feats), mask_ratio, rng)
        keep = np.ones(len(feats), dtype=bool)
        keep[idx] = False
        vis_x.append(feats[keep])
        vis_c.append(coords[keep])
        msk_x.append(feats[idx])
        msk_c.append(coords[idx])
        masked.append(idx)
    D = vis_x[0].shape[1]
    vx, vmask = _pack(vis_x, (D,))
    vc, _ = _pack(vis_c, (2,))
    mx, mmask = _pack(msk_x, (D,))
    mc, _ = _pack(msk_c, (2,))
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    bundle = model(as_t(vx), as_t(vc), torch.as_tensor(vmask), k_tops=k_tops, keep_masks=keep_masks)
    recon = model.decoder(model.positional(as_t(mc)), bundle.latents)
    return MaeOutput(recon, as_t(mx), torch.as_tensor(mmask), bundle, masked)


def latent_covariance(Z):
    """L x L covariance of latent rows centred over the feature axis."""
    Zc = Z - Z.mean(dim=-1, keepdim=True)
    return Zc @ Zc.transpose(-1, -2) / (Z.shape[-1] - 1)


def feat_loss(Z):
    """Squared Frobenius norm of the off-diagonal covariance, batch mean."""
    cov = latent_covariance(Z if Z.dim() == 3 else Z[None])
    off = cov - torch.diag_embed(torch.diagonal(cov, dim1=-2, dim2=-1))
    return (off**2).sum(dim=(-2, -1)).mean()


def cover_loss(bundle: LatentBundle, c=0.5):
    u = bundle.max_attention
    mask = bundle.token_mask
    n = mask.sum(-1).to(u.dtype)
    tau = (c / n)[:, None]
    hinge = torch.relu(tau - u) * mask
    return (hinge.sum(-1) / n).mean()


def mae_loss(recon, targets, bundle: LatentBundle, parts: MaeLossParts, recon_mask=None) -> MaeLossParts:
    if recon_mask is None:
        recon_mask = torch.ones(recon.shape[:-1], dtype=torch.bool)
    sq = ((recon - targets) ** 2).sum(-1)
    l_rec = (sq * recon_mask).sum() / recon_mask.sum()
    l_cover = cover_loss(bundle, parts.cover_c)
    l_feat = feat_loss(bundle.latents)
    total = l_rec + parts.lambda_cover * l_cover + parts.lambda_feat * l_feat
    return dataclasses.replace(parts, l_rec=l_rec, l_cover=l_cover, l_feat=l_feat, total=total)


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_frac: float = 0.03
    mask_ratio: float = 0.75
    lambda_cover: float = 5e-4
    lambda_feat: float = 1e-3
    cover_c: float = 0.5
    seed: int = 0

    def loss_parts(self):
        return MaeLossParts(self.lambda_cover, self.lambda_feat, self.mask_ratio, self.cover_c)


def cosine_lr(steps, warmup_frac):
    warm = max(1, math.ceil(warmup_frac * steps))

    def factor(t):
        if t < warm:
            return (t + 1) / warm
        span = max(1, steps - warm)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, (t - warm) / span)))

    return factor


def pretrain(model: Resampler, corpus, config: PretrainConfig, transform=None, log=None):
    """Minimise the MAE objective; returns the model and a per-step loss trace.

    ``transform`` optionally maps each slide before masking (e.g. a token
    merger). Top-K follows the cosine anneal from the model config.
    """
    if not corpus:
        raise ConfigError("empty corpus")
    cfg = model.config
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_lr(config.steps, config.warmup_frac))
    data_rng = substream(config.seed, "data")
    parts = config.loss_parts()
    order = np.zeros(0, dtype=np.int64)
    trace = []
    model.train()
    for step in range(config.steps):
        if len(order) < config.batch_size:
            order = np.concatenate([order, data_rng.permutation(len(corpus))])
        pick, order = order[: config.batch_size], order[config.batch_size :]
        batch = [corpus[i] for i in pick]
        if transform is not None:
            batch = [transform(s) for s in batch]
        k_tops = cosine_topk(step, max(config.steps - 1, 1), cfg.topk_start, cfg.topk_end)
        try:
            out = mae_forward(model, batch, config.mask_ratio, seed=(config.seed, step), k_tops=k_tops)
        except NumericalError as exc:
            raise TrainingError(f"MAE forward diverged: {exc}", step) from exc
        res = mae_loss(out.recon, out.targets, out.bundle, parts, out.recon_mask)
        if not torch.isfinite(res.total):
            raise TrainingError("MAE loss diverged", step)
        opt.zero_grad(set_to_none=True)
        res.total.backward()
        opt.step()
        sched.step()
        row = {"step": step, **res.scalars(), "lr": sched.get_last_lr()[0], "k_top": list(k_tops)}
        trace.append(row)
        if log is not None:
            log(row)
    model.eval()
    return model, trace
