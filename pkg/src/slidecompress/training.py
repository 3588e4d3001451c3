"""Two-stage fusion training and evaluation on the toy VQA task."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, TrainingError
from .fusion import FusionStack, forward_fused, predict, text_batch
from .mae import cosine_lr
from .resampler import Resampler
from .seeding import substream
from .slide_io import pack_batch
from .stm import SparseTokenMerger


class Pipeline(nn.Module):
    """Merger (optional) -> resampler -> fusion stack."""

    def __init__(self, resampler: Resampler, stack: FusionStack, merger: SparseTokenMerger | None = None):
        super().__init__()
        self.resampler = resampler
        self.stack = stack
        self.merger = merger

    def latents(self, slides, k_tops=None):
        dtype = self.resampler.latents.dtype
        packed = pack_batch(slides, n_max=max(s.n_tiles for s in slides))
        x = torch.as_tensor(packed.features, dtype=dtype)
        coords, mask = packed.coords, packed.validity_mask
        if self.merger is not None:
            x, coords, mask, _ = self.merger.forward_packed(x, coords, mask)
        bundle = self.resampler(x, torch.as_tensor(coords, dtype=dtype), torch.as_tensor(mask), k_tops=k_tops)
        return bundle.latents

    def forward(self, slides, samples):
        return forward_fused(self.stack, self.latents(slides), text_batch(samples))


@dataclass
class FuseConfig:
    stages: tuple = (1, 2)
    steps: dict = field(default_factory=lambda: {1: 600, 2: 600})
    lr: dict = field(default_factory=lambda: {1: 3e-3, 2: 1e-3})
    batch_size: int = 16
    weight_decay: float = 0.0
    warmup_frac: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.steps = {int(k): int(v) for k, v in self.steps.items()}
        self.lr = {int(k): float(v) for k, v in self.lr.items()}
        for s in self.stages:
            if s not in (1, 2):
                raise ConfigError(f"unknown stage {s}")
            if s not in self.steps or s not in self.lr:
                raise ConfigError(f"stage {s} needs steps and lr")

    def to_dict(self):
        return asdict(self)


def trainable_parameters(pipe: Pipeline, stage: int):
    """Parameters updated in ``stage``; everything else is frozen."""
    st = pipe.stack
    mods = [st.projector, st.tis, st.cara]
    if pipe.merger is not None:
        mods.append(pipe.merger)
    params = [p for m in mods for p in m.parameters()]
    if stage == 2:
        params += list(pipe.resampler.blocks[-1].parameters())
        params.append(pipe.resampler.latents)
        params += list(st.lm.parameters())
    return params


def set_stage(pipe: Pipeline, stage: int):
    keep = {id(p) for p in trainable_parameters(pipe, stage)}
    for p in pipe.parameters():
        p.requires_grad_(id(p) in keep)
    return [p for p in pipe.parameters() if id(p) in keep]


def parameter_hash(params):
    h = hashlib.sha256()
    for p in params:
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_fusion(pipe: Pipeline, corpus, config: FuseConfig, log=None):
    """Run the configured stages over ``corpus`` = list of (slide, sample).

    Returns the per-step trace. An empty stage list leaves the pipeline
    untouched.
    """
    trace = []
    if not config.stages:
        return trace
    if not corpus:
        raise ConfigError("empty training corpus")
    data_rng = substream(config.seed, "data")
    order = np.zeros(0, dtype=np.int64)
    pipe.train()
    for stage in config.stages:
        params = set_stage(pipe, stage)
        steps = config.steps[stage]
        opt = torch.optim.AdamW(params, lr=config.lr[stage], weight_decay=config.weight_decay)
        sched = torch.optim.lr_scheduler.LambdaLR(opt, cosine_lr(steps, config.warmup_frac))
        for step in range(steps):
            if len(order) < config.batch_size:
                order = np.concatenate([order, data_rng.permutation(len(corpus))])
            pick, order = order[: config.batch_size], order[config.batch_size :]
            slides = [corpus[i][0] for i in pick]
            samples = [corpus[i][1] for i in pick]
            out = pipe(slides, samples)
            total = out.parts.total
            if not torch.isfinite(total):
                raise TrainingError(f"fusion loss diverged in stage {stage}", step)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            sched.step()
            row = {"stage": stage, "step": step, **out.parts.scalars()}
            trace.append(row)
            if log is not None:
                log(row)
    for p in pipe.parameters():
        p.requires_grad_(True)
    pipe.eval()
    return trace


@dataclass
class EvalResult:
    accuracy: float
    majority_baseline: float
    n: int
    l_lm: float
    l_tis: float
    l_rank: float
    total: float


def majority_answer(samples):
    counts = Counter(int(s.answer_tokens[0]) for s in samples)
    # ties go to the lowest token id
    return min(counts, key=lambda k: (-counts[k], k))


def evaluate(pipe: Pipeline, corpus, train_samples=None, batch_size=50) -> EvalResult:
    """Accuracy (all answer tokens correct) and mean loss parts on ``corpus``."""
    pipe.eval()
    correct, sums, n = 0, Counter(), 0
    with torch.no_grad():
        for i in range(0, len(corpus), batch_size):
            chunk = corpus[i : i + batch_size]
            slides = [c[0] for c in chunk]
            batch = text_batch([c[1] for c in chunk])
            Z = pipe.latents(slides)
            _, ok = predict(pipe.stack, Z, batch)
            correct += int(ok.sum())
            out = forward_fused(pipe.stack, Z, batch)
            for k, v in out.parts.scalars().items():
                sums[k] += v * len(chunk)
            n += len(chunk)
    ref = train_samples if train_samples is not None else [c[1] for c in corpus]
    maj = majority_answer(ref)
    baseline = float(np.mean([int(c[1].answer_tokens[0]) == maj for c in corpus]))
    return EvalResult(correct / n, baseline, n, *(sums[k] / n for k in ("l_lm", "l_tis", "l_rank", "total")))
