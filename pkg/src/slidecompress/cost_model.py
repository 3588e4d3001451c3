"""Inference cost of prefix-style vs routed cross-attention fusion.

Flops count multiply-adds as 2; softmax, norms, activations and elementwise
adds are excluded from both styles. A self-attention layer over ``S``
positions costs::

    8 S d^2 + 4 S^2 d + 4 S d d_ff

``llava`` puts all ``L`` visual tokens in the prefix (S = T + L). ``cara``
self-attends over text only (S = T) and adds, per adapter layer,
``2 (T + M) 2 d^2 + 4 T M d + 2 T d``. Decode step ``t`` (1-based) attends
over ``P + t`` cached keys, where ``P`` is the prefill length.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch.overrides import TorchFunctionMode
from torch.utils.flop_counter import FlopCounterMode

from .errors import ConfigError
from .fusion import CaraLayer, ToyLM, ToyLmConfig
from .resampler import ResamplerConfig, encode_flops

STYLES = ("llava", "cara")


@dataclass(frozen=True)
class CostScenario:
    n: int = 8
    n_x: int = 4
    T: int = 32
    L: int = 64
    M: int = 16
    A: int = 8
    d: int = 64
    d_ff: int = 256
    H: int = 4
    bytes_per_scalar: int = 2
    vocab: int = 0  # 0 leaves the LM head out of the count
    vision_tokens: int = 16384  # resampler input length for the merge table

    def __post_init__(self):
        for name in ("n", "T", "d", "d_ff", "H", "bytes_per_scalar"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_x", "L", "M", "A", "vocab", "vision_tokens"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.n_x > self.n:
            raise ConfigError("n_x must not exceed n")
        if self.M > self.L:
            raise ConfigError("M must not exceed L")

    @classmethod
    def paper(cls):
        """7B-class decoder with 576 prefix latents, 96 routed, 4 adapters."""
        return cls(n=28, n_x=4, T=128, L=576, M=96, A=256, d=3584, d_ff=18944, H=28, bytes_per_scalar=2)

    @classmethod
    def toy(cls):
        return cls()

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


def _check(style):
    if style not in STYLES:
        raise ConfigError(f"style must be one of {STYLES}, got {style!r}")


def self_attention_layer(S, d, d_ff):
    return 8 * S * d * d + 4 * S * S * d + 4 * S * d * d_ff


def prefill_length(sc: CostScenario, style):
    _check(style)
    return sc.T + sc.L if style == "llava" else sc.T


def flops_prefill(sc: CostScenario, style) -> int:
    S = prefill_length(sc, style)
    flops = sc.n * self_attention_layer(S, sc.d, sc.d_ff) + 2 * S * sc.d * sc.vocab
    if style == "cara":
        d, T, M = sc.d, sc.T, sc.M
        flops += sc.n_x * (2 * (T + M) * 2 * d * d + 4 * T * M * d + 2 * T * d)
    return flops


def flops_decode(sc: CostScenario, style) -> int:
    P = prefill_length(sc, style)
    A, d = sc.A, sc.d
    keys = P * A + A * (A + 1) // 2  # sum over steps of P + t
    flops = sc.n * (A * (8 * d * d + 4 * d * sc.d_ff) + 4 * d * keys) + 2 * A * d * sc.vocab
    if style == "cara":
        # query and output projections plus attention over M cached keys
        flops += sc.n_x * A * (2 * 2 * d * d + 4 * sc.M * d + 2 * d)
    return flops


def kv_cache_bytes(sc: CostScenario, style) -> int:
    _check(style)
    if style == "llava":
        scalars = sc.n * sc.d * (sc.T + sc.L + sc.A)
    else:
        scalars = sc.n * sc.d * (sc.T + sc.A) + sc.n_x * sc.M * sc.d
    return 2 * sc.bytes_per_scalar * scalars


def stm_table(config: ResamplerConfig | None = None, n_tokens=16384, windows=(2, 3, 4)):
    """Vision-side encode flops without merging and after s x s merging."""
    config = config or ResamplerConfig.paper()
    base = encode_flops(config, n_tokens)
    rows = [{"window": 0, "tokens": n_tokens, "encode_flops": base, "reduction_percent": 0.0}]
    for s in windows:
        n = -(-n_tokens // (s * s))
        f = encode_flops(config, n)
        rows.append({"window": s, "tokens": n, "encode_flops": f, "reduction_percent": 100.0 * (1 - f / base)})
    return rows


@dataclass
class CostReport:
    scenario: CostScenario
    prefill_flops: dict
    decode_flops: dict
    total_flops: dict
    kv_cache_bytes: dict
    reduction_percent: dict
    stm_table: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["scenario"] = asdict(self.scenario)
        return d

    def csv_rows(self):
        rows = []
        for metric in ("prefill_flops", "decode_flops", "total_flops", "kv_cache_bytes"):
            vals = getattr(self, metric)
            rows.append([metric, vals["llava"], vals["cara"], f"{self.reduction_percent[metric]:.4f}"])
        return rows


def _reduction(vals):
    return 100.0 * (1.0 - vals["cara"] / vals["llava"]) if vals["llava"] else 0.0


def compare(sc: CostScenario, resampler: ResamplerConfig | None = None) -> CostReport:
    pre = {s: flops_prefill(sc, s) for s in STYLES}
    dec = {s: flops_decode(sc, s) for s in STYLES}
    tot = {s: pre[s] + dec[s] for s in STYLES}
    kv = {s: kv_cache_bytes(sc, s) for s in STYLES}
    red = {k: _reduction(v) for k, v in (("prefill_flops", pre), ("decode_flops", dec), ("total_flops", tot), ("kv_cache_bytes", kv))}
    table = stm_table(resampler, sc.vision_tokens) if sc.vision_tokens else []
    return CostReport(sc, pre, dec, tot, kv, red, table)


# --------------------------------------------------------------------------
# instrumented counting


def adapter_layers(n, n_x):
    """Spread ``n_x`` adapter layers evenly over ``n`` decoder layers."""
    if n_x == 0:
        return ()
    return tuple(int(i) for i in np.unique(np.floor(np.arange(n_x) * n / n_x).astype(int)))


class MatmulCounter(TorchFunctionMode):
    """Counts flops of ``linear`` and ``matmul`` calls as they execute.

    Much cheaper than dispatch-level counting, which intercepts every aten
    op. Agrees with ``FlopCounterMode`` on these models.
    """

    def __init__(self):
        super().__init__()
        self.total = 0

    def __torch_function__(self, func, types, args=(), kwargs=None):
        kwargs = kwargs or {}
        if func is F.linear:
            x, w = args[0], args[1]
            self.total += 2 * x.numel() * w.shape[0]
        elif func in (torch.matmul, torch.Tensor.matmul, torch.Tensor.__matmul__):
            a, b = args[0], args[1]
            batch = torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
            self.total += 2 * math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        return func(*args, **kwargs)

    def get_total_flops(self):
        return self.total


def instrumented_flops(sc: CostScenario, style, seed=0, counter="matmul"):
    """Count matmul flops of an actual toy forward: (prefill, decode).

    Builds a decoder with the scenario's shapes and runs the prefill and
    ``A`` cached decode steps under a flop counter: ``"matmul"`` for the
    lean counter above, ``"torch"`` for torch's dispatch-level one.
    """
    if counter not in ("matmul", "torch"):
        raise ConfigError(f"unknown counter {counter!r}")
    mode = MatmulCounter if counter == "matmul" else (lambda: FlopCounterMode(display=False))
    _check(style)
    torch.manual_seed(seed)
    vocab = max(sc.vocab, 2)
    P = prefill_length(sc, style)
    cfg = ToyLmConfig(depth=sc.n, width=sc.d, heads=sc.H, d_ff=sc.d_ff, vocab=vocab, max_context=P + sc.A, cara_layers=())
    lm = ToyLM(cfg).eval()
    if sc.vocab == 0:
        lm.head = torch.nn.Identity()
    layers = adapter_layers(sc.n, sc.n_x) if style == "cara" else ()
    cara = {i: CaraLayer(sc.d, sc.H).eval() for i in layers}
    for c in cara.values():
        torch.nn.init.constant_(c.gamma, 0.5)
    tokens = torch.randint(0, vocab, (1, sc.T))
    prefix = torch.randn(1, sc.L, sc.d) if style == "llava" and sc.L else None
    V_sel = torch.randn(1, sc.M, sc.d)
    kv = {}

    def hook(i, h):
        if i not in cara:
            return h
        return cara[i](h, kv=kv[i])[0]

    caches = lm.new_caches()
    with torch.no_grad():
        with mode() as pre:
            for i, c in cara.items():
                kv[i] = c.kv(V_sel)
            lm(tokens, prefix=prefix, hook=hook, caches=caches)
        with mode() as dec:
            for t in range(sc.A):
                nxt = torch.randint(0, vocab, (1, 1))
                lm(nxt, hook=hook, caches=caches, start=P + t)
    return pre.get_total_flops(), dec.get_total_flops()
