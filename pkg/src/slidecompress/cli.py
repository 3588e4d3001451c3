"""Command-line entry point.

Subcommands: synth, analyze, pretrain, fuse, eval, cost. Each run writes
its artifacts, a resolved-config snapshot (``config.resolved.json``) and a
``manifest.json`` under ``--out``. Settings resolve as CLI flags over the
``--config`` file (TOML or JSON) over built-in defaults.

Exit status: 0 success, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import torch

from . import __version__
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .cost_model import CostScenario, compare
from .errors import ConfigError, SlideCompressError
from .fusion import FusionConfig, ToyLmConfig, build_stack
from .mae import PretrainConfig, pretrain
from .redundancy import (
    aggregate,
    compression_curve,
    elbow_point,
    local_redundancy,
    pairwise_similarity,
    relevance_curve,
    relevance_on_grid,
)
from .resampler import ResamplerConfig, build_resampler
from .seeding import sub_seed
from .slide_io import Template, generate_toy_vqa, list_bundles, load_slide, save_slide, synthesize_corpus
from .stm import SparseTokenMerger
from .training import FuseConfig, Pipeline, evaluate, train_fusion

THREADS_ENV = "LOCPATH_THREADS"
STM_WINDOWS = (0, 2, 3, 4)


# --------------------------------------------------------------------------
# value parsers


def _ints(v):
    if isinstance(v, str):
        return tuple(int(x) for x in v.split(",") if x.strip())
    return tuple(int(x) for x in v)


def _floats(v):
    if isinstance(v, str):
        return tuple(float(x) for x in v.split(",") if x.strip())
    return tuple(float(x) for x in v)


def _grid(v):
    if isinstance(v, str):
        try:
            h, w = v.lower().split("x")
            return int(h), int(w)
        except ValueError:
            raise ConfigError(f"grid must look like 24x24, got {v!r}") from None
    return tuple(int(x) for x in v)


def _opt_floats(v):
    return None if v in (None, "", []) else _floats(v)


def _opt_int(v):
    return None if v in (None, "") else int(v)


def _opt_str(v):
    return None if v in (None, "") else str(v)


def _stage(v):
    v = str(v)
    if v not in ("1", "2", "all"):
        raise ConfigError(f"stage must be 1, 2 or all, got {v!r}")
    return v


def _window(v):
    v = int(v)
    if v not in STM_WINDOWS:
        raise ConfigError(f"stm_window must be one of {STM_WINDOWS}, got {v}")
    return v


COMMON = {
    "seed": (0, int),
    "out": ("out", str),
    "threads": (None, _opt_int),
}

# key -> (default, parser); defaults follow the published recipe where one exists
OPTIONS = {
    "synth": {
        "slides": (500, int),
        "grid": ((24, 24), _grid),
        "clusters": (4, int),
        "dim": (32, int),
        "noise": (0.1, float),
        "occupancy": (0.6, float),
        "priors": (None, _opt_floats),
    },
    "analyze": {
        "input": (None, _opt_str),
        "ks": ((8, 16, 32, 64, 128, 256), _ints),
        "thresholds": ((0.90, 0.92, 0.94, 0.96, 0.98), _floats),
        "k_nn": (16, int),
        "pairs": (50_000, int),
        "bins": (200, int),
        "restarts": (4, int),
        "grid_points": (100, int),
    },
    "pretrain": {
        "input": (None, _opt_str),
        "train_fraction": (0.8, float),
        "steps": (2000, int),
        "batch_size": (8, int),
        "lr": (1e-4, float),
        "weight_decay": (0.05, float),
        "mask_ratio": (0.75, float),
        "lambda_cover": (5e-4, float),
        "lambda_feat": (1e-3, float),
        "cover_c": (0.5, float),
        "topk_start": ((128, 64), _ints),
        "topk_end": ((64, 32), _ints),
        "latents": (256, int),
        "width": (512, int),
        "heads": (8, int),
        "context_layers": (2, int),
        "fourier_bands": (8, int),
    },
    "fuse": {
        "input": (None, _opt_str),
        "resampler": (None, _opt_str),
        "init": (None, _opt_str),
        "train_fraction": (0.8, float),
        "stm_window": (2, _window),
        "stage": ("all", _stage),
        "latents": (None, _opt_int),
        "route_m": (96, int),
        "cara_layers": ((1, 3, 5, 7), _ints),
        "lambda_tis": (0.02, float),
        "lambda_rank": (0.02, float),
        "margin": (0.05, float),
        "n_pairs": (8, int),
        "tau_s": (1.0, float),
        "tau_t": (1.0, float),
        "lm_depth": (8, int),
        "lm_width": (64, int),
        "lm_heads": (4, int),
        "steps_stage1": (600, int),
        "steps_stage2": (600, int),
        "lr_stage1": (3e-3, float),
        "lr_stage2": (1e-3, float),
        "batch_size": (16, int),
    },
    "eval": {
        "input": (None, _opt_str),
        "checkpoint": (None, _opt_str),
        "train_fraction": (0.8, float),
        "split": ("test", str),
        "batch_size": (50, int),
    },
    "cost": {
        "scenario": (None, _opt_str),
        "scenario_file": (None, _opt_str),
        "preset": ("paper", str),
        "vision_tokens": (16384, int),
    },
}

HELP = {
    "synth": "generate a synthetic slide corpus as bundles",
    "analyze": "redundancy and relevance statistics over a corpus",
    "pretrain": "MAE-pretrain the resampler",
    "fuse": "two-stage fusion training on the toy VQA task",
    "eval": "toy VQA accuracy and loss parts",
    "cost": "analytical inference-cost comparison",
}


# --------------------------------------------------------------------------
# config resolution


def _read_config_file(path, command):
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        elif ext == ".json":
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        else:
            raise ConfigError(f"config file must be .toml or .json, got {path}")
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(data.get(command), dict):
        data = data[command]
    return {k.replace("-", "_"): v for k, v in data.items()}


def resolve(command, cli_values, config_path=None):
    """Merge defaults, config file and explicit flags; reject unknown keys."""
    spec = {**COMMON, **OPTIONS[command]}
    resolved = {k: d for k, (d, _) in spec.items()}
    layers = []
    if config_path:
        layers.append(_read_config_file(config_path, command))
    layers.append(cli_values)
    for layer in layers:
        unknown = sorted(set(layer) - set(spec))
        if unknown:
            raise ConfigError(f"unknown {command} option(s): {', '.join(unknown)}")
        for k, v in layer.items():
            try:
                resolved[k] = spec[k][1](v) if v is not None else None
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {k}: {v!r}") from exc
    return resolved


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return v


def _thread_count(cfg):
    env = os.environ.get(THREADS_ENV)
    cap = int(env) if env else None
    n = cfg["threads"] or cap or 1
    if cap is not None:
        n = min(n, cap)
    return max(1, int(n))


# --------------------------------------------------------------------------
# artifacts


class Run:
    def __init__(self, command, cfg):
        self.command = command
        self.cfg = cfg
        self.out = cfg["out"]
        os.makedirs(self.out, exist_ok=True)
        self.files = []

    def path(self, name):
        p = os.path.join(self.out, name)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def add(self, name):
        self.files.append(name)
        return self.path(name)

    def write_json(self, name, obj):
        with open(self.add(name), "w", encoding="utf-8") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, name, header, rows):
        with open(self.add(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)

    def finish(self):
        self.write_json("config.resolved.json", {self.command: self.cfg})
        entries = []
        for name in sorted(set(self.files)):
            p = os.path.join(self.out, name)
            if os.path.isdir(p):
                continue
            with open(p, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            entries.append({"path": name, "sha256": digest, "bytes": os.path.getsize(p)})
        manifest = {"command": self.command, "version": __version__, "files": entries}
        with open(os.path.join(self.out, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(x):
    return f"{x:.10g}" if isinstance(x, float) else x


def _require(cfg, key):
    if not cfg.get(key):
        raise ConfigError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _load_corpus(root, threads):
    paths = list_bundles(root)
    if not paths and os.path.isdir(os.path.join(root, "slides")):
        # accept a synth output directory as well as its slides/ folder
        paths = list_bundles(os.path.join(root, "slides"))
    if not paths:
        raise ConfigError(f"no slide bundles under {root}")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(load_slide, paths))


def _split(corpus, fraction, which):
    n_train = int(np.floor(fraction * len(corpus)))
    if which == "train":
        return corpus[:n_train]
    if which == "test":
        return corpus[n_train:]
    if which == "all":
        return corpus
    raise ConfigError(f"split must be train, test or all, got {which!r}")


def _vqa(corpus):
    # templates alternate by position so both phrasings are present
    return [(s, generate_toy_vqa(s, Template(i % len(Template)))) for i, s in enumerate(corpus)]


# --------------------------------------------------------------------------
# commands


def cmd_synth(run: Run, cfg):
    corpus = synthesize_corpus(
        cfg["slides"],
        grid=cfg["grid"],
        n_clusters=cfg["clusters"],
        dim=cfg["dim"],
        noise_sigma=cfg["noise"],
        occupancy=cfg["occupancy"],
        priors=None if cfg["priors"] is None else np.asarray(cfg["priors"]),
        seed=cfg["seed"],
    )
    for s in corpus:
        save_slide(s, run.path(os.path.join("slides", s.slide_id)))
        for f in ("features.npy", "coords.npy", "meta.json"):
            run.files.append(os.path.join("slides", s.slide_id, f))
    return {"slides": len(corpus)}


def _analyze_one(args):
    s, cfg = args
    curve = compression_curve(s, cfg["ks"], restarts=cfg["restarts"], seed=cfg["seed"])
    local = local_redundancy(s, cfg["thresholds"], cfg["k_nn"])
    pairs = pairwise_similarity(s, cfg["pairs"], cfg["bins"], cfg["seed"], cfg["thresholds"])
    rel = relevance_curve(s) if s.text_embedding is not None else None
    return curve, local, pairs, rel


def cmd_analyze(run: Run, cfg):
    corpus = _load_corpus(_require(cfg, "input"), cfg["_threads"])
    with ThreadPoolExecutor(max_workers=cfg["_threads"]) as pool:
        results = list(pool.map(_analyze_one, [(s, cfg) for s in corpus]))
    curves, locals_, pairs, rels = zip(*results)

    comp = aggregate(curves)
    run.write_csv(
        "compression.csv",
        ["K", "nmse_mean", "nmse_q25", "nmse_q75"],
        [[int(k), _fmt(m), _fmt(a), _fmt(b)] for k, m, a, b in zip(comp.abscissa, comp.mean, comp.q25, comp.q75)],
    )
    loc = aggregate(locals_)
    run.write_csv(
        "local_redundancy.csv",
        ["threshold", "fraction_mean", "fraction_median", "fraction_q25", "fraction_q75"],
        [[_fmt(t), _fmt(m), _fmt(md), _fmt(a), _fmt(b)] for t, m, md, a, b in zip(loc.abscissa, loc.mean, loc.median, loc.q25, loc.q75)],
    )
    hist = aggregate(pairs, kind="histogram")
    width = 2.0 / cfg["bins"]
    run.write_csv(
        "pairwise_hist.csv",
        ["bin_left", "bin_right", "freq_mean", "freq_median", "freq_q25", "freq_q75"],
        [
            [_fmt(x), _fmt(x + width), _fmt(m), _fmt(md), _fmt(a), _fmt(b)]
            for x, m, md, a, b in zip(hist.abscissa, hist.mean, hist.median, hist.q25, hist.q75)
        ],
    )
    summary = {
        "slides": len(corpus),
        "elbow_k": elbow_point(comp.abscissa, comp.mean),
        "k_at_half_error": next((int(k) for k, v in zip(comp.abscissa, comp.mean) if v <= 0.5), None),
        "tail_prob_mean": {str(t): float(np.mean([p.tail_probs[float(t)] for p in pairs])) for t in cfg["thresholds"]},
    }
    rels = [r for r in rels if r is not None]
    if rels:
        grid = np.arange(1, cfg["grid_points"] + 1) / cfg["grid_points"]
        rel = aggregate(relevance_on_grid(rels, grid))
        run.write_csv(
            "relevance.csv",
            ["p", "F_mean", "F_median", "F_q25", "F_q75"],
            [[_fmt(p), _fmt(m), _fmt(md), _fmt(a), _fmt(b)] for p, m, md, a, b in zip(rel.abscissa, rel.mean, rel.median, rel.q25, rel.q75)],
        )
        summary["token_fraction"] = {
            str(q): float(np.mean([r.quantile_fractions[q] for r in rels])) for q in sorted(rels[0].quantile_fractions)
        }
    run.write_json("summary.json", summary)
    return summary


def _make_merger(dim, window):
    return SparseTokenMerger(dim, window) if window else None


def cmd_pretrain(run: Run, cfg):
    corpus = _split(_load_corpus(_require(cfg, "input"), cfg["_threads"]), cfg["train_fraction"], "train")
    if not corpus:
        raise ConfigError("training split is empty")
    dim = corpus[0].dim
    rcfg = ResamplerConfig(
        in_dim=dim,
        dim=cfg["width"],
        n_latents=cfg["latents"],
        heads=cfg["heads"],
        context_layers=cfg["context_layers"],
        topk_start=cfg["topk_start"],
        topk_end=cfg["topk_end"],
        fourier_bands=cfg["fourier_bands"],
    )
    seed = cfg["seed"]
    model = build_resampler(rcfg, seed=seed)
    pcfg = PretrainConfig(
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        mask_ratio=cfg["mask_ratio"],
        lambda_cover=cfg["lambda_cover"],
        lambda_feat=cfg["lambda_feat"],
        cover_c=cfg["cover_c"],
        seed=seed,
    )
    # pretraining sees unmerged tiles; the merger is trained during fusion
    model, trace = pretrain(model, corpus, pcfg)
    state = {f"resampler.{k}": v for k, v in model.state_dict().items()}
    header = {"resampler": rcfg.to_dict(), "feature_dim": dim}
    save_checkpoint(run.add("resampler.ckpt"), state, header, step=cfg["steps"], seed=seed)
    keys = ["step", "l_rec", "l_cover", "l_feat", "total", "lr"]
    run.write_csv("pretrain_trace.csv", keys + ["k_top"], [[_fmt(r[k]) for k in keys] + [";".join(map(str, r["k_top"]))] for r in trace])
    return {k: trace[-1][k] for k in ("l_rec", "l_cover", "l_feat", "total")} if trace else {}


def _build_pipeline(header, fusion_cfg=None, seed=0):
    rcfg = ResamplerConfig.from_dict(header["resampler"])
    resampler = build_resampler(rcfg, seed=seed)
    torch.manual_seed(sub_seed(seed, "merger-init"))
    merger = _make_merger(header["feature_dim"], header["stm_window"])
    fcfg = fusion_cfg or FusionConfig.from_dict(header["fusion"])
    stack = build_stack(fcfg, seed=seed)
    return Pipeline(resampler, stack, merger)


def cmd_fuse(run: Run, cfg):
    corpus = _split(_load_corpus(_require(cfg, "input"), cfg["_threads"]), cfg["train_fraction"], "train")
    if not corpus:
        raise ConfigError("training split is empty")
    seed = cfg["seed"]
    if cfg["init"]:
        header, tensors = read_checkpoint(cfg["init"])
        base = header["config"]
    else:
        header, tensors = read_checkpoint(_require(cfg, "resampler"))
        base = header["config"]
    n_latents = base["resampler"]["n_latents"]
    if cfg["latents"] is not None and cfg["latents"] != n_latents:
        raise ConfigError(f"--latents {cfg['latents']} does not match the checkpoint's {n_latents}")
    fcfg = FusionConfig(
        latent_dim=base["resampler"]["dim"],
        n_latents=n_latents,
        route_m=cfg["route_m"],
        tau_s=cfg["tau_s"],
        tau_t=cfg["tau_t"],
        lambda_tis=cfg["lambda_tis"],
        lambda_rank=cfg["lambda_rank"],
        margin=cfg["margin"],
        n_pairs=cfg["n_pairs"],
        lm=ToyLmConfig(depth=cfg["lm_depth"], width=cfg["lm_width"], heads=cfg["lm_heads"], cara_layers=cfg["cara_layers"]),
    )
    window = cfg["stm_window"]
    if cfg["init"] and base.get("stm_window") != window:
        raise ConfigError(f"--stm-window {window} differs from the initial checkpoint's {base.get('stm_window')}")
    pipe = _build_pipeline({**base, "stm_window": window}, fcfg, seed)
    load_into(pipe, tensors, strict=bool(cfg["init"]))
    stages = (1, 2) if cfg["stage"] == "all" else (int(cfg["stage"]),)
    fuse_cfg = FuseConfig(
        stages=stages,
        steps={1: cfg["steps_stage1"], 2: cfg["steps_stage2"]},
        lr={1: cfg["lr_stage1"], 2: cfg["lr_stage2"]},
        batch_size=cfg["batch_size"],
        seed=seed,
    )
    trace = train_fusion(pipe, _vqa(corpus), fuse_cfg)
    header_out = {**base, "stm_window": cfg["stm_window"], "fusion": fcfg.to_dict()}
    save_checkpoint(run.add("fusion.ckpt"), pipe.state_dict(), header_out, step=len(trace), seed=seed)
    keys = ["stage", "step", "l_lm", "l_tis", "l_rank", "total"]
    run.write_csv("fusion_trace.csv", keys, [[_fmt(r[k]) for k in keys] for r in trace])
    return trace[-1] if trace else {}


def cmd_eval(run: Run, cfg):
    corpus = _load_corpus(_require(cfg, "input"), cfg["_threads"])
    header, tensors = read_checkpoint(_require(cfg, "checkpoint"))
    pipe = _build_pipeline(header["config"], seed=header["seed"])
    load_into(pipe, tensors)
    data = _vqa(corpus)
    train = [s for _, s in _split(data, cfg["train_fraction"], "train")]
    part = _split(data, cfg["train_fraction"], cfg["split"])
    if not part:
        raise ConfigError(f"{cfg['split']} split is empty")
    res = evaluate(pipe, part, train_samples=train or None, batch_size=cfg["batch_size"])
    metrics = {
        "accuracy": res.accuracy,
        "majority_baseline": res.majority_baseline,
        "n": res.n,
        "l_lm": res.l_lm,
        "l_tis": res.l_tis,
        "l_rank": res.l_rank,
        "total": res.total,
    }
    run.write_csv("eval.csv", ["metric", "value"], [[k, _fmt(v)] for k, v in metrics.items()])
    run.write_json("eval.json", metrics)
    return metrics


def _parse_scenario(text):
    out = {}
    for item in text.split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise ConfigError(f"scenario entries must be key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = int(v)
    return out


def cmd_cost(run: Run, cfg):
    presets = {"paper": CostScenario.paper, "toy": CostScenario.toy}
    if cfg["preset"] not in presets:
        raise ConfigError(f"preset must be one of {sorted(presets)}")
    fields = {}
    if cfg["scenario_file"]:
        with open(cfg["scenario_file"], encoding="utf-8") as fh:
            fields.update(json.load(fh))
    if cfg["scenario"]:
        fields.update(_parse_scenario(cfg["scenario"]))
    fields.setdefault("vision_tokens", cfg["vision_tokens"])
    base = presets[cfg["preset"]]()
    try:
        sc = base.replace(**fields)
    except TypeError as exc:
        raise ConfigError(f"unknown scenario field: {exc}") from exc
    report = compare(sc)
    run.write_csv("cost.csv", ["metric", "llava", "cara", "reduction_percent"], report.csv_rows())
    run.write_csv(
        "stm_table.csv",
        ["window", "tokens", "encode_flops", "reduction_percent"],
        [[r["window"], r["tokens"], r["encode_flops"], f"{r['reduction_percent']:.4f}"] for r in report.stm_table],
    )
    run.write_json("cost.json", report.to_dict())
    return report.reduction_percent


COMMANDS = {
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "pretrain": cmd_pretrain,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
    "cost": cmd_cost,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="slidecompress", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", default=None, help="TOML or JSON config file")
        for key, (default, _) in {**COMMON, **opts}.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=argparse.SUPPRESS, help=f"default: {default}")
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parser = build_parser()
        args = vars(parser.parse_args(argv))
        command = args.pop("command")
        if command is None:
            raise ConfigError("a subcommand is required: " + ", ".join(COMMANDS))
        config_path = args.pop("config")
        cfg = resolve(command, args, config_path)
        threads = _thread_count(cfg)
        torch.set_num_threads(threads)
        run = Run(command, cfg)
        result = COMMANDS[command](run, {**cfg, "_threads": threads})
        run.finish()
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"ConfigError: {exc}", file=sys.stderr)
        return 2
    except (SlideCompressError, OSError, OverflowError, ValueError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if result:
        print(json.dumps(_jsonable(result), sort_keys=True, default=str))
    return 0
