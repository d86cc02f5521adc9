"""Command-line surface: dataset generation, training, perturbation/saliency
runs, the three evaluation games, ablation sweeps and the randomization sanity
check.

Every command resolves its configuration from built-in defaults, an optional
JSON ``--config`` file, dedicated flags, and repeatable ``--set key=value``
overrides (in that order), then writes a ``run.json`` with the resolved
config, its hash, the seed, tool version and wall time.  Timestamps live only
in ``run.json`` so the data outputs of identical configs are byte-identical.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import functools
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, data, games, model, perturb, saliency
from .model import LayerSet
from .perturb import MarginSpec, PerturbConfig

ENV_WORKERS = "PBALL_WORKERS"


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 1."""

    def error(self, message):
        raise ValidationError(message)


# ---------------------------------------------------------------------------
# config plumbing

def _parse_set(values) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ValidationError(f"--set needs key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve_config(defaults: dict, args, flag_names: dict) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise ValidationError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            loaded = json.load(fh)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, attr in flag_names.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg[key] = val
    for key, val in _parse_set(getattr(args, "set", None)).items():
        if key not in defaults:
            raise ValidationError(f"unknown config key in --set: {key}")
        cfg[key] = val
    return cfg


def _hashable_config(cfg: dict) -> dict:
    return {k: v for k, v in sorted(cfg.items()) if k not in ("out", "workers")}


def _write_run_json(outdir: str, command: str, cfg: dict, t0: float) -> str:
    chash = games.config_hash(_hashable_config(cfg))
    payload = {
        "command": command,
        "config": cfg,
        "config_hash": chash,
        "seed": cfg.get("seed"),
        "version": __version__,
        "wall_time_s": time.time() - t0,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(t0)),
    }
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "run.json"), "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return chash


def _workers(args) -> int:
    if getattr(args, "workers", None) is not None:
        return max(1, args.workers)
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"{ENV_WORKERS} must be an integer, got {env!r}")
    return 1


def _parse_range(text: str) -> tuple:
    """'i:j' -> (i, j) half-open ReLU ordinal range."""
    try:
        i, j = (int(v) for v in text.split(":"))
    except ValueError:
        raise ValidationError(f"expected i:j range, got {text!r}")
    if j < i:
        raise ValidationError(f"range {text!r} has j < i")
    return i, j


def _parse_sigma_grid(text: str) -> list:
    """'a:b:step' inclusive grid, or a comma list of values."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"expected a:b:step sigma grid, got {text!r}")
        try:
            a, b, step = (float(v) for v in parts)
        except ValueError:
            raise ValidationError(f"non-numeric sigma grid {text!r}")
        if step <= 0 or b < a:
            raise ValidationError(f"bad sigma grid {text!r}")
        n = int(round((b - a) / step))
        return [round(a + k * step, 10) for k in range(n + 1)]
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ValidationError(f"non-numeric sigma list {text!r}")


def _need_file(path, what: str):
    if not path:
        raise ValidationError(f"missing required {what}")
    if not os.path.exists(path):
        raise ValidationError(f"{what} not found: {path}")
    return path


def _perturb_config(cfg: dict) -> PerturbConfig:
    i, j = _parse_range(cfg["layers"])
    return PerturbConfig(
        target_margin=cfg["target"],
        pixel_weight=cfg["lambda"],
        percept_weight=cfg["lambda_prime"],
        layer_set=LayerSet.of_range(i, j),
        step_size=cfg["step_size"],
        max_iters=cfg["max_iters"],
        stop_tol=cfg["stop_tol"],
        seed=cfg["seed"],
        clamp_result=cfg["clamp"],
    )


_PERTURB_DEFAULTS = {
    "target": -2.0,
    "lambda": 1.0,
    "lambda_prime": 10000.0,
    "layers": "1:4",
    "step_size": 0.1,
    "max_iters": 2000,
    "stop_tol": 1e-2,
    "clamp": False,
}


def _add_perturb_flags(p: argparse.ArgumentParser):
    p.add_argument("--target", type=float, help="target margin (< 0)")
    p.add_argument("--lambda", dest="pixel_weight", type=float,
                   help="pixel-space penalty weight")
    p.add_argument("--lambda-prime", dest="lambda_prime", type=float,
                   help="perceptual penalty weight")
    p.add_argument("--layers", help="ReLU ordinal range i:j to regularize")
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--stop-tol", dest="stop_tol", type=float)
    p.add_argument("--clamp", action="store_const", const=True,
                   help="clip the final image to [0,1]")


_PERTURB_FLAGS = {
    "target": "target",
    "lambda": "pixel_weight",
    "lambda_prime": "lambda_prime",
    "layers": "layers",
    "step_size": "step_size",
    "max_iters": "max_iters",
    "stop_tol": "stop_tol",
    "clamp": "clamp",
}


def _add_common(p: argparse.ArgumentParser, need_out=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=need_out, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int,
                   help=f"worker processes (default ${ENV_WORKERS} or 1)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field by dotted path")


# ---------------------------------------------------------------------------
# commands

def _cmd_gen_data(args) -> int:
    t0 = time.time()
    defaults = {"count": 200, "size": 32, "classes": 4,
                "difficult_fraction": 0.3, "seed": 0, "out": args.out}
    cfg = _resolve_config(defaults, args, {
        "count": "count", "size": "size", "classes": "classes",
        "difficult_fraction": "difficult_fraction", "seed": "seed"})
    samples = data.gen_shapes(cfg["count"], cfg["size"], cfg["classes"],
                              cfg["difficult_fraction"], cfg["seed"])
    data.save_dataset(samples, args.out)
    _write_run_json(args.out, "gen-data", cfg, t0)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "arch": "minivgg", "classes": 4, "width": 16,
                "epochs": 10, "lr": 0.05, "batch_size": 16, "seed": 0,
                "out": args.out}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "arch": "arch", "classes": "classes", "width": "width",
        "epochs": "epochs", "lr": "lr", "batch_size": "batch_size",
        "seed": "seed"})
    _need_file(cfg["data"], "dataset directory")
    dataset = data.load_dataset(cfg["data"])
    size = dataset[0].image.shape[1]
    if cfg["arch"] == "minivgg":
        spec = model.minivgg(cfg["classes"], size, cfg["width"])
    elif cfg["arch"] == "minivgg-det":
        spec = model.minivgg_detector(cfg["classes"], size, cfg["width"])
    else:
        raise ValidationError(f"unknown arch {cfg['arch']!r}")
    net = model.train(spec, dataset, cfg["epochs"], cfg["lr"], cfg["seed"],
                      batch_size=cfg["batch_size"])
    os.makedirs(args.out, exist_ok=True)
    wpath = os.path.join(args.out, "model.wts")
    model.save_weights(net, wpath)
    _write_run_json(args.out, "train", cfg, t0)
    print(f"trained {cfg['arch']} (accuracy {net.train_accuracy:.3f}) -> {wpath}")
    return 0


def _load_eval_inputs(cfg):
    _need_file(cfg["data"], "dataset directory")
    _need_file(cfg["weights"], "weights file")
    dataset = data.load_dataset(cfg["data"])
    net = model.load_network(cfg["weights"])
    return dataset, net


def _cmd_perturb(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "weights": None, "index": 0, "class": None,
                "seed": 0, "out": args.out, **_PERTURB_DEFAULTS}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "weights": "weights", "index": "index",
        "class": "class_index", "seed": "seed", **_PERTURB_FLAGS})
    dataset, net = _load_eval_inputs(cfg)
    if not 0 <= cfg["index"] < len(dataset):
        raise ValidationError(f"sample index {cfg['index']} out of range")
    sample = dataset[cfg["index"]]
    cls = sample.label if cfg["class"] is None else int(cfg["class"])
    pcfg = _perturb_config(cfg)
    mode = net.mode
    mspec = MarginSpec(mode, cls, suppress_all_regions=(mode == model.MULTI_LABEL))
    res = perturb.find_perturbation(sample.image, net, mspec, pcfg,
                                    check_classification=False)
    os.makedirs(args.out, exist_ok=True)
    from . import container as cont
    chash = _write_run_json(args.out, "perturb", cfg, t0)
    cont.write_tensors(os.path.join(args.out, "perturbation.tns"),
                       {"x": sample.image.array, "x_prime": res.x_prime.array},
                       {"config_hash": chash, "class": int(cls)})
    with open(os.path.join(args.out, "perturb.json"), "w") as fh:
        json.dump({
            "config_hash": chash,
            "class": int(cls),
            "final_margin": res.final_margin,
            "final_objective": res.final_objective,
            "iterations_used": res.iterations_used,
            "converged": res.converged,
            "objective_trajectory": res.objective_trajectory,
        }, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"margin {res.final_margin:.4f} after {res.iterations_used} iterations "
          f"(converged={res.converged})")
    return 0


def _cmd_saliency(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "weights": None, "index": 0, "class": None,
                "sigma": 2.0, "guided": False, "normalize_first": False,
                "seed": 0, "out": args.out, **_PERTURB_DEFAULTS}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "weights": "weights", "index": "index",
        "class": "class_index", "sigma": "sigma", "guided": "guided",
        "normalize_first": "normalize_first", "seed": "seed", **_PERTURB_FLAGS})
    dataset, net = _load_eval_inputs(cfg)
    if not 0 <= cfg["index"] < len(dataset):
        raise ValidationError(f"sample index {cfg['index']} out of range")
    sample = dataset[cfg["index"]]
    cls = sample.label if cfg["class"] is None else int(cfg["class"])
    pcfg = _perturb_config(cfg)
    mode = net.mode
    mspec = MarginSpec(mode, cls, suppress_all_regions=(mode == model.MULTI_LABEL))
    res = perturb.find_perturbation(sample.image, net, mspec, pcfg,
                                    check_classification=False)
    smap = saliency.build(sample.image, res.x_prime, net, cls, cfg["sigma"],
                          guided=cfg["guided"], normalize_first=cfg["normalize_first"],
                          layer_set=pcfg.layer_set)
    os.makedirs(args.out, exist_ok=True)
    saliency.save_map(smap, os.path.join(args.out, "saliency"))
    _write_run_json(args.out, "saliency", cfg, t0)
    print(f"wrote saliency map ({cfg['sigma']=}, guided={cfg['guided']}) to {args.out}")
    return 0


def _cmd_eval_localization(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "weights": None, "sigma": 2.0, "guided": False,
                "alpha_step": 0.05, "seed": 0, "out": args.out,
                **_PERTURB_DEFAULTS}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "weights": "weights", "sigma": "sigma",
        "guided": "guided", "alpha_step": "alpha_step", "seed": "seed",
        **_PERTURB_FLAGS})
    dataset, net = _load_eval_inputs(cfg)
    pcfg = _perturb_config(cfg)
    fn = functools.partial(games.single_label_saliency, net=net, cfg=pcfg,
                           sigma=cfg["sigma"], guided=cfg["guided"],
                           normalize_first=True)
    report = games.weak_localization(
        dataset, fn, strategy_grid=games.default_strategy_grid(cfg["alpha_step"]),
        workers=_workers(args), config=_hashable_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    games.write_report_csv(report, os.path.join(args.out, "localization.csv"))
    games.write_report_json(report, os.path.join(args.out, "localization.json"))
    _write_run_json(args.out, "eval-localization", cfg, t0)
    print(f"best localization error {report.aggregates['best_error']:.4f} "
          f"over {report.aggregates['images']} images")
    return 0


def _cmd_eval_insdel(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "weights": None, "sigma": 0.0, "steps": 100,
                "sigma_base": 10.0, "seed": 0, "out": args.out,
                **_PERTURB_DEFAULTS}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "weights": "weights", "sigma": "sigma",
        "steps": "steps", "sigma_base": "sigma_base", "seed": "seed",
        **_PERTURB_FLAGS})
    dataset, net = _load_eval_inputs(cfg)
    pcfg = _perturb_config(cfg)
    fn = functools.partial(games.single_label_saliency, net=net, cfg=pcfg,
                           sigma=cfg["sigma"])
    report = games.insertion_deletion(dataset, fn, net, steps=cfg["steps"],
                                      sigma_base=cfg["sigma_base"],
                                      workers=_workers(args),
                                      config=_hashable_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    games.write_report_csv(report, os.path.join(args.out, "insdel.csv"))
    games.write_report_json(report, os.path.join(args.out, "insdel.json"))
    _write_run_json(args.out, "eval-insdel", cfg, t0)
    print(f"mean deletion AUC {report.aggregates['mean_deletion_auc']:.4f}, "
          f"mean insertion AUC {report.aggregates['mean_insertion_auc']:.4f}")
    return 0


def _cmd_eval_pointing(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "weights": None, "sigma": 1.0, "tolerance": 15,
                "resize": "none", "seed": 0, "out": args.out,
                **{**_PERTURB_DEFAULTS, "target": -10.0, "lambda_prime": 1000.0}}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "weights": "weights", "sigma": "sigma",
        "tolerance": "tolerance", "resize": "resize", "seed": "seed",
        **_PERTURB_FLAGS})
    if cfg["resize"] not in ("none", games.RESIZE_BILINEAR_1_5X):
        raise ValidationError(f"--resize must be none or {games.RESIZE_BILINEAR_1_5X}")
    dataset, net = _load_eval_inputs(cfg)
    pcfg = _perturb_config(cfg)
    fn = functools.partial(games.detector_saliency, net=net, cfg=pcfg,
                           sigma=cfg["sigma"])
    resize = None if cfg["resize"] == "none" else cfg["resize"]
    report = games.pointing_game(dataset, fn, tolerance_px=cfg["tolerance"],
                                 resize=resize, workers=_workers(args),
                                 config=_hashable_config(cfg))
    os.makedirs(args.out, exist_ok=True)
    games.write_report_csv(report, os.path.join(args.out, "pointing.csv"))
    games.write_report_json(report, os.path.join(args.out, "pointing.json"))
    _write_run_json(args.out, "eval-pointing", cfg, t0)
    print(f"pointing success {report.aggregates['success_rate']:.4f} "
          f"(difficult {report.aggregates['success_rate_difficult']:.4f})")
    return 0


def _cmd_ablate(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "weights": None, "game": "pointing",
                "ranges": "all", "sigma": "0:4:1", "robustness_bar": 0.82,
                "tolerance": 0, "steps": 50, "sigma_base": 10.0,
                "alpha_step": 0.05, "seed": 0, "out": args.out,
                **_PERTURB_DEFAULTS}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "weights": "weights", "game": "game",
        "ranges": "ranges", "sigma": "sigma", "robustness_bar": "robustness_bar",
        "tolerance": "tolerance", "steps": "steps", "sigma_base": "sigma_base",
        "alpha_step": "alpha_step", "seed": "seed", **_PERTURB_FLAGS})
    dataset, net = _load_eval_inputs(cfg)
    sigmas = _parse_sigma_grid(cfg["sigma"])
    if cfg["ranges"] == "all":
        n = net.spec.relu_count
        ranges = [(i, j) for i in range(n) for j in range(i, n + 1) if j >= i]
    else:
        ranges = [_parse_range(r) for r in cfg["ranges"].split(",")]
    base = _perturb_config(cfg)
    game_names = ["deletion", "insertion"] if cfg["game"] == "insdel" else [cfg["game"]]
    os.makedirs(args.out, exist_ok=True)
    for game_name in game_names:
        report = games.ablation_sweep(
            dataset, net, game_name, ranges, sigmas, base,
            tolerance_px=cfg["tolerance"], steps=cfg["steps"],
            sigma_base=cfg["sigma_base"], alpha_step=cfg["alpha_step"],
            robustness_bar=cfg["robustness_bar"], workers=_workers(args),
            config=_hashable_config(cfg))
        games.write_ablation_csv(report, os.path.join(args.out, f"ablation_{game_name}.csv"))
        games.write_ablation_json(report, os.path.join(args.out, f"ablation_{game_name}.json"))
    _write_run_json(args.out, "ablate", cfg, t0)
    print(f"swept {len(ranges)} layer ranges x {len(sigmas)} sigmas "
          f"({', '.join(game_names)})")
    return 0


def _cmd_sanity_check(args) -> int:
    t0 = time.time()
    defaults = {"data": None, "weights": None, "positions": "",
                "sigma": 1.0, "tolerance": 0, "seed": 0, "out": args.out,
                **{**_PERTURB_DEFAULTS, "target": -10.0, "lambda_prime": 1000.0}}
    cfg = _resolve_config(defaults, args, {
        "data": "data", "weights": "weights", "positions": "positions",
        "sigma": "sigma", "tolerance": "tolerance", "seed": "seed",
        **_PERTURB_FLAGS})
    dataset, net = _load_eval_inputs(cfg)
    n_layers = len(net.spec.layers)
    if cfg["positions"]:
        try:
            positions = [int(p) for p in str(cfg["positions"]).split(",")]
        except ValueError:
            raise ValidationError(f"bad --positions list {cfg['positions']!r}")
    else:
        positions = sorted({n_layers, 3 * n_layers // 4, n_layers // 2, 0}, reverse=True)
    pcfg = _perturb_config(cfg)
    rows = []
    for pos in positions:
        randomized = model.randomize_from(net, pos, cfg["seed"])
        fn = functools.partial(games.detector_saliency, net=randomized, cfg=pcfg,
                               sigma=cfg["sigma"])
        report = games.pointing_game(dataset, fn, tolerance_px=cfg["tolerance"],
                                     workers=_workers(args),
                                     config=_hashable_config(cfg))
        rows.append({"randomize_from": pos,
                     "layers_randomized": n_layers - pos,
                     "success_rate": report.aggregates["success_rate"]})
    os.makedirs(args.out, exist_ok=True)
    chash = _write_run_json(args.out, "sanity-check", cfg, t0)
    with open(os.path.join(args.out, "sanity.csv"), "w", newline="") as fh:
        fh.write("randomize_from,config_hash,layers_randomized,success_rate\n")
        for r in rows:
            fh.write(f"{r['randomize_from']},{chash},{r['layers_randomized']},"
                     f"{r['success_rate']!r}\n")
    for r in rows:
        print(f"randomize_from={r['randomize_from']:3d} "
              f"success_rate={r['success_rate']:.4f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="percsal",
                description="perceptual perturbation saliency toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    _add_common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--classes", type=int)
    sp.add_argument("--difficult-fraction", dest="difficult_fraction", type=float)
    sp.set_defaults(func=_cmd_gen_data)

    sp = sub.add_parser("train", help="train a desk-scale classifier")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--arch", choices=["minivgg", "minivgg-det"])
    sp.add_argument("--classes", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("perturb", help="find a perturbation for one sample")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--weights")
    sp.add_argument("--index", type=int)
    sp.add_argument("--class", dest="class_index", type=int)
    _add_perturb_flags(sp)
    sp.set_defaults(func=_cmd_perturb)

    sp = sub.add_parser("saliency", help="build a saliency map for one sample")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--weights")
    sp.add_argument("--index", type=int)
    sp.add_argument("--class", dest="class_index", type=int)
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--guided", action="store_const", const=True)
    sp.add_argument("--normalize-first", dest="normalize_first",
                    action="store_const", const=True)
    _add_perturb_flags(sp)
    sp.set_defaults(func=_cmd_saliency)

    sp = sub.add_parser("eval-localization", help="weak localization game")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--weights")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--guided", action="store_const", const=True)
    sp.add_argument("--alpha-step", dest="alpha_step", type=float)
    _add_perturb_flags(sp)
    sp.set_defaults(func=_cmd_eval_localization)

    sp = sub.add_parser("eval-insdel", help="insertion/deletion game")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--weights")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--sigma-base", dest="sigma_base", type=float)
    _add_perturb_flags(sp)
    sp.set_defaults(func=_cmd_eval_insdel)

    sp = sub.add_parser("eval-pointing", help="pointing game")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--weights")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--tolerance", type=int)
    sp.add_argument("--resize", choices=["none", games.RESIZE_BILINEAR_1_5X])
    _add_perturb_flags(sp)
    sp.set_defaults(func=_cmd_eval_pointing)

    sp = sub.add_parser("ablate", help="layer-range / sigma ablation sweep")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--weights")
    sp.add_argument("--game", choices=["localization", "deletion", "insertion",
                                       "pointing", "insdel"])
    sp.add_argument("--ranges", help="'all' or comma list of i:j ranges")
    sp.add_argument("--sigma", help="a:b:step grid or comma list")
    sp.add_argument("--robustness-bar", dest="robustness_bar", type=float)
    sp.add_argument("--tolerance", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--sigma-base", dest="sigma_base", type=float)
    sp.add_argument("--alpha-step", dest="alpha_step", type=float)
    _add_perturb_flags(sp)
    sp.set_defaults(func=_cmd_ablate)

    sp = sub.add_parser("sanity-check",
                        help="progressive weight randomization vs pointing accuracy")
    _add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--weights")
    sp.add_argument("--positions", help="comma list of randomize-from layer positions")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--tolerance", type=int)
    _add_perturb_flags(sp)
    sp.set_defaults(func=_cmd_sanity_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (data.DatasetError, model.SpecError, model.WeightFormatError,
            perturb.PerturbError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
