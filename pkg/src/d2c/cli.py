"""Pipeline driver.

Nine subcommands cover the full path from toy data to a metric table:

    gen-data -> train-ref -> score -> select -> attach -> train -> sample -> eval
    compare (runs the whole sweep with caching)

Every subcommand reads a JSON config (defaults <- --config file <- --set
overrides), writes its outputs plus ``effective-config.json`` and a
``manifest.json`` of output checksums into --out, and prints one
machine-parsable summary line. Errors print a single ``error: <kind>: ...``
line; exit codes: 0 ok, 2 usage or configuration, 3 missing or malformed
files, 4 infeasible budgets or numeric failures.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .attacher import AttachConfig, build_condensed, class_bundles, \
    read_condensed, write_condensed
from .datagen import LabeledDataset, default_class_names, generate, \
    read_dataset, split_train_heldout, write_dataset
from .evaluator import ComparisonConfig, frechet_distance, mmd_rbf, \
    run_comparison
from .io_common import FileFormatError, fingerprint_hex
from .model import DenoiserModel, ModelConfig, load_model, save_model
from .scorer import MCConfig, check_fingerprint, read_scores, score_dataset, \
    scores_to_csv, write_scores
from .schedule import make_schedule
from .selector import BudgetError, SelectionSpec, read_selection, select, \
    write_selection
from .trainer import TrainConfig, bundles_for_data, sample_per_class, train, \
    train_reference


class ConfigError(ValueError):
    """Bad key, bad type, or unparsable configuration input."""


# ----------------------------------------------------------- config registry

def _model_panel(**over):
    base = {"d_model": 16, "blocks": 3, "tokens": 4, "align_block": 2,
            "seed": 0}
    base.update(over)
    return base


def _train_panel(**over):
    base = {"steps": 400, "batch_size": 32, "lr": 1e-4, "beta1": 0.9,
            "beta2": 0.999, "adam_eps": 1e-8, "lambda_proj": 0.5,
            "p_null": 0.1, "seed": 0, "ema_decay": 0.0, "use_text": True,
            "use_class": True, "log_every": 10}
    base.update(over)
    return base


def _attach_panel():
    return {"L": 8, "d_text": 32, "d_feat": 16, "h": 4, "text_seed": 0,
            "visual_seed": 0}


def _mc_panel():
    return {"S_t": 8, "S_eps": 4, "base_seed": 0}


VARIANT_TEMPLATE = {"strategy": "interval", "m": 10, "k": 1, "seed": 0}

DEFAULT_VARIANTS = (
    [{"strategy": "interval", "m": 10, "k": k, "seed": 0} for k in (1, 4, 8, 12)]
    + [{"strategy": s, "m": 10, "k": 1, "seed": 0}
       for s in ("random", "min", "max", "herding", "kcenter")])

CONFIGS = {
    "gen-data": {
        "kind": "gauss2d", "classes": 8, "n_per_class": 64,
        "clutter_max": 2.0, "seed": 0, "split": "none",
        "gauss": {"dim": 2, "radius": 4.0, "class_std": 0.5},
        "shapes": {"jitter": True},
    },
    "train-ref": {
        "schedule": "vp-continuous",
        "model": _model_panel(),
        "attach": {"d_text": 32, "d_feat": 16, "L": 8, "text_seed": 0},
        "train": _train_panel(),
    },
    "score": {
        "schedule": "vp-continuous",
        "mc": _mc_panel(),
        "text_L": 8, "text_seed": 0, "threads": 0,
    },
    "select": {"strategy": "interval", "m": 10, "k": 1, "seed": 0},
    "attach": _attach_panel(),
    "train": {
        "schedule": "linear-flow", "prediction": "velocity",
        # no model.tokens here: the feature-token count is pinned to the
        # condensed file's visual-token layout
        "model": {k: v for k, v in _model_panel().items() if k != "tokens"},
        "train": _train_panel(),
        "use_proj": True,
    },
    "sample": {
        "schedule": "auto", "n_per_class": 64, "steps": 16,
        "cfg_scale": 1.0, "seed": 0, "p_null_hint": -1.0,
        "text": {"L": 8, "seed": 0},
    },
    "eval": {"mmd_bandwidth": 0.0},
    "compare": {
        "seeds": [0],
        "model": {k: v for k, v in _model_panel().items() if k != "tokens"},
        "attach": _attach_panel(),
        "mc": _mc_panel(),
        "ref_train": _train_panel(lr=1e-3),
        "cond_train": _train_panel(lr=1e-3),
        "eval": {"n_per_class": 64, "steps": 16, "cfg_scale": 1.0},
        "variants": DEFAULT_VARIANTS,
        "cache": True,
    },
}


def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false at {path}, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or int(value) != value:
            raise ConfigError(f"expected an integer at {path}, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number at {path}, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string at {path}, got {value!r}")
        return value
    raise ConfigError(f"cannot override {path}")


def merge_config(defaults: dict, user: dict, path: str = "") -> dict:
    """Defaults overlaid with user values; unknown keys are rejected with
    their JSON-pointer path."""
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        p = f"{path}/{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key at {p}")
        d = defaults[key]
        if isinstance(d, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"expected an object at {p}")
            out[key] = merge_config(d, value, p)
        elif isinstance(d, list):
            if not isinstance(value, list):
                raise ConfigError(f"expected a list at {p}")
            if key == "variants":
                out[key] = [merge_config(VARIANT_TEMPLATE, v, f"{p}/{i}")
                            if isinstance(v, dict)
                            else _fail_list_item(f"{p}/{i}")
                            for i, v in enumerate(value)]
            elif key == "seeds":
                out[key] = [_coerce(0, v, f"{p}/{i}")
                            for i, v in enumerate(value)]
            else:
                out[key] = value
        else:
            out[key] = _coerce(d, value, p)
    return out


def _fail_list_item(path):
    raise ConfigError(f"expected an object at {path}")


def _parse_set(expr: str) -> dict:
    if "=" not in expr:
        raise ConfigError(f"--set needs KEY=VALUE, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw                      # bare strings stay strings
    node: dict = {}
    leaf = node
    parts = key.split(".")
    for part in parts[:-1]:
        leaf = leaf.setdefault(part, {})
    leaf[parts[-1]] = value
    return node


def _deep_update(dst: dict, src: dict) -> dict:
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict):
            _deep_update(dst[k], v)
        else:
            dst[k] = v
    return dst


def resolve_config(command: str, args) -> dict:
    user: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON "
                              f"object")
        _deep_update(user, loaded)
    for expr in args.overrides:
        _deep_update(user, _parse_set(expr))
    return merge_config(CONFIGS[command], user)


# ------------------------------------------------------------- run-dir output

def _finish(args, command: str, cfg: dict, files: list[str],
            extra: str = "") -> int:
    out = args.out
    with open(os.path.join(out, "effective-config.json"), "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=1)
    checks = {}
    for name in list(files) + ["effective-config.json"]:
        with open(os.path.join(out, name), "rb") as fh:
            checks[name] = fingerprint_hex(fh.read())
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump({"command": command, "files": checks}, fh, sort_keys=True,
                  indent=1)
    line = f"ok {command} out={out}"
    if extra:
        line += " " + extra
    print(line)
    return 0


def _model_config(panel: dict, C: int, D: int, d_text: int, d_feat: int,
                  h: int, prediction: str) -> ModelConfig:
    return ModelConfig(C=C, D=D, d_model=panel["d_model"], d_text=d_text,
                       d_feat=d_feat, B=panel["blocks"], h=h,
                       ell=panel["align_block"], prediction_kind=prediction)


def _train_config(panel: dict, use_proj: bool) -> TrainConfig:
    return TrainConfig(steps=panel["steps"], batch_size=panel["batch_size"],
                       lr=panel["lr"], beta1=panel["beta1"],
                       beta2=panel["beta2"], adam_eps=panel["adam_eps"],
                       lambda_proj=panel["lambda_proj"],
                       p_null=panel["p_null"], seed=panel["seed"],
                       ema_decay=panel["ema_decay"],
                       use_text=panel["use_text"],
                       use_class=panel["use_class"], use_proj=use_proj,
                       log_every=panel["log_every"])


# ----------------------------------------------------------------- commands

def cmd_gen_data(args, cfg) -> int:
    kw = {}
    if cfg["kind"] == "gauss2d":
        kw = {"dim": cfg["gauss"]["dim"], "radius": cfg["gauss"]["radius"],
              "class_std": cfg["gauss"]["class_std"]}
    elif cfg["kind"] == "shapes8x8":
        kw = {"jitter": cfg["shapes"]["jitter"]}
    ds = generate(cfg["kind"], cfg["classes"], cfg["n_per_class"],
                  cfg["clutter_max"], cfg["seed"], **kw)
    if cfg["split"] not in ("none", "train", "heldout"):
        raise ConfigError(f"unknown split '{cfg['split']}' at /split")
    if cfg["split"] != "none":
        tr, he = split_train_heldout(ds)
        ds = tr if cfg["split"] == "train" else he
    write_dataset(ds, os.path.join(args.out, "data.d2cd"))
    return _finish(args, "gen-data", cfg, ["data.d2cd"],
                   f"n={ds.n} dim={ds.dim} classes={ds.class_count}")


def cmd_train_ref(args, cfg) -> int:
    ds = read_dataset(args.data)
    sched = make_schedule(cfg["schedule"])
    a = cfg["attach"]
    mcfg = _model_config(cfg["model"], ds.class_count, ds.dim,
                         a["d_text"], a["d_feat"], cfg["model"]["tokens"],
                         "epsilon")
    model = DenoiserModel(mcfg, seed=cfg["model"]["seed"])
    res = train_reference(model, sched, ds,
                          _train_config(cfg["train"], use_proj=False),
                          text_seed=a["text_seed"])
    save_model(res.model, os.path.join(args.out, "model.d2cm"))
    save_model(res.ema, os.path.join(args.out, "ema.d2cm"))
    res.log.to_csv(os.path.join(args.out, "train_log.csv"))
    last = res.log.rows[-1]["L_diff"] if res.log.rows else float("nan")
    return _finish(args, "train-ref", cfg,
                   ["model.d2cm", "ema.d2cm", "train_log.csv"],
                   f"steps={cfg['train']['steps']} final_L_diff={last:.6g}")


def cmd_score(args, cfg) -> int:
    ds = read_dataset(args.data)
    model = load_model(args.model)
    sched = make_schedule(cfg["schedule"])
    mc = MCConfig(S_t=cfg["mc"]["S_t"], S_eps=cfg["mc"]["S_eps"],
                  base_seed=cfg["mc"]["base_seed"])
    threads = cfg["threads"] or None
    table = score_dataset(model, sched, ds, mc, threads=threads,
                          text_L=cfg["text_L"], text_seed=cfg["text_seed"])
    write_scores(table, os.path.join(args.out, "scores.d2cs"))
    scores_to_csv(table, os.path.join(args.out, "scores.csv"))
    q = np.percentile(table.scores, [0, 50, 100])
    return _finish(args, "score", cfg, ["scores.d2cs", "scores.csv"],
                   f"n={len(table.scores)} min={q[0]:.4g} median={q[1]:.4g} "
                   f"max={q[2]:.4g}")


def cmd_select(args, cfg) -> int:
    table = read_scores(args.scores) if args.scores else None
    ds = read_dataset(args.data) if args.data else None
    spec = SelectionSpec(strategy=cfg["strategy"], m=cfg["m"],
                         k=cfg["k"] if cfg["strategy"] == "interval" else None,
                         seed=cfg["seed"])
    res = select(spec, table=table, dataset=ds)
    write_selection(res, os.path.join(args.out, "selection.csv"),
                    scores=None if table is None else table.scores)
    total = sum(res.counts.values())
    return _finish(args, "select", cfg, ["selection.csv",
                                         "selection.csv.spec.json"],
                   f"strategy={spec.strategy} selected={total}")


def cmd_attach(args, cfg) -> int:
    ds = read_dataset(args.data)
    sel = read_selection(args.selection)
    table = read_scores(args.scores) if args.scores else None
    acfg = AttachConfig(L=cfg["L"], d_text=cfg["d_text"],
                        d_feat=cfg["d_feat"], h=cfg["h"],
                        text_seed=cfg["text_seed"],
                        visual_seed=cfg["visual_seed"])
    cd = build_condensed(ds, sel, acfg, score_table=table)
    write_condensed(cd, os.path.join(args.out, "condensed.d2cd"))
    return _finish(args, "attach", cfg, ["condensed.d2cd"],
                   f"n={cd.n} tokens={acfg.h}x{acfg.d_feat}")


def cmd_train(args, cfg) -> int:
    cd = read_condensed(args.condensed)
    if cfg["prediction"] == "velocity" and cfg["schedule"] != "linear-flow":
        raise ConfigError("velocity prediction pairs with the linear-flow "
                          "schedule only (set /schedule or /prediction)")
    sched = make_schedule(cfg["schedule"])
    ac = cd.config
    C = len(cd.class_ids)
    mcfg = _model_config(cfg["model"], C, cd.dim, ac.d_text, ac.d_feat,
                         ac.h, cfg["prediction"])
    model = DenoiserModel(mcfg, seed=cfg["model"]["seed"])
    res = train(model, sched, cd,
                _train_config(cfg["train"], use_proj=cfg["use_proj"]))
    save_model(res.model, os.path.join(args.out, "model.d2cm"))
    save_model(res.ema, os.path.join(args.out, "ema.d2cm"))
    res.log.to_csv(os.path.join(args.out, "train_log.csv"))
    last = res.log.rows[-1] if res.log.rows else {"L_total": float("nan")}
    return _finish(args, "train", cfg,
                   ["model.d2cm", "ema.d2cm", "train_log.csv"],
                   f"steps={cfg['train']['steps']} "
                   f"final_L_total={last['L_total']:.6g}")


def cmd_sample(args, cfg) -> int:
    model = load_model(args.model)
    if args.condensed:
        cd = read_condensed(args.condensed)
        by_id = cd.bundles()
        bundles = [by_id[c] for c in sorted(by_id)]
        names = cd.class_names
    else:
        ds = read_dataset(args.data)
        names = ds.class_names or default_class_names(ds.class_count)
        bundles = class_bundles(names, d_text=model.cfg.d_text,
                                L=cfg["text"]["L"], seed=cfg["text"]["seed"])
    kind = cfg["schedule"]
    if kind == "auto":
        kind = "linear-flow" if model.cfg.prediction_kind == "velocity" \
            else "ddpm-discrete"
    sched = make_schedule(kind)
    hint = cfg["p_null_hint"]
    x, y = sample_per_class(model, sched, bundles, cfg["n_per_class"],
                            steps=cfg["steps"], cfg_scale=cfg["cfg_scale"],
                            seed=cfg["seed"],
                            p_null_hint=None if hint < 0 else hint)
    out_ds = LabeledDataset(samples=x.astype(np.float32),
                            labels=y.astype(np.int64),
                            class_count=len(bundles),
                            difficulty_factor=np.zeros(len(x)),
                            seed=cfg["seed"], kind="generated",
                            class_names=list(names))
    write_dataset(out_ds, os.path.join(args.out, "samples.d2cd"))
    return _finish(args, "sample", cfg, ["samples.d2cd"],
                   f"n={out_ds.n} schedule={kind}")


def cmd_eval(args, cfg) -> int:
    a = read_dataset(args.a)
    b = read_dataset(args.b)
    bw = cfg["mmd_bandwidth"] or None
    fr = frechet_distance(a.samples, b.samples)
    mm = mmd_rbf(a.samples, b.samples, bandwidth=bw)
    with open(os.path.join(args.out, "metrics.json"), "w") as fh:
        json.dump({"frechet": fr, "mmd": mm, "n_a": a.n, "n_b": b.n},
                  fh, sort_keys=True, indent=1)
    return _finish(args, "eval", cfg, ["metrics.json"],
                   f"frechet={fr!r} mmd={mm!r}")


def cmd_compare(args, cfg) -> int:
    ds = read_dataset(args.data)
    variants = tuple(
        SelectionSpec(strategy=v["strategy"], m=v["m"],
                      k=v["k"] if v["strategy"] == "interval" else None,
                      seed=v["seed"])
        for v in cfg["variants"])
    a = cfg["attach"]
    ccfg = ComparisonConfig(
        variants=variants, seeds=tuple(cfg["seeds"]),
        d_model=cfg["model"]["d_model"], d_text=a["d_text"],
        d_feat=a["d_feat"], B=cfg["model"]["blocks"], h=a["h"],
        ell=cfg["model"]["align_block"], L=a["L"],
        attach=AttachConfig(L=a["L"], d_text=a["d_text"], d_feat=a["d_feat"],
                            h=a["h"], text_seed=a["text_seed"],
                            visual_seed=a["visual_seed"]),
        mc=MCConfig(S_t=cfg["mc"]["S_t"], S_eps=cfg["mc"]["S_eps"],
                    base_seed=cfg["mc"]["base_seed"]),
        ref_train=_train_config(cfg["ref_train"], use_proj=False),
        cond_train=_train_config(cfg["cond_train"], use_proj=True),
        n_eval_per_class=cfg["eval"]["n_per_class"],
        sample_steps=cfg["eval"]["steps"], cfg_scale=cfg["eval"]["cfg_scale"],
        cache_dir=os.path.join(args.out, "cache") if cfg["cache"] else None)
    table, stats = run_comparison(ds, ccfg)
    table.to_csv(os.path.join(args.out, "grid.csv"))
    table.export_plot_data(os.path.join(args.out, "plot.json"))
    agg = table.by_variant("frechet")
    best = min(agg, key=lambda v: agg[v][0]) if agg else "none"
    failed = len(table.rows) - len(table.ok_rows())
    return _finish(args, "compare", cfg, ["grid.csv", "plot.json"],
                   f"cells={len(table.rows)} failed={failed} best={best} "
                   f"cache_misses={stats.misses}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ref": cmd_train_ref,
    "score": cmd_score,
    "select": cmd_select,
    "attach": cmd_attach,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


# -------------------------------------------------------------------- parser

def _fmt(prog):
    return argparse.HelpFormatter(prog, width=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="d2c", formatter_class=_fmt,
        description="Dataset condensation for toy diffusion models: score "
                    "sample difficulty with a reference denoiser, select a "
                    "budgeted subset, attach conditioning surrogates, train "
                    "on the condensed set, and compare variants.")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                required=True)

    def add(name, help_text, **file_args):
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=_fmt)
        p.add_argument("--config", metavar="FILE",
                       help="JSON config file overlaying the defaults")
        p.add_argument("--set", dest="overrides", action="append",
                       default=[], metavar="KEY=VALUE",
                       help="override one config key (dotted path, JSON "
                            "value); repeatable")
        p.add_argument("--out", default="run", metavar="DIR",
                       help="output directory (default: run)")
        for flag, (required, help_f) in file_args.items():
            p.add_argument(f"--{flag}", required=required, help=help_f)
        return p

    add("gen-data", "generate a procedural toy dataset")
    add("train-ref", "train the reference denoiser on a full dataset",
        data=(True, "dataset file (.d2cd)"))
    add("score", "Monte-Carlo difficulty scores under a reference model",
        data=(True, "dataset file (.d2cd)"),
        model=(True, "reference checkpoint (.d2cm)"))
    add("select", "pick a budgeted per-class subset",
        scores=(False, "score table (.d2cs); needed by interval/min/max"),
        data=(False, "dataset file; needed by random/herding/kcenter"))
    add("attach", "bundle selected samples with conditioning surrogates",
        data=(True, "dataset file (.d2cd)"),
        selection=(True, "selection CSV from d2c select"),
        scores=(False, "score table for provenance stats"))
    add("train", "train a conditional denoiser on a condensed dataset",
        condensed=(True, "condensed dataset (.d2cd)"))
    add("sample", "draw class-conditional samples from a trained model",
        model=(True, "model checkpoint (.d2cm)"),
        condensed=(False, "condensed dataset supplying class conditions"),
        data=(False, "raw dataset supplying class names instead"))
    add("eval", "distribution metrics between two sample sets",
        a=(True, "reference dataset (.d2cd)"),
        b=(True, "comparison dataset (.d2cd)"))
    add("compare", "full selection-strategy sweep with caching",
        data=(True, "dataset file (.d2cd)"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        if args.command == "sample" and not (args.condensed or args.data):
            raise ConfigError("sample needs --condensed or --data for class "
                              "conditions")
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: missing-file: {e}", file=sys.stderr)
        return 3
    except FileFormatError as e:
        print(f"error: format: {e}", file=sys.stderr)
        return 3
    except BudgetError as e:
        print(f"error: budget: {e}", file=sys.stderr)
        return 4
    except (FloatingPointError, RuntimeError) as e:
        print(f"error: numeric: {e}", file=sys.stderr)
        return 4
    except ValueError as e:
        print(f"error: invalid: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
