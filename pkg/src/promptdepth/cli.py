"""Command-line front end; every stage reads and writes files under ``--out``.

Exit codes: 0 success, 1 validation error (bad flags, unknown or missing
config keys), 2 runtime failure. Settings come from built-in defaults, then
``--config`` (a JSON object), then explicit flags; the resolved settings are
written to ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import depthnet as dn
from . import evalkit, formats, prompting, synthscene

log = logging.getLogger("promptdepth")

REQUIRED = object()

TRAIN_KEYS = ("iters", "batch", "lr", "anneal_iters", "anneal_factor", "log_every", "grad_clip")
PROMPT_KEYS = ("iters", "batch", "lr", "lr_net", "lr_image", "anneal_iters", "anneal_factor", "log_every")

DEFAULTS = {
    "render-dataset": {"split": "train", "n": 64, "seed": 0, "intrinsics": None, "background": None},
    "train-depth": {"train": REQUIRED, "val": None, "val_limit": 64, "output_mode": "depth", "seed": 0,
                    "input": "native", **{k: dn.DEFAULT_TRAIN[k] for k in TRAIN_KEYS}},
    "finetune-depth": {"net": REQUIRED, "train": REQUIRED, "val": None, "val_limit": 64, "seed": 0,
                       "input": "white", **{k: dn.DEFAULT_TRAIN[k] for k in TRAIN_KEYS}},
    "learn-prompt": {"net": REQUIRED, "train": REQUIRED, "mode": "single", "additive": False,
                     "image_space": False, "image_input": False, "no_bias": False, "seed": 0,
                     **{k: prompting.DEFAULT_PROMPT[k] for k in PROMPT_KEYS}},
    "evaluate": {"net": REQUIRED, "split": REQUIRED, "prompt": "white", "method": "", "additive": False,
                 "limit": None, "seed": 0},
    "matrix": {"runs": REQUIRED, "seed": 0},
    "infer": {"net": REQUIRED, "image": REQUIRED, "mask": REQUIRED, "prompt": "white", "additive": False,
              "intrinsics": None, "seed": 0},
    "visualize": {"net": REQUIRED, "split": REQUIRED, "prompt": "white", "additive": False, "limit": 4,
                  "seed": 0},
}

MATRIX_RUN_KEYS = {"net", "split", "prompt", "method", "split_name", "additive", "limit", "seed"}


class ConfigError(ValueError):
    """Invalid invocation or configuration (exit code 1)."""


class StageError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- parsing

def _common(p):
    p.add_argument("--config", help="JSON file with settings for this subcommand")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="promptdepth", description="Background prompting for object depth.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("render-dataset", help="render a synthetic split")
    _common(p)
    p.add_argument("--split", choices=tuple(synthscene.SPLIT_SALT))
    p.add_argument("--n", type=int)

    for name, text in (("train-depth", "train a depth network"), ("finetune-depth", "finetune a network")):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "finetune-depth":
            p.add_argument("--net")
        else:
            p.add_argument("--output-mode", dest="output_mode", choices=dn.OUTPUT_MODES)
        p.add_argument("--train")
        p.add_argument("--val")
        p.add_argument("--iters", type=int)
        p.add_argument("--lr", type=float)

    p = sub.add_parser("learn-prompt", help="learn a background prompt for a frozen network")
    _common(p)
    p.add_argument("--net")
    p.add_argument("--train")
    p.add_argument("--mode", choices=("single", "pnet"))
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-net", dest="lr_net", type=float, help="step size for PNet weights")
    p.add_argument("--lr-image", dest="lr_image", type=float, help="step size for pixel-space prompts")
    for flag in ("additive", "image-space", "image-input", "no-bias"):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), action="store_true", default=None)

    p = sub.add_parser("evaluate", help="score a prompt or baseline on a split")
    _common(p)
    p.add_argument("--net")
    p.add_argument("--split")
    p.add_argument("--prompt", help="prompt file or one of: " + ", ".join(prompting.BASELINE_KINDS))
    p.add_argument("--method")
    p.add_argument("--additive", action="store_true", default=None)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("matrix", help="evaluate a list of runs into matrix.csv and matrix.json")
    _common(p)

    p = sub.add_parser("infer", help="predict object depth for one image and mask")
    _common(p)
    p.add_argument("--net")
    p.add_argument("--image")
    p.add_argument("--mask")
    p.add_argument("--prompt")
    p.add_argument("--additive", action="store_true", default=None)

    p = sub.add_parser("visualize", help="write depth, normal and composite PNGs for a split")
    _common(p)
    p.add_argument("--net")
    p.add_argument("--split")
    p.add_argument("--prompt")
    p.add_argument("--additive", action="store_true", default=None)
    p.add_argument("--limit", type=int)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then flags. Unknown or missing keys raise ConfigError."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = formats.read_json(args.config)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k, v in cfg.items() if v is REQUIRED]
    if missing:
        raise ConfigError(f"missing required key: {missing[0]} (pass --{missing[0]} or set it in --config)")
    return cfg


# ---------------------------------------------------------------- commands

def _load_split(path, limit=None):
    return synthscene.load_dataset(path, limit) if path else []


def cmd_render_dataset(cfg, out):
    base = {"seed_offset": cfg["seed"]}
    if cfg["intrinsics"]:
        base["intrinsics"] = cfg["intrinsics"]
    if cfg["background"]:
        base["background"] = cfg["background"]
    manifest = synthscene.generate_dataset(cfg["n"], cfg["split"], out, base)
    return {"n": manifest["n"], "split": manifest["split"]}


def cmd_train_depth(cfg, out):
    hyper = {k: cfg[k] for k in TRAIN_KEYS}
    hyper.update(seed=cfg["seed"], input=cfg["input"])
    weights, rows = dn.train_depthnet(_load_split(cfg["train"]), _load_split(cfg["val"], cfg["val_limit"]),
                                      hyper, cfg["output_mode"], cfg["seed"])
    dn.save_weights(weights, out / "weights.pdwt")
    formats.write_json(out / "train_log.json", rows)
    return {"weights": str(out / "weights.pdwt")}


def cmd_finetune_depth(cfg, out):
    hyper = {k: cfg[k] for k in TRAIN_KEYS}
    hyper.update(seed=cfg["seed"], input=cfg["input"])
    weights, rows = dn.finetune_depthnet(dn.load_weights(cfg["net"]), _load_split(cfg["train"]),
                                         _load_split(cfg["val"], cfg["val_limit"]), hyper)
    dn.save_weights(weights, out / "weights.pdwt")
    formats.write_json(out / "train_log.json", rows)
    return {"weights": str(out / "weights.pdwt")}


def prompt_ablation(cfg) -> dict:
    """Learner keyword arguments for the selected mode; flags map 1:1 onto ablation rows."""
    if cfg["mode"] == "single":
        if cfg["image_input"] or cfg["no_bias"]:
            raise ConfigError("--image-input and --no-bias apply to --mode pnet only")
        return {"additive": bool(cfg["additive"]), "image_space": bool(cfg["image_space"])}
    if cfg["additive"]:
        raise ConfigError("--additive applies to --mode single only")
    return {"image_input": bool(cfg["image_input"]), "no_bias": bool(cfg["no_bias"]),
            "image_space": bool(cfg["image_space"])}


def cmd_learn_prompt(cfg, out):
    ablation = prompt_ablation(cfg)
    hyper = {k: cfg[k] for k in PROMPT_KEYS}
    hyper["seed"] = cfg["seed"]
    frozen = dn.load_weights(cfg["net"])
    train = _load_split(cfg["train"])
    if cfg["mode"] == "single":
        prompt, rows = prompting.learn_prompt_unconditional(frozen, train, hyper, **ablation)
    else:
        prompt, rows = prompting.learn_prompt_conditional(frozen, train, hyper, **ablation)
    prompting.save_prompt(prompt, out / "prompt.pdpr", {"mode": cfg["mode"], **ablation, "hyper": hyper})
    formats.write_json(out / "prompt_log.json", rows)
    return {"prompt": str(out / "prompt.pdpr")}


def _eval_config(run: dict) -> evalkit.EvalConfig:
    unknown = sorted(set(run) - MATRIX_RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown matrix run key(s): {', '.join(unknown)}")
    for key in ("net", "split"):
        if key not in run:
            raise ConfigError(f"missing required key: {key} in matrix run")
    return evalkit.EvalConfig(**run)


def cmd_evaluate(cfg, out):
    ec = evalkit.EvalConfig(cfg["split"], cfg["net"], cfg["prompt"], cfg["method"], additive=cfg["additive"],
                            seed=cfg["seed"], limit=cfg["limit"])
    report = evalkit.evaluate_run(ec)
    formats.write_json(out / "report.json", {k: v for k, v in report.to_dict().items() if k != "wall_clock"})
    return report.aggregates


def cmd_matrix(cfg, out):
    if not isinstance(cfg["runs"], list) or not cfg["runs"]:
        raise ConfigError("runs must be a non-empty list")
    configs = [_eval_config({"seed": cfg["seed"], **run}) for run in cfg["runs"]]
    rows = evalkit.run_matrix(configs)
    evalkit.write_matrix(rows, out)
    return {"rows": len(rows), "errors": sum(r["status"] == "error" for r in rows)}


def cmd_infer(cfg, out):
    frozen = dn.load_weights(cfg["net"])
    prompt = prompting.load_prompt_or_baseline(cfg["prompt"])
    image = formats.read_rgb_png(cfg["image"])
    mask = formats.read_mask_png(cfg["mask"])
    k = synthscene.Intrinsics(**cfg["intrinsics"]) if cfg["intrinsics"] else synthscene.Intrinsics(
        height=mask.shape[0], width=mask.shape[1], cx=mask.shape[1] / 2, cy=mask.shape[0] / 2)
    result = prompting.infer_object_depth(frozen, prompt, image, mask, k, cfg["additive"], cfg["seed"])
    formats.write_pfm(out / "depth.pfm", result["depth"])
    formats.write_mask_png(out / "object_mask.png", result["object_mask"])
    sample = synthscene.Sample(image, result["depth"], mask, k, {})
    evalkit.render_visual_report(sample, result, out, "infer")
    return {"depth": str(out / "depth.pfm")}


def cmd_visualize(cfg, out):
    frozen = dn.load_weights(cfg["net"])
    prompt = prompting.load_prompt_or_baseline(cfg["prompt"])
    samples = synthscene.load_dataset(cfg["split"], cfg["limit"])
    for i, s in enumerate(samples):
        result = prompting.infer_object_depth(frozen, prompt, s.rgb, s.mask, s.intrinsics, cfg["additive"],
                                              cfg["seed"] + i)
        evalkit.render_visual_report(s, result, out, f"{i:05d}")
    return {"samples": len(samples)}


COMMANDS = {
    "render-dataset": cmd_render_dataset, "train-depth": cmd_train_depth, "finetune-depth": cmd_finetune_depth,
    "learn-prompt": cmd_learn_prompt, "evaluate": cmd_evaluate, "matrix": cmd_matrix, "infer": cmd_infer,
    "visualize": cmd_visualize,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise ConfigError("a subcommand is required")
        cfg = resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        formats.write_json(out / "config.json", {"command": args.command, **cfg})
        summary = COMMANDS[args.command](cfg, out)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"promptdepth: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    log.info("%s done: %s", args.command, summary)
    return 0


# ---------------------------------------------------------------- smoke pipeline

def end_to_end_smoke(tmp_dir, seed: int = 0, n_train: int = 64, n_val: int = 16, train_iters: int = 300,
                     prompt_iters: int = 300) -> int:
    """Render, train, learn 1-BG and PNet, evaluate, and build a three-row matrix.

    Raises StageError naming the failing stage; returns 0 on success.
    """
    root = Path(tmp_dir)
    common = ["--seed", str(seed)]
    stages = [
        ("render-train", ["render-dataset", "--split", "train", "--n", str(n_train), "--out", str(root / "train")]),
        ("render-val", ["render-dataset", "--split", "val", "--n", str(n_val), "--out", str(root / "val")]),
        ("train-depth", ["train-depth", "--train", str(root / "train"), "--iters", str(train_iters),
                         "--out", str(root / "net")]),
        ("learn-1bg", ["learn-prompt", "--mode", "single", "--net", str(root / "net/weights.pdwt"),
                       "--train", str(root / "train"), "--iters", str(prompt_iters), "--out", str(root / "bg1")]),
        ("learn-pnet", ["learn-prompt", "--mode", "pnet", "--net", str(root / "net/weights.pdwt"),
                        "--train", str(root / "train"), "--iters", str(prompt_iters), "--out", str(root / "pnet")]),
        ("evaluate", ["evaluate", "--net", str(root / "net/weights.pdwt"), "--split", str(root / "val"),
                      "--prompt", str(root / "bg1/prompt.pdpr"), "--out", str(root / "eval")]),
    ]
    runs = [{"method": m, "net": str(root / "net/weights.pdwt"), "split": str(root / "val"), "prompt": p}
            for m, p in (("white", "white"), ("1-BG", str(root / "bg1/prompt.pdpr")),
                         ("PNet", str(root / "pnet/prompt.pdpr")))]
    root.mkdir(parents=True, exist_ok=True)
    formats.write_json(root / "matrix_config.json", {"runs": runs})
    stages.append(("matrix", ["matrix", "--config", str(root / "matrix_config.json"), "--out", str(root / "matrix")]))
    for name, argv in stages:
        code = dispatch(argv + common)
        if code != 0:
            raise StageError(f"smoke stage {name} failed with exit code {code}")
    rows = evalkit.read_matrix_csv(root / "matrix" / "matrix.csv")
    bad = [r["method"] for r in rows if r["status"] != "ok"]
    if len(rows) < 3 or bad:
        raise StageError(f"smoke stage matrix produced bad rows: {bad or len(rows)}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
