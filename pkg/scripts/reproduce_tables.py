"""Run the full toy experiment matrix through the command-line front end.

Renders the three splits, trains a depth-mode and a disparity-mode network,
finetunes the depth net on white backgrounds, learns every prompt variant, and
writes three matrices under ``--out``:

    in_distribution/matrix.csv   baselines, 1-BG and PNet on the val split
    out_of_distribution/...      the same plus the finetuned net on the OOD split
    ablations/...                additive, image-space, no-bias, image-input, disparity

    python scripts/reproduce_tables.py --out runs/tables --train-iters 5000 --prompt-iters 600
"""

import argparse
import json
from pathlib import Path

from promptdepth import cli, evalkit


def step(argv):
    code = cli.dispatch([str(a) for a in argv])
    if code != 0:
        raise SystemExit(f"step failed ({code}): {' '.join(map(str, argv))}")


def matrix(out: Path, runs: list) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs.json").write_text(json.dumps({"runs": runs}, indent=2))
    step(["matrix", "--config", out / "runs.json", "--out", out])
    for row in evalkit.read_matrix_csv(out / "matrix.csv"):
        print(f"  {row['method']:<16} {row['split']:<6} si-RMSE {row['si_rmse']}  cos {row['cos_sim']}  [{row['status']}]")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--n-train", type=int, default=768)
    ap.add_argument("--n-eval", type=int, default=256)
    ap.add_argument("--train-iters", type=int, default=5000)
    ap.add_argument("--prompt-iters", type=int, default=600)
    ap.add_argument("--finetune-iters", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    o, seed = a.out, ["--seed", a.seed]

    for split, n in (("train", a.n_train), ("val", a.n_eval), ("ood", a.n_eval)):
        if not (o / split / "manifest.json").exists():
            step(["render-dataset", "--split", split, "--n", n, "--out", o / split, *seed])

    def train_cfg(name, **extra):
        cfg = {"iters": a.train_iters, "anneal_iters": a.train_iters // 5, "log_every": 250, **extra}
        (o / f"{name}.json").write_text(json.dumps(cfg))
        return o / f"{name}.json"

    nets = {"depth": o / "net_depth", "disparity": o / "net_disparity"}
    for mode, path in nets.items():
        if not (path / "weights.pdwt").exists():
            step(["train-depth", "--config", train_cfg(f"train_{mode}"), "--train", o / "train", "--val", o / "val",
                  "--output-mode", mode, "--out", path, *seed])
    net, disp = nets["depth"] / "weights.pdwt", nets["disparity"] / "weights.pdwt"

    ft = o / "net_finetuned"
    if not (ft / "weights.pdwt").exists():
        cfg = {"iters": a.finetune_iters, "anneal_iters": a.finetune_iters // 5, "log_every": 0}
        (o / "finetune.json").write_text(json.dumps(cfg))
        step(["finetune-depth", "--config", o / "finetune.json", "--net", net, "--train", o / "train", "--out", ft, *seed])

    prompts = {
        "1-BG": (net, ["--mode", "single"]),
        "PNet": (net, ["--mode", "pnet"]),
        "Additive": (net, ["--mode", "single", "--additive"]),
        "Img space": (net, ["--mode", "single", "--image-space"]),
        "No bias": (net, ["--mode", "pnet", "--no-bias"]),
        "Input img": (net, ["--mode", "pnet", "--image-input"]),
        "Disp 1-BG": (disp, ["--mode", "single"]),
    }
    (o / "prompt.json").write_text(json.dumps({"iters": a.prompt_iters, "anneal_iters": a.prompt_iters // 5}))
    files = {}
    for name, (frozen, flags) in prompts.items():
        dest = o / ("prompt_" + name.lower().replace(" ", "_").replace("-", ""))
        if not (dest / "prompt.pdpr").exists():
            step(["learn-prompt", "--config", o / "prompt.json", "--net", frozen, "--train", o / "train",
                  *flags, "--out", dest, *seed])
        files[name] = str(dest / "prompt.pdpr")

    def run(method, split, prompt="white", using=net, **extra):
        return {"method": method, "net": str(using), "split": str(o / split), "prompt": prompt, **extra}

    baselines = ["white", "random_noise", "textured", "original"]
    print("in-distribution")
    matrix(o / "in_distribution", [run(b, "val", b) for b in baselines]
           + [run(k, "val", files[k]) for k in ("1-BG", "PNet")])
    print("out-of-distribution")
    matrix(o / "out_of_distribution", [run("None", "ood"), run("Ftune", "ood", using=ft.joinpath("weights.pdwt")),
                                       run("Ftune native", "val", "original", using=ft.joinpath("weights.pdwt")),
                                       run("Frozen native", "val", "original")]
           + [run(k, "ood", files[k]) for k in ("1-BG", "PNet")])
    print("ablations")
    matrix(o / "ablations", [run(k, "val", files[k], additive=(k == "Additive"))
                             for k in ("1-BG", "Additive", "Img space", "PNet", "No bias", "Input img")]
           + [run("Disp white", "val", using=disp), run("Disp 1-BG", "val", files["Disp 1-BG"], using=disp)])


if __name__ == "__main__":
    main()
