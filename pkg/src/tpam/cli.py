"""Command-line entry point: ``tpam {train,explain,cam,metrics,gradcheck,synth}``.

Options can also come from a JSON file given with ``--config``; keys use the
option names with dashes replaced by underscores, and explicit flags win.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io as tio
from .cam import ExtractorSpec, default_baseline, extract, p_cam, pi_cam
from .errors import TpamError
from .interpret import importance_batch, interpretation_map, ImportanceTensor
from .metrics import cam_oracle, evaluate_saliency, tpam_oracle
from .model import (
    ModelConfig,
    PatchSpec,
    backward,
    dominant_parameter_term,
    finite_difference_gradient,
    forward_batch,
    gradient_relative_error,
    init_poly_mean,
    parameter_count,
    random_model,
)
from .train import Dataset, TrainConfig, evaluate, fit, holdout_split, split_dataset

log = logging.getLogger("tpam")


class ConfigError(Exception):
    """Invalid configuration; maps to exit status 2."""


DEFAULTS = {
    "train": {
        "variant": "V", "order": 2, "rank": 200, "init_factor": 1.0, "rescale": True,
        "patch": [], "seed": 0, "trials": 1, "epochs": 10, "batch_size": 128,
        "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps_opt": 1e-8, "val_fraction": 1 / 6,
        "dtype": "float32", "extractor": None, "extractor_seed": 42, "extractor_widths": "8",
    },
    "explain": {"class_index": None, "limit": 16, "split": "test"},
    "cam": {"method": "p-cam", "class_index": None, "limit": 16, "baseline": "ones",
            "extractor": None, "extractor_seed": 42, "extractor_widths": "8", "workers": 1},
    "metrics": {"class_index": None, "extractor": None, "extractor_seed": 42,
                "extractor_widths": "8", "bboxes": None, "step_fraction": 0.01,
                "baseline_value": 0.0, "ids": None},
    "gradcheck": {"configs": 100, "seed": 0, "h": 1e-5, "tolerance": 1e-5},
    "synth": {"kind": "planted", "count": 200, "seed": 0},
}


# ---------------------------------------------------------------------------
# helpers


def parse_patch(text: str) -> PatchSpec:
    """``4x4:2`` -> 4x4 patch, step 2; ``8x8:2x1`` gives per-dim steps."""
    try:
        patch, _, step = text.partition(":")
        dims = tuple(int(p) for p in patch.split("x"))
        steps = tuple(int(s) for s in step.split("x")) if step else (1,) * len(dims)
        if len(steps) == 1:
            steps = steps * len(dims)
        return PatchSpec(dims, steps)
    except ValueError as exc:
        raise ConfigError(f"bad patch spec {text!r}; expected e.g. 4x4:2") from exc


def extractor_from(opts) -> ExtractorSpec | None:
    if opts.get("extractor") in (None, "", "none"):
        return None
    if opts["extractor"] == "builtin":
        widths = tuple(int(w) for w in str(opts["extractor_widths"]).split(","))
        return ExtractorSpec("builtin-toy", seed=int(opts["extractor_seed"]), widths=widths)
    return ExtractorSpec("external", command=opts["extractor"])


def load_dataset_dir(path, opts) -> tuple[Dataset, Dataset, Dataset, str]:
    """(train, val, test, how) from an IDX directory, split files, or one container pair."""
    d = Path(path)
    if not d.is_dir():
        raise ConfigError(f"dataset directory {d} does not exist")
    seed = int(opts.get("seed", 0))
    if tio.has_mnist(d):
        xtr, ytr, xte, yte = tio.load_mnist(d)
        C = int(max(ytr.max(), yte.max()) + 1)
        train, val = holdout_split(Dataset(xtr, ytr, num_classes=C), float(opts.get("val_fraction", 1 / 6)), seed)
        return train, val, Dataset(xte, yte, num_classes=C), "idx train/test + seeded validation holdout"
    if (d / "train_inputs.tptc").exists():
        parts = []
        for name in ("train", "val", "test"):
            parts.append(Dataset(tio.read_tensor(d / f"{name}_inputs.tptc"),
                                 tio.read_tensor(d / f"{name}_labels.tptc").astype(np.int64)))
        return parts[0], parts[1], parts[2], "predefined split files"
    if (d / "inputs.tptc").exists():
        full = Dataset(tio.read_tensor(d / "inputs.tptc"), tio.read_tensor(d / "labels.tptc").astype(np.int64))
        train, val, test = split_dataset(full, seed)
        return train, val, test, "seeded 70/20/10 split"
    raise ConfigError(f"{d} holds neither MNIST IDX files nor tptc containers")


def load_inputs(opts) -> tuple[np.ndarray, np.ndarray | None]:
    """Input stack (and labels when known) for explain/cam/metrics."""
    if opts.get("inputs"):
        x = tio.read_tensor(opts["inputs"])
        labels = tio.read_tensor(opts["labels"]).astype(np.int64) if opts.get("labels") else None
        return x, labels
    if opts.get("data"):
        train, val, test, _ = load_dataset_dir(opts["data"], opts)
        ds = {"train": train, "val": val, "test": test}[opts.get("split", "test")]
        return ds.inputs, ds.labels
    raise ConfigError("give --inputs (a tptc stack) or --data")


def features_of(spec: ExtractorSpec | None, X: np.ndarray) -> np.ndarray:
    if spec is None:
        return X
    return np.stack([extract(spec, x).maps for x in X])


def write_json(path, obj) -> None:
    tio.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(opts) -> int:
    out = Path(opts["out"])
    spec = extractor_from(opts)
    train, val, test, how = load_dataset_dir(opts["data"], opts)
    if spec is not None:
        train, val, test = (Dataset(features_of(spec, d.inputs), d.labels) for d in (train, val, test))
    C = int(max(train.labels.max(), val.labels.max(), test.labels.max()) + 1)
    patches = tuple(parse_patch(p) for p in opts["patch"])
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(opts["dtype"])
    root_seed = int(opts["seed"])
    print(f"data: {len(train)} train / {len(val)} val / {len(test)} test ({how})")
    best = None
    test_accs = []
    for trial in range(int(opts["trials"])):
        seed = root_seed + trial
        cfg = ModelConfig(opts["variant"], opts["order"], opts["rank"], train.inputs.shape[1:], C,
                          init_factor=float(opts["init_factor"]), rescale=bool(opts["rescale"]),
                          patch_specs=patches, seed=seed)
        tcfg = TrainConfig(float(opts["lr"]), float(opts["beta1"]), float(opts["beta2"]),
                           float(opts["eps_opt"]), int(opts["batch_size"]), int(opts["epochs"]), seed)
        lines = []
        start = time.time()
        result = fit(init_poly_mean(cfg, dtype=dtype), train, val, tcfg,
                     on_epoch=lambda r: (lines.append(r.line()), print(f"[trial {trial}] {r.line()}", flush=True)))
        acc = evaluate(result.model, test)
        test_accs.append(acc)
        (out / f"history-trial-{trial}.log").write_text("".join(f"{ln}\n" for ln in lines))
        print(f"[trial {trial}] seed={seed} best_epoch={result.best_epoch} "
              f"val_acc={result.best_val_acc:.4f} test_acc={acc:.4f} ({time.time() - start:.1f}s)")
        if best is None or result.best_val_acc > best[1].best_val_acc:
            best = (trial, result, acc, lines)
    trial, result, acc, lines = best
    (out / "history.log").write_text("".join(f"{ln}\n" for ln in lines))
    meta = {"root_seed": root_seed, "trial": trial, "seed": root_seed + trial, "test_acc": acc,
            "val_acc": result.best_val_acc, "data": str(opts["data"]), "split": how,
            "extractor": None if spec is None else spec.__dict__}
    tio.save_checkpoint(out / "model.ckpt", result.model, meta)
    write_json(out / "summary.json", {**meta, "trial_test_accs": test_accs,
                                      "max_test_acc": max(test_accs),
                                      "parameters": parameter_count(result.model.config),
                                      "dominant_term": dominant_parameter_term(result.model.config),
                                      "config": result.model.config.to_dict()})
    print(f"test accuracy: {acc:.4f} (trial {trial}); max over trials: {max(test_accs):.4f}")
    return 0


def cmd_explain(opts) -> int:
    out = Path(opts["out"])
    model, meta = tio.load_checkpoint_with_metadata(opts["checkpoint"])
    X, _ = load_inputs(opts)
    X = X[: int(opts["limit"])]
    z = forward_batch(model.astype(np.float64), X)
    cls = np.full(len(X), int(opts["class_index"])) if opts["class_index"] is not None else z.argmax(axis=1)
    IM = importance_batch(model, X, cls)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["id,class,logit_minus_bias,importance_sum,abs_error"]
    worst = 0.0
    for i in range(len(X)):
        target = float(z[i, cls[i]] - model.params["b"][cls[i]])
        total = float(IM[i].sum())
        err = abs(total - target)
        worst = max(worst, err / (1.0 + abs(target)))
        tio.write_tensor(out / f"importance_{i}.tptc", IM[i])
        m = interpretation_map(ImportanceTensor(IM[i], int(cls[i]))).values
        tio.write_signed_map(m, out / f"map_{i}")
        rows.append(f"{i},{cls[i]},{target:.12g},{total:.12g},{err:.3e}")
    (out / "explain.csv").write_text("\n".join(rows) + "\n")
    write_json(out / "run.json", {"checkpoint": str(opts["checkpoint"]), "seed": model.config.seed,
                                  "checkpoint_metadata": meta, "images": len(X),
                                  "max_relative_completeness_error": worst})
    print(f"wrote {len(X)} importance tensors to {out}; max relative completeness error {worst:.3e}")
    return 0


def cmd_cam(opts) -> int:
    out = Path(opts["out"])
    head = tio.load_checkpoint(opts["checkpoint"])
    spec = extractor_from(opts)
    if spec is None:
        raise ConfigError("cam needs --extractor (builtin or a command template)")
    X, _ = load_inputs(opts)
    X = X[: int(opts["limit"])]
    out.mkdir(parents=True, exist_ok=True)
    method = opts["method"]
    stack = []
    for i, x in enumerate(X):
        A = extract(spec, x)
        c = int(opts["class_index"]) if opts["class_index"] is not None else int(
            forward_batch(head, A.maps[np.newaxis])[0].argmax())
        if method == "p-cam":
            sal = p_cam(head, A, c, input_shape=x.shape)
        elif method == "pi-cam":
            sal = pi_cam(head, spec, x, default_baseline(x, opts["baseline"]), c, workers=int(opts["workers"]))
        else:
            raise ConfigError(f"unknown cam method {method!r}")
        tio.write_tensor(out / f"saliency_{i}.tptc", sal.values)
        tio.write_tensor(out / f"saliency_{i}_input.tptc", sal.upsampled)
        tio.write_grayscale_image(sal.upsampled, out / f"saliency_{i}.pgm")
        stack.append(sal.upsampled)
    tio.write_tensor(out / "saliency_stack.tptc", np.stack(stack))
    write_json(out / "run.json", {"checkpoint": str(opts["checkpoint"]), "method": method,
                                  "extractor": spec.__dict__, "baseline": opts["baseline"],
                                  "seed": head.config.seed, "images": len(X)})
    print(f"wrote {len(X)} {method} saliency maps to {out}")
    return 0


def cmd_metrics(opts) -> int:
    out = Path(opts["out"])
    model = tio.load_checkpoint(opts["checkpoint"])
    spec = extractor_from(opts)
    oracle = tpam_oracle(model) if spec is None else cam_oracle(model, spec)
    X, labels = load_inputs(opts)
    S = tio.read_tensor(opts["saliency"])
    if S.ndim == 2:
        S = S[np.newaxis]
    X = X[: len(S)]
    if opts["class_index"] is not None:
        classes = [int(opts["class_index"])] * len(X)
    elif opts.get("classes"):
        classes = [int(c) for c in tio.read_tensor(opts["classes"])]
    else:
        classes = [int(np.argmax(oracle(x))) for x in X]
    ids = Path(opts["ids"]).read_text().split() if opts["ids"] else None
    bboxes = tio.read_bboxes(opts["bboxes"]) if opts["bboxes"] else None
    report = evaluate_saliency(oracle, list(X), list(S), classes, ids, bboxes,
                               float(opts["step_fraction"]), float(opts["baseline_value"]))
    out.mkdir(parents=True, exist_ok=True)
    tio.atomic_write(out / "metrics.csv", report.to_csv().encode())
    write_json(out / "run.json", {"checkpoint": str(opts["checkpoint"]), "seed": model.config.seed,
                                  "means": report.means()})
    print(report.table())
    return 0


def gradcheck_configs(n: int, seed: int):
    """Seeded small configurations cycling through variants, orders 1..4 and rescale."""
    rng = np.random.default_rng(seed)
    for i in range(n):
        variant = ("T", "V", "PT", "MPT")[i % 4]
        K = 1 + (i // 4) % 4
        N = int(rng.integers(1, 4)) if variant in ("T", "V") else 2
        shape = tuple(int(v) for v in rng.integers(2, 4, size=N))
        if variant in ("PT", "MPT"):
            shape = (int(rng.integers(4, 6)), int(rng.integers(4, 6)))
        patches = ()
        if variant == "PT":
            patches = (PatchSpec((2, 2), (int(rng.integers(1, 3)),) * 2),)
        elif variant == "MPT":
            patches = (PatchSpec((2, 2), (2, 2)), PatchSpec((3, 3), (1, 1)), PatchSpec(shape, (1, 1)))
        cfg = ModelConfig(variant, K, int(rng.integers(1, 4)), shape, int(rng.integers(1, 4)),
                          rescale=bool(i % 2), patch_specs=patches, seed=seed + i)
        yield cfg, rng


def run_gradcheck(n: int, seed: int, h: float = 1e-5):
    rows = []
    for cfg, rng in gradcheck_configs(n, seed):
        model = random_model(cfg, rng)
        x = rng.uniform(-1.0, 1.0, size=cfg.input_shape)
        g = rng.normal(size=cfg.C)
        err = gradient_relative_error(backward(model, x, g), finite_difference_gradient(model, x, g, h))
        rows.append((cfg, err))
    return rows


def cmd_gradcheck(opts) -> int:
    tol = float(opts["tolerance"])
    rows = run_gradcheck(int(opts["configs"]), int(opts["seed"]), float(opts["h"]))
    lines = [f"{'#':>4} {'variant':>7} {'K':>2} {'R':>2} {'C':>2} {'shape':>10} {'rescale':>7} {'max_rel_err':>12} result"]
    for i, (cfg, err) in enumerate(rows):
        shape = "x".join(map(str, cfg.input_shape))
        lines.append(f"{i:>4} {cfg.variant:>7} {cfg.K:>2} {cfg.R:>2} {cfg.C:>2} {shape:>10} "
                     f"{str(cfg.rescale):>7} {err:>12.3e} {'pass' if err < tol else 'FAIL'}")
    worst = max(err for _, err in rows)
    lines.append(f"max relative error {worst:.3e} over {len(rows)} configs (tolerance {tol:g})")
    text = "\n".join(lines)
    print(text)
    if opts.get("out"):
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        tio.atomic_write(out / "gradcheck.txt", (text + "\n").encode())
    return 0 if worst < tol else 1


def cmd_synth(opts) -> int:
    """Write a planted-feature demo dataset (inputs/labels containers + bbox CSV)."""
    from .synthetic import PlantedTask

    out = Path(opts["out"])
    task = PlantedTask()
    ds = task.sample(int(opts["count"]), int(opts["seed"]))
    tio.write_tensor(out / "inputs.tptc", ds.inputs)
    tio.write_tensor(out / "labels.tptc", ds.labels.astype(np.float64))
    b = task.bbox
    rows = ["id,x_min,y_min,x_max,y_max"] + [f"{i},{b.x_min},{b.y_min},{b.x_max},{b.y_max}" for i in range(len(ds))]
    (out / "bboxes.csv").write_text("\n".join(rows) + "\n")
    write_json(out / "run.json", {"kind": "planted", "seed": int(opts["seed"]), "count": len(ds),
                                  "region": list(task.region)})
    print(f"wrote {len(ds)} planted-feature images to {out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "cam": cmd_cam,
    "metrics": cmd_metrics,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="tpam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", default=S, help="JSON file of option values")
        sp.add_argument("--out", default=S, help="output directory" + (" (required)" if out_required else ""))
        sp.add_argument("--seed", type=int, default=S)

    def extractor_opts(sp):
        sp.add_argument("--extractor", default=S,
                        help="'builtin' or a command template with {input} and {output}")
        sp.add_argument("--extractor-seed", dest="extractor_seed", type=int, default=S)
        sp.add_argument("--extractor-widths", dest="extractor_widths", default=S, help="e.g. 8,8")

    def input_opts(sp):
        sp.add_argument("--checkpoint", default=S)
        sp.add_argument("--data", default=S)
        sp.add_argument("--split", choices=["train", "val", "test"], default=S)
        sp.add_argument("--inputs", default=S, help="tptc stack of inputs")
        sp.add_argument("--labels", default=S)
        sp.add_argument("--class", dest="class_index", type=int, default=S)
        sp.add_argument("--limit", type=int, default=S)

    t = sub.add_parser("train", help="train a model (optionally several seeded trials)")
    common(t)
    t.add_argument("--data", default=S)
    t.add_argument("--variant", type=str.upper, choices=["T", "V", "PT", "MPT"], default=S)
    t.add_argument("--order", type=int, default=S)
    t.add_argument("--rank", type=int, default=S)
    t.add_argument("--init-factor", dest="init_factor", type=float, default=S)
    t.add_argument("--no-rescale", dest="rescale", action="store_false", default=S)
    t.add_argument("--patch", action="append", default=S, help="patch spec such as 4x4:2 (repeatable)")
    t.add_argument("--trials", type=int, default=S)
    t.add_argument("--epochs", type=int, default=S)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    t.add_argument("--lr", type=float, default=S)
    t.add_argument("--val-fraction", dest="val_fraction", type=float, default=S)
    t.add_argument("--dtype", choices=["float32", "float64"], default=S)
    extractor_opts(t)

    e = sub.add_parser("explain", help="importance tensors and signed interpretation maps")
    common(e)
    input_opts(e)

    c = sub.add_parser("cam", help="P-CAM / PI-CAM saliency maps")
    common(c)
    input_opts(c)
    extractor_opts(c)
    c.add_argument("--method", choices=["p-cam", "pi-cam"], default=S)
    c.add_argument("--baseline", choices=["ones", "white", "black"], default=S)
    c.add_argument("--workers", type=int, default=S)

    m = sub.add_parser("metrics", help="AD / AI / insertion / deletion / proportion report")
    common(m)
    input_opts(m)
    extractor_opts(m)
    m.add_argument("--saliency", default=S, help="tptc stack of (H, W) saliency maps")
    m.add_argument("--classes", default=S, help="tptc vector of target classes")
    m.add_argument("--bboxes", default=S, help="CSV with id,x_min,y_min,x_max,y_max")
    m.add_argument("--ids", default=S, help="text file of image ids, one per line")
    m.add_argument("--step-fraction", dest="step_fraction", type=float, default=S)
    m.add_argument("--baseline-value", dest="baseline_value", type=float, default=S)

    g = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    common(g, out_required=False)
    g.add_argument("--configs", type=int, default=S)
    g.add_argument("--h", type=float, default=S)
    g.add_argument("--tolerance", type=float, default=S)

    s = sub.add_parser("synth", help="write the planted-feature demo dataset")
    common(s)
    s.add_argument("--count", type=int, default=S)
    return p


REQUIRED = {
    "train": ["data", "out"],
    "explain": ["checkpoint", "out"],
    "cam": ["checkpoint", "out"],
    "metrics": ["checkpoint", "saliency", "out"],
    "gradcheck": [],
    "synth": ["out"],
}

PATH_INPUTS = ("data", "checkpoint", "inputs", "labels", "saliency", "classes", "bboxes", "ids")


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults < config file < explicit flags; then validate required inputs."""
    opts = {"seed": 0, **DEFAULTS[args.command]}
    given = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    if "config" in given:
        try:
            file_opts = json.loads(Path(given.pop("config")).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise ConfigError("config file must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in file_opts.items()})
    opts.update(given)
    missing = [k for k in REQUIRED[args.command] if not opts.get(k)]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join('--' + m for m in missing)}")
    for key in PATH_INPUTS:
        if opts.get(key) and not Path(opts[key]).exists():
            raise ConfigError(f"--{key} path {opts[key]} does not exist")
    if isinstance(opts.get("patch"), str):
        opts["patch"] = [opts["patch"]]
    return opts


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"tpam {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (TpamError, OSError, ValueError) as exc:
        print(f"tpam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
