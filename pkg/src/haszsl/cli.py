"""``haszsl`` command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import experiments as ex
from .adversarial import generate_adversarial, perturbation_report
from .augment import STANDARD_POLICIES
from .config import DEFAULT_SWEEP_GRIDS, ExperimentConfig, load_config
from .errors import ConfigError, FormatError, NumericError
from .evaluation import drift_trace
from .model import forward, load_params, save_params
from .trainer import load_state, save_state, train, TrainState

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# ----------------------------------------------------------------------------
# output helpers

def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 pixmap from an H x W x 3 array in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H x W x 3, got {rgb.shape}")
    h, w, _ = rgb.shape
    px = np.rint(np.clip(rgb, 0.0, 1.0) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError(f"{path}: not a binary P6 pixmap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    px = np.frombuffer(parts[4], dtype=np.uint8)
    if maxval != 255 or px.size != w * h * 3:
        raise FormatError(f"{path}: unexpected pixmap payload")
    return px.reshape(h, w, 3).astype(np.float64) / 255.0


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def heat_overlay(image: np.ndarray, attn: np.ndarray) -> np.ndarray:
    """Blend a C x H x W image with a min-max normalized red heat map (upsampled nearest)."""
    h, w = image.shape[-2:]
    rep = h // attn.shape[0]
    heat = minmax(np.kron(attn, np.ones((rep, rep))))
    base = image.transpose(1, 2, 0)
    red = np.stack([heat, np.zeros_like(heat), np.zeros_like(heat)], axis=-1)
    return 0.5 * base + 0.5 * red


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def finalize(out: Path, cfg: ExperimentConfig, command: str) -> None:
    """Write the resolved config and a manifest hashing every produced file."""
    (out / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {"command": command,
                "files": {str(p.relative_to(out)): sha256_file(p) for p in files}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


# ----------------------------------------------------------------------------
# commands

def cmd_generate_data(cfg: ExperimentConfig, args, out: Path) -> None:
    dc = cfg.data_config()
    if args.seed is not None:
        dc = type(dc)(**{**dc.__dict__, "seed": args.seed})
    ds = data_mod.generate_dataset(dc)
    data_mod.save(ds, out / "dataset")
    print(f"dataset: {len(ds.labels)} images, sha256 {ds.dataset_hash()}")


def cmd_train(cfg: ExperimentConfig, args, out: Path) -> None:
    seed = cfg.seeds[0] if args.seed is None else args.seed
    bench = ex.load_benchmark(cfg, seed)
    tcfg = cfg.train_config(seed)
    state = None
    if args.resume:
        state = load_state(args.resume)
    state_path = out / "train_state.ckpt"

    def checkpoint(st: TrainState) -> None:
        save_state(state_path, st, {"config": cfg.to_dict()})

    params, log = train(bench.train, tcfg, cfg.model_config(), state=state,
                        stop_after_epoch=args.stop_after_epoch, on_epoch_end=checkpoint)
    save_params(out / "model.ckpt", params, cfg.to_dict())
    log.write_csv(out / "train_log.csv")
    log.write_epoch_csv(out / "epochs.csv")
    print(f"trained {len(log.epochs)} epochs, {log.n_updates} updates")


def _load_model(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return load_params(args.checkpoint)


def cmd_eval(cfg: ExperimentConfig, args, out: Path) -> None:
    seed = cfg.seeds[0] if args.seed is None else args.seed
    params = _load_model(args)
    bench = ex.load_benchmark(cfg, seed)
    report, curve = ex.evaluate_params(params, bench, cfg)
    dump_json(out / "eval.json", report.to_dict())
    ex.write_rows(out / "calibration.csv", ["mu", "S", "U", "H"],
                  [dict(zip(["mu", "S", "U", "H"], r)) for r in curve])
    print(f"T1 {report.T1_unseen:.2f}  S {report.acc_seen:.2f}  U {report.acc_unseen:.2f}  "
          f"H {report.harmonic:.2f}  mu {report.mu:.6g}")


def cmd_ablate(cfg: ExperimentConfig, args, out: Path) -> None:
    seeds = cfg.seeds if args.seed is None else [args.seed]
    if args.study == "components":
        rows = ex.ablation_grid(cfg, seeds)
        ex.write_rows(out / "ablation.csv", ex.ABLATION_FIELDS, rows)
        for r in rows:
            print(f"{r['variant']:<14} T1 {r['T1_mean']:.2f}+-{r['T1_std']:.2f}  "
                  f"H {r['H_mean']:.2f}+-{r['H_std']:.2f}")
        return
    policies = cfg.policies() or list(STANDARD_POLICIES)
    rows = ex.augmentation_harness(cfg, policies, seeds)
    ex.write_rows(out / "augment.csv", ex.AUGMENT_FIELDS, rows)
    drift_rows = []
    for seed in seeds:
        res = ex.run_experiment(cfg, seed, "baseline")
        for rep in ex.drift_study(res.params, ex.load_benchmark(cfg, seed), policies, seed):
            drift_rows.append({"policy": rep.policy, "seed": seed, "mean_drift": rep.mean_drift})
    ex.write_rows(out / "distortion.csv", ["policy", "seed", "mean_drift"], drift_rows)
    print(f"{len(rows)} augmentation runs, {len(drift_rows)} drift probes")


def _parse_grid(text: str | None, axis: str) -> list[float]:
    if text is None:
        return list(DEFAULT_SWEEP_GRIDS[axis])
    try:
        grid = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--grid: expected comma-separated numbers, got {text!r}") from None
    if not grid:
        raise ConfigError("--grid is empty")
    return grid


def cmd_sweep(cfg: ExperimentConfig, args, out: Path) -> None:
    if args.axis is None:
        raise ConfigError("--axis is required for sweep")
    if args.axis not in ex.AXES:
        raise ConfigError(f"--axis must be one of {list(ex.AXES)}")
    seeds = cfg.seeds if args.seed is None else [args.seed]
    rows = ex.sweep(cfg, args.axis, _parse_grid(args.grid, args.axis), seeds)
    ex.write_rows(out / f"sweep_{args.axis}.csv", ex.SWEEP_FIELDS, rows)
    print(f"{len(rows)} sweep rows")


def cmd_visualize(cfg: ExperimentConfig, args, out: Path) -> None:
    seed = cfg.seeds[0] if args.seed is None else args.seed
    params = _load_model(args)
    bench = ex.load_benchmark(cfg, seed)
    ds = bench.dataset
    sub = ex.test_images(bench)
    n = min(args.samples, len(sub))
    pick = np.linspace(0, len(sub) - 1, n).astype(int)
    images, labels = sub.images[pick], sub.labels[pick]
    if args.what == "attention":
        maps = forward(images, params, ds.semantics).attn_maps.values
        for i in range(n):
            for k in range(maps.shape[1]):
                write_ppm(out / f"attn_{i:03d}_a{k:02d}.ppm", heat_overlay(images[i], maps[i, k]))
        acc = ex.localization_accuracy(params, sub, ds)
        dump_json(out / "metrics.json", {"localization_accuracy": acc, "n_images": len(sub)})
        print(f"localization accuracy {acc:.4f}")
    elif args.what == "perturbation":
        local = sub.local_labels[pick]
        ab = generate_adversarial(images, local, params, ds.semantics, cfg.perturb_config())
        st = perturbation_report(ab)
        for i in range(n):
            fg = st.foreground[i][None].astype(float)
            panels = {"clean": ab.clean[i], "delta": st.normalized[i], "adv": ab.adv[i],
                      "foreground": ab.adv[i] * fg, "background": ab.adv[i] * (1 - fg)}
            for name, img in panels.items():
                write_ppm(out / f"pert_{i:03d}_{name}.ppm", img.transpose(1, 2, 0))
        print(f"wrote {n} perturbation quintets")
    else:
        m = min(cfg.eval.drift_images, len(sub))
        local = sub.local_labels[:m]
        pc = cfg.perturb_config(steps=cfg.eval.drift_steps)
        tr = drift_trace(params, sub.images[:m], local, ds.semantics, pc)
        rows = [{"image": i, "step": t, "pc1": tr.projected[t, i, 0], "pc2": tr.projected[t, i, 1],
                 "drift": float(np.linalg.norm(tr.features[t, i] - tr.features[0, i]))}
                for i in range(m) for t in range(tr.features.shape[0])]
        ex.write_rows(out / "drift.csv", ["image", "step", "pc1", "pc2", "drift"], rows)
        print(f"mean max drift {tr.max_drift.mean():.6g}")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="haszsl", description="Adversarial ZSL training on synthetic data")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--checkpoint", help="model checkpoint for eval / visualize")
    p.add_argument("--resume", help="training state to resume from")
    p.add_argument("--stop-after-epoch", type=int, help="halt training after this epoch")
    p.add_argument("--axis", help="sweep axis: lambda1, lambda2, lambda3 or epsilon")
    p.add_argument("--grid", help="comma-separated sweep values")
    p.add_argument("--what", choices=["attention", "perturbation", "drift"], default="attention")
    p.add_argument("--study", choices=["components", "augment"], default="components")
    p.add_argument("--samples", type=int, default=4, help="images to export in visualize")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args, out)
        finalize(out, cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
