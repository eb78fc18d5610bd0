"""Command-line entry point: ``spongiosa <command> [--config FILE] [flags]``.

Every command takes an optional JSON config whose keys are validated before
any work starts; explicit flags override config values. Outputs go to a
fresh directory ``<out>/<command>-<timestamp>`` together with ``run.json``
(command line, resolved config, seed and library versions).

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .datapipe import PatchSpec, PhantomSpec, build_corpus, downsample, load_corpus, phantom_volume
from .diffmorph import STYLE_NAMES
from .evalsuite import GroupSample, summary_report
from .genmodels import generate, load_checkpoint, sample_latent
from .morphometry import DEFAULT_THRESHOLD, compute_all, read_param_csv, write_param_csv
from .styletransfer import (LATENT_POLICIES, LatentStyleOptimizer, example_presets_path, load_presets,
                            parameter_grid, treatment_shift)
from .training import TrainConfig, collapse_flag, default_device, train_progressive
from .volcore import DEFAULT_VOXEL_SIZE_UM, DensityVolume, denormalize_array, read_svol, write_svol


class UsageError(Exception):
    pass


def _phantom_keys():
    return {f.name for f in fields(PhantomSpec)} | {"n", "voxel_size"}


STYLE_KEYS = {"mu", "n_starts", "max_iter", "history_size", "latent_policy", "epsilon", "sigma", "t",
              "use_ema", "grid", "grid_step", "target", "treatment", "months", "presets", "corpus"}

CONFIG_KEYS = {
    "phantom": _phantom_keys,
    "corpus": lambda: {"size", "stride", "augment"},
    "train": lambda: {f.name for f in fields(TrainConfig)} | {"corpus"},
    "generate": lambda: {"checkpoint", "n", "use_ema"},
    "analyze": lambda: {"threshold"},
    "style": lambda: STYLE_KEYS | {"checkpoint"},
    "evaluate": lambda: {"alpha", "pca_columns"},
}


def load_config(path, command: str) -> dict:
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(cfg) - CONFIG_KEYS[command]() - {"seed"}
    if unknown:
        raise UsageError(f"unknown config keys for {command!r}: {sorted(unknown)}")
    return cfg


def _merge(cfg: dict, args, names) -> dict:
    out = dict(cfg)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _versions() -> dict:
    import scipy
    import sklearn
    import torch

    return {"spongiosa": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "scikit-learn": sklearn.__version__}


def _run_dir(base, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(base)
    run = base / f"{command}-{stamp}"
    i = 1
    while run.exists():
        run = base / f"{command}-{stamp}-{i}"
        i += 1
    run.mkdir(parents=True)
    return run


def _record(run: Path, args, config: dict, extra=None) -> None:
    rec = {"command": args.command, "argv": sys.argv[1:] if args.argv is None else args.argv,
           "config": config, "seed": config.get("seed"), "versions": _versions(),
           "device": str(default_device())}
    rec.update(extra or {})
    (run / "run.json").write_text(json.dumps(rec, indent=2, default=str))


def cmd_phantom(args, cfg, run):
    cfg = _merge(cfg, args, ["n", "seed"])
    n = int(cfg.pop("n", 1))
    voxel = float(cfg.pop("voxel_size", DEFAULT_VOXEL_SIZE_UM))
    spec = PhantomSpec.from_dict(cfg)
    for i in range(n):
        spec_i = PhantomSpec.from_dict({**spec.to_dict(), "seed": spec.seed + i})
        write_svol(phantom_volume(spec_i, voxel), run / f"phantom_{i:03d}.svol")
    return {**spec.to_dict(), "n": n, "voxel_size": voxel}


def cmd_corpus(args, cfg, run):
    cfg = _merge(cfg, args, ["size", "stride"])
    if args.no_augment:
        cfg["augment"] = False
    spec = PatchSpec(size=int(cfg.get("size", 32)), stride=int(cfg.get("stride", 8)))
    volumes = [read_svol(p) for p in args.inputs]
    names = [Path(p).name for p in args.inputs]
    manifest = build_corpus(volumes, run / "corpus", spec, bool(cfg.get("augment", True)), names)
    print(f"{manifest['count']} patches from {manifest['raw_count']} raw")
    return {**cfg, "size": spec.size, "stride": spec.stride}


def cmd_train(args, cfg, run):
    cfg = _merge(cfg, args, ["seed", "variant", "stages", "corpus"])
    corpus = cfg.pop("corpus", None)
    if corpus is None:
        raise UsageError("train needs --corpus or a 'corpus' config key")
    if "variant" in cfg:
        cfg["variant"] = cfg["variant"].replace("-", "_")
    config = TrainConfig.from_dict(cfg)
    patches = load_corpus(corpus)
    ckpts, metrics = train_progressive(patches, config, run / "checkpoints", max_seconds=args.max_seconds)
    metrics.write_jsonl(run / "metrics.jsonl")
    print(f"trained {config.variant} to stage {ckpts[-1].stage}; collapse={collapse_flag(metrics)}")
    return {**config.to_dict(), "corpus": str(corpus)}


def _generated_voxel_size(ckpt) -> float:
    # generated patches cover the 32³ training window at the final resolution
    return DEFAULT_VOXEL_SIZE_UM * 32 / ckpt.resolution


def cmd_generate(args, cfg, run):
    cfg = _merge(cfg, args, ["checkpoint", "n", "seed"])
    if args.live:
        cfg["use_ema"] = False
    if "checkpoint" not in cfg:
        raise UsageError("generate needs --checkpoint")
    ckpt = load_checkpoint(cfg["checkpoint"])
    n, seed = int(cfg.get("n", 1)), int(cfg.get("seed", 0))
    z = sample_latent(seed, n)
    samples = generate(ckpt, z, use_ema=bool(cfg.get("use_ema", True)))
    voxel = _generated_voxel_size(ckpt)
    for i, s in enumerate(samples):
        write_svol(DensityVolume(denormalize_array(s).astype(np.float32), voxel), run / f"sample_{i:04d}.svol")
    np.savetxt(run / "latents.csv", z, delimiter=",", fmt="%.9g")
    return {**cfg, "n": n, "seed": seed}


def cmd_analyze(args, cfg, run):
    cfg = _merge(cfg, args, ["threshold"])
    t = float(cfg.get("threshold", DEFAULT_THRESHOLD))
    rows = [compute_all(read_svol(p), t) for p in args.inputs]
    write_param_csv(run / "params.csv", rows, threshold=t, labels=[str(p) for p in args.inputs])
    return {"threshold": t, "inputs": [str(p) for p in args.inputs]}


def _parse_grid(text: str) -> int:
    a, sep, b = text.lower().partition("x")
    if not sep or a != b or not a.isdigit() or int(a) < 1:
        raise UsageError("--grid must look like 5x5")
    return int(a)


def cmd_style(args, cfg, run):
    cfg = _merge(cfg, args, ["checkpoint", "seed", "grid", "grid_step", "target", "treatment", "months",
                             "presets", "corpus", "mu", "max_iter", "latent_policy"])
    if "checkpoint" not in cfg:
        raise UsageError("style needs --checkpoint")
    modes = [k for k in ("grid", "target", "treatment") if cfg.get(k) is not None]
    if len(modes) != 1:
        raise UsageError("choose exactly one of --grid, --target, --treatment")
    ckpt = load_checkpoint(cfg["checkpoint"])
    seed = int(cfg.get("seed", 0))
    opt_kw = {k: cfg[k] for k in ("mu", "n_starts", "max_iter", "history_size", "latent_policy",
                                  "epsilon", "sigma", "t", "use_ema") if k in cfg}
    est = LatentStyleOptimizer(ckpt, random_state=seed, **opt_kw)
    if cfg.get("corpus"):
        data = load_corpus(cfg["corpus"])
        data = downsample(data, data.shape[1] // ckpt.resolution)
    else:
        data = generate(ckpt, sample_latent(seed + 1, 256), use_ema=est.use_ema)
    est.fit(data)
    z0 = sample_latent(seed)
    voxel = _generated_voxel_size(ckpt)

    def save(vol, name):
        write_svol(DensityVolume(denormalize_array(np.clip(vol, -1, 1)).astype(np.float32), voxel), run / name)

    save(est.generate(z0)[0], "content.svol")
    if modes[0] == "grid":
        n = _parse_grid(cfg["grid"])
        step = float(cfg.get("grid_step", 1.0))
        steps = (np.arange(n) - (n - 1) / 2) * step
        axes = (np.array([1.0, 0, 0, 0]), np.array([0, 0, 1.0, 0]))  # BMD by BV/TV
        cells = parameter_grid(est, z0, axes, steps, voxel_size=voxel)
        with open(run / "grid.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "status", *[f"target_{s}" for s in STYLE_NAMES],
                        *[f"achieved_{s}" for s in STYLE_NAMES], "style_residual", "content_residual"])
            for c in cells:
                ach = c.get("achieved_style", [np.nan] * 4)
                w.writerow([c["row"], c["col"], c["status"], *np.round(c["target"], 6), *np.round(ach, 6),
                            c.get("style_residual", ""), c.get("content_residual", "")])
                if "volume" in c:
                    save(c["volume"], f"cell_{c['row']}_{c['col']}.svol")
        write_param_csv(run / "grid_params.csv", [c.get("achieved_classic") for c in cells if "volume" in c],
                        labels=[f"cell_{c['row']}_{c['col']}" for c in cells if "volume" in c])
        failed = sum(1 for c in cells if c["status"].startswith("error"))
        print(f"grid {n}x{n}: {len(cells) - failed} cells ok, {failed} failed")
    else:
        if modes[0] == "target":
            raw = np.array([float(v) for v in str(cfg["target"]).split(",")])
            if raw.shape != (4,):
                raise UsageError("--target needs four comma-separated values: bmd,bmd_sd,bvtv,tmd")
        else:
            presets = load_presets(cfg.get("presets") or example_presets_path())
            base = est.style_of(est.generate(z0))[0] / est.alphas_
            raw = treatment_shift(base, cfg["treatment"], float(cfg.get("months", 12)), presets)
        res = est.optimize(raw * est.alphas_, content_z=z0)
        save(est.generate(res.z)[0], "styled.svol")
        (run / "result.json").write_text(json.dumps({
            "target_raw": raw.tolist(), "status": res.status, "objective": res.objective,
            "style_residual": res.style_residual, "content_residual": res.content_residual,
            "iterations": res.iterations, "z": res.z.tolist(), "trace": res.trace}, indent=2))
        print(f"{res.status}: style residual {res.style_residual:.4g}")
    return {**cfg, "seed": seed, "alphas": est.alphas_.tolist()}


def cmd_evaluate(args, cfg, run):
    cfg = _merge(cfg, args, ["alpha"])
    groups = [GroupSample("real", read_param_csv(args.real)[1])]
    for spec in args.group or []:
        label, sep, path = spec.partition("=")
        if not sep:
            raise UsageError("--group expects LABEL=params.csv")
        groups.append(GroupSample(label, read_param_csv(path)[1]))
    report = summary_report(groups, run, float(cfg.get("alpha", 0.05)), cfg.get("pca_columns"))
    print(report["markdown"])
    return {**cfg, "real": args.real, "groups": args.group}


COMMANDS = {"phantom": cmd_phantom, "corpus": cmd_corpus, "train": cmd_train, "generate": cmd_generate,
            "analyze": cmd_analyze, "style": cmd_style, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spongiosa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", default="runs", help="base directory for run outputs")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("phantom", "write synthetic rod-plate phantoms as SVOL")
    sp.add_argument("--n", type=int)

    sp = add("corpus", "extract, augment and normalize patches")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--size", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--no-augment", action="store_true")

    sp = add("train", "train a generative model on a corpus")
    sp.add_argument("--corpus")
    sp.add_argument("--variant", choices=["pwgan-gp", "wgan-gp", "gan", "wgan-clip",
                                          "pwgan_gp", "wgan_gp", "wgan_clip"])
    sp.add_argument("--stages", type=int)
    sp.add_argument("--max-seconds", type=float)

    sp = add("generate", "sample volumes from a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--n", type=int)
    sp.add_argument("--live", action="store_true", help="use live instead of EMA weights")

    sp = add("analyze", "classic morphometry CSV for SVOL files")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--threshold", type=float)

    sp = add("style", "steer a sample toward target parameters")
    sp.add_argument("--checkpoint")
    sp.add_argument("--corpus", help="corpus used to derive style weights")
    sp.add_argument("--grid", help="NxN parameter grid")
    sp.add_argument("--grid-step", dest="grid_step", type=float)
    sp.add_argument("--target", help="raw target bmd,bmd_sd,bvtv,tmd")
    sp.add_argument("--treatment", help="preset name")
    sp.add_argument("--months", type=float)
    sp.add_argument("--presets", help="preset JSON file")
    sp.add_argument("--mu", type=float)
    sp.add_argument("--max-iter", dest="max_iter", type=int)
    sp.add_argument("--latent-policy", dest="latent_policy", choices=LATENT_POLICIES)

    sp = add("evaluate", "compare parameter groups against a real group")
    sp.add_argument("--real", required=True, help="params CSV of the real group")
    sp.add_argument("--group", action="append", help="LABEL=params.csv, repeatable")
    sp.add_argument("--alpha", type=float)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    try:
        cfg = load_config(args.config, args.command)
    except (UsageError, OSError, json.JSONDecodeError) as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    run = _run_dir(args.out, args.command)
    try:
        resolved = COMMANDS[args.command](args, cfg, run)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a structured diagnostic
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "run_dir": str(run)}),
              file=sys.stderr)
        return 1
    _record(run, args, resolved)
    print(f"outputs in {run}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
