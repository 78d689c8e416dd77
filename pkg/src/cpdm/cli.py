"""``cpdm`` command-line entry point.

Subcommands: make-synthetic, train, enhance, eval, inspect-schedule.

Every option has a flat dotted key (shown in ``--help``). A JSON file passed
with ``--config`` may set any of those keys; explicit flags win over the
file, and the file wins over built-in defaults. Unknown keys are rejected.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("cpdm")


class UsageError(Exception):
    pass


class Option:
    def __init__(self, key, *flags, default=None, help="", **kw):
        self.key, self.flags, self.default, self.help, self.kw = key, flags, default, help, kw


def _list_of(kind):
    def parse(text):
        return [kind(v) for v in str(text).split(",") if v.strip()]
    return parse


COMMANDS: dict[str, tuple[str, list[Option]]] = {
    "make-synthetic": (
        "Generate a paired synthetic dataset (procedural references + degraded raws).",
        [
            Option("out", "--out", help="output dataset root (required)"),
            Option("n", "--n", default=200, type=int, help="number of pairs"),
            Option("size", "--size", default=64, type=int, help="square image size in pixels"),
            Option("seed", "--seed", default=0, type=int, help="generator seed"),
            Option("force", "--force", default=False, action="store_true", help="overwrite an existing dataset"),
            Option("degrade.attenuation", "--attenuation", default=[1.2, 0.4, 0.1], type=_list_of(float),
                   help="per-channel attenuation R,G,B"),
            Option("degrade.haze_color", "--haze-color", default=[0.05, 0.35, 0.45], type=_list_of(float),
                   help="haze color R,G,B in [0,1]"),
            Option("degrade.haze_strength", "--haze-strength", default=0.3, type=float, help="haze blend in [0,1)"),
            Option("degrade.noise_sigma", "--noise-sigma", default=0.01, type=float, help="sensor noise std"),
        ],
    ),
    "train": (
        "Train the conditional noise predictor on a paired dataset.",
        [
            Option("data", "--data", help="dataset root containing manifest.json (required)"),
            Option("out", "--out", help="checkpoint/output directory (required)"),
            Option("holdout", "--holdout", default=0, type=int,
                   help="exclude the last N manifest pairs from training"),
            Option("image_size", "--size", default=0, type=int,
                   help="resize images to this square size; 0 keeps the manifest size"),
            Option("resume", "--resume", default=None, help="checkpoint directory to resume from"),
            Option("model.base_channels", "--base-channels", default=32, type=int, help="UNet width"),
            Option("model.channel_multipliers", "--channel-multipliers", default=[1, 2, 4], type=_list_of(int),
                   help="comma-separated width multiplier per level"),
            Option("model.blocks_per_level", "--blocks-per-level", default=4, type=int,
                   help="residual blocks per UNet level"),
            Option("model.time_embed_dim", "--time-embed-dim", default=128, type=int,
                   help="timestep embedding width"),
            Option("model.use_difference_condition", "--no-diff-cond", default=True, action="store_false",
                   help="drop the y0 - x_t input (model-A/C)"),
            Option("model.use_ccm", "--no-ccm", default=True, action="store_false",
                   help="drop the content compensation module (model-A/B)"),
            Option("train.steps", "--steps", default=10000, type=int, help="optimizer steps"),
            Option("train.batch_size", "--batch-size", default=16, type=int, help="pairs per step"),
            Option("train.learning_rate", "--lr", default=1e-4, type=float, help="Adam learning rate"),
            Option("train.seed", "--seed", default=0, type=int, help="seed for init, data order, t and noise"),
            Option("train.checkpoint_every", "--checkpoint-every", default=1000, type=int,
                   help="periodic checkpoint interval in steps"),
            Option("schedule.T", "--T", default=1000, type=int, help="diffusion steps"),
            Option("schedule.beta_start", "--beta-start", default=1e-4, type=float, help="first beta"),
            Option("schedule.beta_end", "--beta-end", default=0.02, type=float, help="last beta"),
            Option("force", "--force", default=False, action="store_true",
                   help="allow writing into a non-empty output directory"),
        ],
    ),
    "enhance": (
        "Enhance a directory of raw PNGs with a trained checkpoint.",
        [
            Option("checkpoint", "--checkpoint", help="checkpoint directory, or a training output dir (required)"),
            Option("input", "--input", help="directory of raw PNG images (required)"),
            Option("out", "--out", help="directory for enhanced PNGs (required)"),
            Option("seed", "--seed", default=0, type=int, help="sampling seed"),
            Option("T", "--T", default=None, type=int, help="expected diffusion steps; must match the checkpoint"),
            Option("batch_size", "--batch-size", default=32, type=int, help="images sampled together"),
            Option("trajectory_every", "--trajectory-every", default=0, type=int,
                   help="also dump x_t every k steps under <out>/trajectory (0 = off)"),
        ],
    ),
    "eval": (
        "Compute PSNR/SSIM/MSE of enhanced images against references.",
        [
            Option("enhanced", "--enhanced", help="directory of enhanced PNGs (required)"),
            Option("ref", "--ref", help="directory of reference PNGs with matching names (required)"),
            Option("out", "--out", default=None, help="optional report directory (CSV + figure)"),
            Option("dataset_name", "--name", default="dataset", help="dataset label for the report"),
        ],
    ),
    "inspect-schedule": (
        "Print t, beta_t, alpha_bar_t, posterior variance as CSV.",
        [
            Option("T", "--T", default=1000, type=int, help="diffusion steps"),
            Option("beta_start", "--beta-start", default=1e-4, type=float, help="first beta"),
            Option("beta_end", "--beta-end", default=0.02, type=float, help="last beta"),
            Option("plot", "--plot", default=None, help="optional PNG path for a schedule figure"),
        ],
    ),
}

REQUIRED = {
    "make-synthetic": ["out"],
    "train": ["data", "out"],
    "enhance": ["checkpoint", "input", "out"],
    "eval": ["enhanced", "ref"],
    "inspect-schedule": [],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpdm", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (desc, options) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of dotted-key settings")
        for opt in options:
            shown = "" if opt.default is None else f" (default: {opt.default})"
            p.add_argument(*opt.flags, dest=opt.key, help=f"[{opt.key}] {opt.help}{shown}", **opt.kw)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    options = COMMANDS[command][1]
    config = {opt.key: opt.default for opt in options}
    given = vars(ns)
    if given.get("config"):
        try:
            from_file = json.loads(Path(given["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
        unknown = sorted(set(from_file) - set(config))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        config.update(from_file)
    for opt in options:
        if opt.key in given:
            config[opt.key] = given[opt.key]
    missing = [k for k in REQUIRED[command] if config.get(k) in (None, "")]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")
    return config


def _echo_config(config: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "run_config.json").write_text(json.dumps(config, indent=2, sort_keys=True))


def _png_files(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


# -- subcommands ------------------------------------------------------------


def cmd_make_synthetic(c: dict) -> int:
    from .data import DegradeParams, make_synthetic_dataset

    out = Path(c["out"])
    if (out / "manifest.json").exists() and not c["force"]:
        log.error("%s already holds a dataset; pass --force to overwrite", out)
        return 1
    params = DegradeParams(
        tuple(c["degrade.attenuation"]), tuple(c["degrade.haze_color"]),
        float(c["degrade.haze_strength"]), float(c["degrade.noise_sigma"]),
    )
    manifest = make_synthetic_dataset(int(c["n"]), int(c["size"]), params, int(c["seed"]), out)
    _echo_config(c, out)
    print(out / "manifest.json")
    log.info("wrote %d pairs", len(manifest.pairs))
    return 0


def _model_config(c: dict):
    from .network import ModelConfig

    return ModelConfig(
        base_channels=int(c["model.base_channels"]),
        channel_multipliers=tuple(c["model.channel_multipliers"]),
        blocks_per_level=int(c["model.blocks_per_level"]),
        time_embed_dim=int(c["model.time_embed_dim"]),
        use_difference_condition=bool(c["model.use_difference_condition"]),
        use_ccm=bool(c["model.use_ccm"]),
    )


def cmd_train(c: dict) -> int:
    from . import plotting
    from .data import DatasetManifest, load_dataset
    from .trainer import NonFiniteLossError, TrainConfig, read_log, train_loop

    out = Path(c["out"])
    if out.exists() and any(out.iterdir()) and not (c["force"] or c["resume"]):
        log.error("%s is not empty; pass --force to write into it", out)
        return 1
    manifest = DatasetManifest.read(c["data"])
    if c["image_size"]:
        manifest.image_size = (int(c["image_size"]),) * 2
    holdout = int(c["holdout"])
    if holdout:
        manifest = manifest.subset(0, len(manifest.pairs) - holdout)
    dataset = load_dataset(manifest)
    model_cfg = _model_config(c)
    train_cfg = TrainConfig(
        total_steps=int(c["train.steps"]),
        batch_size=int(c["train.batch_size"]),
        learning_rate=float(c["train.learning_rate"]),
        seed=int(c["train.seed"]),
        checkpoint_every=int(c["train.checkpoint_every"]),
        T=int(c["schedule.T"]),
        beta_start=float(c["schedule.beta_start"]),
        beta_end=float(c["schedule.beta_end"]),
    )
    _echo_config(c, out)
    log.info("training on %d pairs, %s, in_channels=%d", len(dataset), model_cfg, model_cfg.in_channels)
    try:
        train_loop(
            dataset, model_cfg, train_cfg, out,
            log_path=out / "train_log.csv",
            resume_from=c["resume"],
            extra_manifest={"train_ids": manifest.ids()},
        )
    except NonFiniteLossError as exc:
        log.error("%s", exc)
        return 1
    reports = read_log(out / "train_log.csv")
    if reports:
        plotting.loss_curve(reports, out / "loss_curve.png")
    print(out / "final")
    return 0


def _resolve_checkpoint(path) -> Path:
    path = Path(path)
    if (path / "manifest.json").is_file():
        return path
    if (path / "final" / "manifest.json").is_file():
        return path / "final"
    raise FileNotFoundError(f"no checkpoint found at {path}")


def cmd_enhance(c: dict) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_png, write_png
    from .sampler import SampleConfig, run_sampler
    from .schedule import make_linear_schedule

    ckpt = _resolve_checkpoint(c["checkpoint"])
    model, manifest = load_checkpoint(ckpt)
    sched_cfg = manifest.get("schedule")
    if sched_cfg is None:
        log.error("checkpoint %s records no diffusion schedule", ckpt)
        return 1
    if c["T"] is not None and int(c["T"]) != sched_cfg["T"]:
        log.error("schedule mismatch: --T %s but checkpoint was trained with T=%s", c["T"], sched_cfg["T"])
        return 1
    schedule = make_linear_schedule(sched_cfg["T"], sched_cfg["beta_start"], sched_cfg["beta_end"])
    size = tuple(manifest.get("image_size") or ())
    files = _png_files(c["input"])
    if not files:
        log.error("no PNG files in %s", c["input"])
        return 1
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(c, out)

    bs = int(c["batch_size"])
    every = int(c["trajectory_every"])
    seeds = np.random.SeedSequence(int(c["seed"])).spawn((len(files) + bs - 1) // bs)
    for b, start in enumerate(range(0, len(files), bs)):
        chunk = files[start:start + bs]
        raw = np.stack([read_png(f, size or None) for f in chunk])
        y0 = torch.from_numpy(raw * 2.0 - 1.0).float()
        cfg = SampleConfig(
            seed=int(seeds[b].generate_state(1)[0]), T=schedule.T,
            record_trajectory=every > 0, trajectory_every=max(every, 1),
        )
        result = run_sampler(model, cfg, y0, schedule)
        enhanced = ((result.x0 + 1.0) * 0.5).clamp(0.0, 1.0)
        for i, f in enumerate(chunk):
            write_png(out / f.name, enhanced[i])
            for t, state in result.trajectory.items():
                write_png(out / "trajectory" / f.stem / f"t{t:05d}.png", ((state[i] + 1.0) * 0.5).clamp(0.0, 1.0))
        log.info("enhanced %d/%d", start + len(chunk), len(files))
    print(out)
    return 0


def cmd_eval(c: dict) -> int:
    from . import plotting
    from .data import read_png
    from .metrics import MetricReport

    enhanced = _png_files(c["enhanced"])
    ref_dir = Path(c["ref"])
    if not enhanced:
        log.error("no PNG files in %s", c["enhanced"])
        return 1
    report = MetricReport(c["dataset_name"])
    for f in enhanced:
        ref_path = ref_dir / f.name
        if not ref_path.is_file():
            log.error("no reference image for %s in %s", f.name, ref_dir)
            return 1
        a, b = read_png(f), read_png(ref_path)
        if a.shape != b.shape:
            log.error("%s: enhanced %s vs reference %s", f.name, a.shape, b.shape)
            return 1
        report.add(f.stem, a, b)
    sys.stdout.write(report.to_csv())
    sys.stdout.write("\n" + report.to_table() + "\n")
    if c["out"]:
        out = Path(c["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(report.to_csv())
        plotting.metric_report(report, out / "metrics.png")
        _echo_config(c, out)
    return 0


def cmd_inspect_schedule(c: dict) -> int:
    from .schedule import make_linear_schedule

    s = make_linear_schedule(int(c["T"]), float(c["beta_start"]), float(c["beta_end"]))
    lines = ["t,beta,alpha_bar,posterior_variance"]
    lines += [f"{t},{b:.10g},{ab:.10g},{v:.10g}" for t, b, ab, v in s.rows()]
    sys.stdout.write("\n".join(lines) + "\n")
    if c["plot"]:
        from . import plotting

        plotting.schedule_curves(s, c["plot"])
    return 0


HANDLERS = {
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "inspect-schedule": cmd_inspect_schedule,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if getattr(ns, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    command = ns.command
    try:
        config = resolve(command, ns)
    except UsageError as exc:
        parser._subparsers._group_actions[0].choices[command].print_usage(sys.stderr)
        print(f"cpdm {command}: error: {exc}", file=sys.stderr)
        return 2
    log.info("resolved config: %s", json.dumps(config, sort_keys=True))
    try:
        return HANDLERS[command](config)
    except (OSError, ValueError, RuntimeError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
