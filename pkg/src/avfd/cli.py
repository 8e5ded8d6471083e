"""Command-line entry point: ``avfd <command> [options]``.

Each command resolves a flat key=value configuration from, in increasing
precedence: built-in defaults, ``--config FILE``, the ``AVFD_SEED``
environment variable (for commands that take a seed), ``--set key=value``
and dedicated flags. Unknown keys are rejected. The resolved map is written
to ``effective-config.txt`` in the run directory, which defaults to
``runs/<timestamp>-<tag>/``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .data import load_manifest
from .errors import (
    AVFDError, ConfigError, DimensionMismatch, EmptyGroup, EmptySequence, InvalidSpec, NonFinite,
    ParseError, SingleClass, TooFewSamples, ValidationError,
)
from .evaluation import (
    DEFAULT_BINS, diagnose, evaluate, plot_corruption_auc, plot_score_histograms, read_score_reports,
    write_evaluation,
)
from .fapl import DEFAULT_PROMPTS, format_prompt_file, read_prompt_file
from .perturbations import corrupt_dataset, parse_spec
from .synth import synthesize
from .training import (
    Checkpoint, DetectorParams, Encoders, TrainConfig, format_config, read_config_file, train,
)

log = logging.getLogger("avfd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_TRAIN_KEYS = TrainConfig().to_mapping()
_MODEL_KEYS = ("encoder_seed", "face_weights", "d", "num_tokens", "prompt_file", "prompt_regions", "prompt_text", "tau")

# defaults per command; every value is a string, as in config files
COMMAND_KEYS: dict[str, dict[str, str]] = {
    "train": {"manifest": "", **_TRAIN_KEYS},
    "evaluate": {"manifest": "", "checkpoint": "", "split": "test", "corrupt": "", "workers": "1"},
    "diagnose": {"scores": "", "features": "", "bins": str(DEFAULT_BINS)},
    "corrupt": {"manifest": "", "corrupt": ""},
    "synth": {
        "n": "200", "seed": "0", "test_only": "false", "scenario": "talking", "name": "synthetic",
        "model_seed": "0", **{k: _TRAIN_KEYS[k] for k in _MODEL_KEYS},
    },
    "prompts": {"action": "dump", "file": "", "prompt_regions": _TRAIN_KEYS["prompt_regions"]},
}

# flag name -> config key, per command
_FLAGS = {
    "train": ("manifest", "epochs", "seed", "batch_size", "learning_rate", "workers"),
    "evaluate": ("manifest", "checkpoint", "split", "workers"),
    "diagnose": ("scores", "bins"),
    "corrupt": ("manifest",),
    "synth": ("n", "seed", "scenario", "name", "model_seed"),
    "prompts": ("file",),
}


def resolve_config(command: str, config_file: str | None = None, overrides: dict[str, str] | None = None,
                   env: dict[str, str] | None = None) -> dict[str, str]:
    """Merge defaults < file < AVFD_SEED < overrides; reject unknown keys."""
    defaults = COMMAND_KEYS[command]
    merged = dict(defaults)
    layers = []
    if config_file:
        try:
            file_values = read_config_file(config_file)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        if file_values.pop("command", command) != command:
            raise ConfigError(f"{config_file} was written for another command")
        layers.append(("config file", file_values))
    env = os.environ if env is None else env
    if "seed" in defaults and env.get("AVFD_SEED", "").strip():
        layers.append(("AVFD_SEED", {"seed": env["AVFD_SEED"].strip()}))
    layers.append(("flags", overrides or {}))
    for source, values in layers:
        unknown = sorted(set(values) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown {command} keys from {source}: {', '.join(unknown)}")
        merged.update({k: str(v) for k, v in values.items()})
    return merged


def _int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from exc


def _bool(cfg, key):
    low = cfg[key].strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key} must be a boolean, got {cfg[key]!r}")


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg[k]]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def _train_config(values: dict[str, str]) -> TrainConfig:
    return TrainConfig.from_mapping({k: v for k, v in values.items() if k in _TRAIN_KEYS})


def _corruption_specs(text: str):
    return [parse_spec(s) for s in text.split(";") if s.strip()]


def _run_dir(out: str | None, tag: str) -> Path:
    if out:
        path = Path(out)
    else:
        path = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{tag}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_effective(run_dir: Path, command: str, cfg: dict[str, str]) -> None:
    (run_dir / "effective-config.txt").write_text(format_config({"command": command, **cfg}))


# -- commands ------------------------------------------------------------------


def cmd_train(cfg: dict[str, str], run_dir: Path, plots: bool = False) -> int:
    _require(cfg, "manifest")
    tcfg = _train_config(cfg)
    manifest = load_manifest(cfg["manifest"])
    ckpt = train(manifest, tcfg)
    path = ckpt.save(run_dir / "checkpoint.avfd")
    lines = ["step\tL\tL_av\tL_ft"] + [f"{i}\t" + "\t".join(repr(x) for x in row)
                                        for i, row in enumerate(ckpt.loss_history)]
    (run_dir / "loss.tsv").write_text("\n".join(lines) + "\n")
    if ckpt.loss_history:
        first, last = ckpt.loss_history[0][0], ckpt.loss_history[-1][0]
        print(f"trained {len(ckpt.loss_history)} steps: loss {first:.6f} -> {last:.6f}")
    print(f"checkpoint: {path}")
    return EXIT_OK


def cmd_evaluate(cfg: dict[str, str], run_dir: Path, plots: bool = False) -> int:
    _require(cfg, "manifest", "checkpoint")
    if not Path(cfg["checkpoint"]).is_file():
        raise FileNotFoundError(f"checkpoint not found: {cfg['checkpoint']}")
    specs = _corruption_specs(cfg["corrupt"])
    ckpt = Checkpoint.load(cfg["checkpoint"])
    ckpt.config["workers"] = str(_int(cfg, "workers"))
    manifest = load_manifest(cfg["manifest"])
    result = evaluate(manifest, ckpt, split=cfg["split"])
    write_evaluation(result, run_dir)
    print((run_dir / "metrics.txt").read_text(), end="")
    if plots:
        real = [r.video_score for r in result.reports if r.label == "real"]
        fake = [r.video_score for r in result.reports if r.label == "fake"]
        plot_score_histograms(real, fake, run_dir / "score_hist.png")
    if specs:
        aucs = {"clean": result.metrics["overall"]["auc"]}
        subset = manifest.split(cfg["split"])
        for spec in specs:
            sub = run_dir / "corrupted" / spec.kind
            corrupted = corrupt_dataset(subset, spec, sub / "data")
            res = evaluate(corrupted, ckpt, split=cfg["split"])
            write_evaluation(res, sub)
            aucs[str(spec)] = res.metrics["overall"]["auc"]
            print(f"{spec}: AUC {100 * aucs[str(spec)]:.2f}")
        (run_dir / "corruption_auc.json").write_text(json.dumps(aucs, indent=2) + "\n")
        if plots:
            plot_corruption_auc(aucs, run_dir / "corruption_auc.png")
    return EXIT_OK


def _load_features(text: str) -> dict[str, np.ndarray]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"features entries are name=path.npy, got {item!r}")
        out[name] = np.load(path)
    return out


def cmd_diagnose(cfg: dict[str, str], run_dir: Path, plots: bool = False) -> int:
    _require(cfg, "scores")
    bins = _int(cfg, "bins")
    reports = read_score_reports(cfg["scores"])
    real = [r for r in reports if r.label == "real"]
    fake = [r for r in reports if r.label == "fake"]
    fused = {}
    if len(real) >= 2 and len(fake) >= 2:
        fused = {"real": np.stack([r.fused_features() for r in real]),
                 "fake": np.stack([r.fused_features() for r in fake])}
    report = diagnose([r.video_score for r in real], [r.video_score for r in fake], fused, bins)
    # user feature sets are compared with each other, not with the fused features
    extra = diagnose([0.0], [0.0], _load_features(cfg["features"]), bins)
    report.mmd2.update(extra.mmd2)
    report.mmd2_raw.update(extra.mmd2_raw)
    (run_dir / "diagnostics.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"score overlap: {report.overlap:.4f}")
    for pair, value in report.mmd2.items():
        print(f"mmd2 {pair}: {value:.6g}")
    if plots:
        plot_score_histograms([r.video_score for r in real], [r.video_score for r in fake],
                              run_dir / "score_hist.png", bins)
    return EXIT_OK


def cmd_corrupt(cfg: dict[str, str], run_dir: Path, plots: bool = False) -> int:
    _require(cfg, "manifest", "corrupt")
    specs = _corruption_specs(cfg["corrupt"])
    if len(specs) != 1:
        raise ConfigError("corrupt takes exactly one corruption spec")
    out = corrupt_dataset(load_manifest(cfg["manifest"]), specs[0], run_dir)
    print(f"wrote {len(out)} records to {run_dir / 'manifest.avfd'}")
    return EXIT_OK


def cmd_synth(cfg: dict[str, str], run_dir: Path, plots: bool = False) -> int:
    n, seed = _int(cfg, "n"), _int(cfg, "seed")
    if n < 0:
        raise ConfigError("n must be >= 0")
    model = {k: cfg[k] for k in _MODEL_KEYS}
    tcfg = TrainConfig.from_mapping({**model, "seed": cfg["model_seed"]})
    encoders = Encoders.from_config(tcfg)
    emb = DetectorParams.init(tcfg, encoders).polarity(encoders.text, tcfg.tau)
    manifest = synthesize(run_dir, n, seed, encoders, emb, test_only=_bool(cfg, "test_only"),
                          scenario=cfg["scenario"], name=cfg["name"])
    n_real = sum(r.label == "real" for r in manifest.records)
    print(f"wrote {len(manifest)} clips ({n_real} real, {len(manifest) - n_real} fake) "
          f"to {run_dir / 'manifest.avfd'}")
    return EXIT_OK


def cmd_prompts(cfg: dict[str, str], run_dir: Path | None = None, plots: bool = False) -> int:
    action = cfg["action"]
    if action == "dump":
        regions = [r.strip() for r in cfg["prompt_regions"].split(",") if r.strip()]
        rows = [r for r in DEFAULT_PROMPTS if r[0] in regions]
        if len(rows) != len(set(regions)):
            raise ConfigError(f"unknown prompt region in {regions}")
        text = format_prompt_file([r[1] for r in rows], [r[2] for r in rows])
        if cfg["file"]:
            Path(cfg["file"]).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if action == "validate":
        _require(cfg, "file")
        pos, neg = read_prompt_file(cfg["file"])
        if not pos or not neg:
            raise ValidationError(f"{cfg['file']}: needs at least one pos and one neg prompt")
        print(f"ok: {len(pos)} positive, {len(neg)} negative prompts")
        return EXIT_OK
    raise ConfigError(f"prompts action must be dump or validate, got {action!r}")


COMMANDS = {
    "train": cmd_train, "evaluate": cmd_evaluate, "diagnose": cmd_diagnose,
    "corrupt": cmd_corrupt, "synth": cmd_synth, "prompts": cmd_prompts,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avfd", description="Audio-visual forgery detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "fit prompts and projections on the real clips of a train split",
        "evaluate": "score a split and report AP/AUC, optionally under frame corruptions",
        "diagnose": "score overlap and MMD^2 from an evaluation's scores.jsonl",
        "corrupt": "write a corrupted copy of a dataset",
        "synth": "generate the synthetic toy dataset",
        "prompts": "dump the default prompt file or validate one",
    }
    for name, help_text in helps.items():
        p = sub.add_parser(name, help=help_text)
        if name == "prompts":
            p.add_argument("action", nargs="?", choices=("dump", "validate"))
            p.add_argument("--regions", dest="prompt_regions")
        else:
            p.add_argument("--out", help="run directory (default runs/<timestamp>-<tag>)")
            p.add_argument("--tag", default=name)
            p.add_argument("--plots", action="store_true", help="also write static PNG plots")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        for key in _FLAGS[name]:
            p.add_argument("--" + key.replace("_", "-"), dest=key)
        if name in ("evaluate", "corrupt"):
            p.add_argument("--corrupt", action="append", help="corruption spec, e.g. noise:sigma=25,seed=7")
        if name == "synth":
            p.add_argument("--test-only", dest="test_only", action="store_const", const="true")
        if name == "diagnose":
            p.add_argument("--features", action="append", metavar="NAME=PATH.npy")
    return parser


def _overrides(args) -> dict[str, str]:
    values = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = value.strip()
    for key in list(_FLAGS[args.command]) + ["test_only", "prompt_regions", "action"]:
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    for key, sep in (("corrupt", ";"), ("features", ",")):
        if getattr(args, key, None):
            values[key] = sep.join(getattr(args, key))
    return values


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args.config, _overrides(args))
        if args.command == "prompts":
            return cmd_prompts(cfg)
        run_dir = _run_dir(args.out, args.tag)
        _write_effective(run_dir, args.command, cfg)
        return COMMANDS[args.command](cfg, run_dir, args.plots)
    except (ConfigError, InvalidSpec) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFinite as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, ValidationError, SingleClass, EmptyGroup, EmptySequence, TooFewSamples,
            DimensionMismatch, OSError, AVFDError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
