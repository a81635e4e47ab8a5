"""Command-line entry point.

Subcommands cover the full workflow: dataset generation, the three
pretraining stages plus the twin-view baseline, finetuning, the linear
probe, evaluation, feature-space analysis, the comparison grid and the
built-in selftest. Every run writes its fully resolved config next to its
outputs under ``<out>/<stage>/<timestamp>-<confighash>/``.

Exit codes: 0 success, 2 usage error, 3 config violation (the message names
the offending key).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import ablate as ablate_mod
from . import pipeline, synthgen
from .config import ConfigError, RunConfig, dump_config, load_config
from .data import DatasetManifest, ValidationError
from .models import Checkpoint, CheckpointError, init_checkpoint

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        dest="overrides", help="override a config key (repeatable)")
    p = argparse.ArgumentParser(
        prog="sscl",
        description="Self-supervised pretraining and evaluation for "
                    "multi-channel image segmentation.",
    )
    sub = p.add_subparsers(dest="command")

    sub.add_parser("generate-data", help="write the synthetic dataset",
                   parents=[common])
    for name, help_ in (
        ("pretrain-unifeat", "contrastive feature-alignment pretraining"),
        ("pretrain-core", "degradation-reconstruction pretraining"),
        ("pretrain-simsiam", "twin-view negative-cosine baseline"),
        ("finetune", "supervised end-to-end training"),
        ("linear-probe", "frozen-features linear protocol"),
    ):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.add_argument("--init", help="initial checkpoint directory "
                                       "(default: fresh random init)")
    ev = sub.add_parser("eval", help="confusion-matrix report on a split",
                        parents=[common])
    ev.add_argument("--ckpt", required=True, help="checkpoint directory")
    ev.add_argument("--split", default="test")
    ev.add_argument("--head", default="seg", choices=("seg", "probe"))
    an = sub.add_parser("analyze-features", parents=[common],
                        help="similarity histograms and feature-map export")
    an.add_argument("--ckpt", required=True, help="checkpoint directory")
    an.add_argument("--pairs", default="sar-optical",
                    help="'sar-optical' or comma list like '0:7,1:6'")
    an.add_argument("--export-sample", default=None,
                    help="sample id whose feature maps to export as PNG")
    sub.add_parser("ablate", help="pretraining-variant comparison grid",
                   parents=[common])
    sub.add_parser("selftest", help="oracle and gradient checks",
                   parents=[common])
    return p


def _out_dir(cfg: RunConfig, stage: str) -> Path:
    import os

    root = Path(os.environ.get("SSCL_OUT", cfg.out))
    blob = json.dumps(cfg.to_json(), sort_keys=True).encode()
    h = hashlib.sha256(blob).hexdigest()[:8]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = root / stage / f"{stamp}-{h}"
    n = 0
    while d.exists():
        n += 1
        d = root / stage / f"{stamp}-{h}-{n}"
    d.mkdir(parents=True)
    dump_config(cfg, d / "config.yaml")
    return d


def _require_dataset(cfg: RunConfig) -> DatasetManifest:
    if cfg.dataset.path is None:
        raise CliError(EXIT_CONFIG, "dataset.path: required (point it at a "
                                    "generated dataset directory)")
    path = Path(cfg.dataset.path)
    if not (path / "manifest.json").exists():
        raise CliError(EXIT_CONFIG, f"dataset.path: no manifest.json under {path}")
    return DatasetManifest.load(path)


def _load_init(cfg: RunConfig, args, manifest: DatasetManifest) -> Checkpoint:
    if getattr(args, "init", None):
        return Checkpoint.load(Path(args.init))
    spec = cfg.model.network_spec(manifest.C, manifest.class_map.K)
    return init_checkpoint(spec, seed=cfg.seed,
                           dataset_id=pipeline.dataset_id(manifest))


def _cmd_generate_data(cfg: RunConfig, args) -> int:
    if cfg.dataset.path is None:
        raise CliError(EXIT_CONFIG, "dataset.path: required (where to write "
                                    "the dataset)")
    scene = cfg.dataset.scene_config()
    man = synthgen.generate_dataset(scene, cfg.dataset.n_train,
                                    cfg.dataset.n_test, Path(cfg.dataset.path),
                                    n_pretrain=cfg.dataset.n_pretrain)
    print(f"dataset: {man.root} ({man.C} channels, "
          f"{sum(len(v) for v in man.splits.values())} samples)")
    return EXIT_OK


_STAGE_RUNNERS = {
    "pretrain-unifeat": ("unifeat", pipeline.run_unifeat),
    "pretrain-core": ("core", pipeline.run_core),
    "pretrain-simsiam": ("simsiam", pipeline.run_simsiam),
    "finetune": ("finetune", pipeline.run_finetune),
}


def _cmd_stage(cfg: RunConfig, args, command: str) -> int:
    stage, runner = _STAGE_RUNNERS[command]
    manifest = _require_dataset(cfg)
    init = _load_init(cfg, args, manifest)
    out = _out_dir(cfg, stage)
    scfg = dataclasses.replace(cfg.stage(stage), seed=cfg.seed)
    ckpt = runner(scfg, manifest, init, out_dir=out)
    ckpt.save(out / "checkpoint")
    print(f"output_dir: {out}")
    print(f"checkpoint: {out / 'checkpoint'} (stage {ckpt.stage})")
    return EXIT_OK


def _cmd_linear_probe(cfg: RunConfig, args) -> int:
    manifest = _require_dataset(cfg)
    init = _load_init(cfg, args, manifest)
    out = _out_dir(cfg, "probe")
    scfg = dataclasses.replace(cfg.stage("probe"), seed=cfg.seed)
    ckpt, report = pipeline.run_linear_probe(scfg, manifest, init, out_dir=out)
    ckpt.save(out / "checkpoint")
    print(f"output_dir: {out}")
    print(f"probe AA {report.average_accuracy:.4f} OA {report.overall_accuracy:.4f}")
    return EXIT_OK


def _cmd_eval(cfg: RunConfig, args) -> int:
    manifest = _require_dataset(cfg)
    ckpt = Checkpoint.load(Path(args.ckpt))
    out = _out_dir(cfg, "eval")
    report = pipeline.evaluate(ckpt, manifest, args.split, head=args.head)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    print(f"output_dir: {out}")
    print(f"{args.split} AA {report.average_accuracy:.4f} "
          f"OA {report.overall_accuracy:.4f}")
    return EXIT_OK


def _sar_optical_pairs(manifest: DatasetManifest):
    sar = [i for i, m in enumerate(manifest.channel_meta)
           if m.modality.value == "sar"]
    opt = [i for i, m in enumerate(manifest.channel_meta)
           if m.modality.value == "optical"]
    return [(s, o) for s in sar for o in opt]


def _cmd_analyze(cfg: RunConfig, args) -> int:
    manifest = _require_dataset(cfg)
    ckpt = Checkpoint.load(Path(args.ckpt))
    out = _out_dir(cfg, "analysis")
    if args.pairs == "sar-optical":
        pairs = _sar_optical_pairs(manifest)
    else:
        try:
            pairs = [tuple(int(x) for x in p.split(":")) for p in args.pairs.split(",")]
        except ValueError:
            raise CliError(EXIT_USAGE, f"cannot parse --pairs {args.pairs!r}") from None
    cache = pipeline.SampleCache(manifest, ("train",))
    medians = {}
    for a, b in pairs:
        centers, mass, med = pipeline.similarity_histogram(
            ckpt, manifest, (a, b), cache=cache)
        medians[f"{a}:{b}"] = med
        lines = ["bin_center,mass"] + [f"{c},{m}" for c, m in zip(centers, mass)]
        (out / f"hist_{a}_{b}.csv").write_text("\n".join(lines) + "\n")
    (out / "medians.json").write_text(json.dumps(medians, indent=2))
    if args.export_sample is not None:
        from .data import load_sample

        sample = load_sample(manifest.sample_dir(args.export_sample), manifest)
        for layer in [f"fe:{i}" for i in range(min(2, manifest.C))] + ["trunk"]:
            pipeline.export_feature_maps(ckpt, sample.stack.data, layer,
                                         out / "feature_maps")
    print(f"output_dir: {out}")
    for k, v in medians.items():
        print(f"median {k}: {v:+.3f}")
    return EXIT_OK


def _cmd_ablate(cfg: RunConfig, args) -> int:
    manifest = _require_dataset(cfg)
    out = _out_dir(cfg, "ablate")
    spec = cfg.model.network_spec(manifest.C, manifest.class_map.K)
    result = ablate_mod.run_ablation(
        manifest, spec, cfg.stages, seeds=cfg.ablate.seeds,
        variants=cfg.ablate.variants, protocols=cfg.ablate.protocols,
        p_drop_sweep=cfg.ablate.p_drop_sweep, out_dir=out,
        progress=lambda m: print(f"  {m}", flush=True))
    print(f"output_dir: {out}")
    print(result.summary_table())
    return EXIT_OK


def _cmd_selftest(cfg: RunConfig, args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() == 0 else 1


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "generate-data":
            return _cmd_generate_data(cfg, args)
        if args.command in _STAGE_RUNNERS:
            return _cmd_stage(cfg, args, args.command)
        if args.command == "linear-probe":
            return _cmd_linear_probe(cfg, args)
        if args.command == "eval":
            return _cmd_eval(cfg, args)
        if args.command == "analyze-features":
            return _cmd_analyze(cfg, args)
        if args.command == "ablate":
            return _cmd_ablate(cfg, args)
        if args.command == "selftest":
            return _cmd_selftest(cfg, args)
        raise CliError(EXIT_USAGE, f"unknown subcommand {args.command!r}")
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ValidationError, CheckpointError, pipeline.ChainError,
            FileNotFoundError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.TrainingDiverged as e:
        print(f"error: training diverged: {e}; diagnostics: "
              f"{json.dumps(e.diagnostics)[:2000]}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
