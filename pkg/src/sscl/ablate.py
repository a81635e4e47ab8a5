"""Comparison grid: pretraining variants x evaluation protocols x seeds.

Variants:
  random     -- no pretraining
  core_only  -- reconstruction pretraining from random init
  sscl       -- contrastive feature alignment then reconstruction
  simsiam    -- twin-view negative-cosine baseline
An optional channel-dropout probability sweep reruns the reconstruction
stage of the ``sscl`` variant at each probability and finetunes each result.

Checkpoints are shared across cells of one seed (the probe and the finetune
of one variant consume the same pretrained checkpoint), which keeps the
grid affordable without changing any result.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest
from .models import Checkpoint, NetworkSpec, init_checkpoint
from .pipeline import (EvalReport, SampleCache, StageConfig, dataset_id,
                       default_stage_config, evaluate, run_core, run_finetune,
                       run_linear_probe, run_simsiam, run_unifeat)

VARIANTS = ("random", "core_only", "sscl", "simsiam")


@dataclass(frozen=True)
class AblationResult:
    """All grid cells: reports[(variant, protocol, seed)] plus the sweep
    cells reports[("sscl@p=<p>", "finetune", seed)]."""

    reports: dict = field(default_factory=dict)

    def cells(self):
        return sorted(self.reports.keys())

    def aa(self, variant: str, protocol: str, seed: int) -> float:
        return self.reports[(variant, protocol, seed)].average_accuracy

    def mean_std(self, variant: str, protocol: str):
        vals = [r.average_accuracy for (v, p, _), r in self.reports.items()
                if v == variant and p == protocol]
        if not vals:
            raise KeyError((variant, protocol))
        return float(np.mean(vals)), float(np.std(vals))

    def summary_rows(self):
        keys = sorted({(v, p) for (v, p, _) in self.reports})
        rows = []
        for v, p in keys:
            mean, std = self.mean_std(v, p)
            oas = [r.overall_accuracy for (vv, pp, _), r in self.reports.items()
                   if vv == v and pp == p]
            rows.append({"variant": v, "protocol": p,
                         "aa_mean": mean, "aa_std": std,
                         "oa_mean": float(np.mean(oas)),
                         "oa_std": float(np.std(oas)),
                         "n_seeds": len(oas)})
        return rows

    def summary_table(self) -> str:
        lines = [f"{'variant':<16} {'protocol':<10} {'AA':>14} {'OA':>14}"]
        for r in self.summary_rows():
            lines.append(
                f"{r['variant']:<16} {r['protocol']:<10} "
                f"{100*r['aa_mean']:6.2f} ± {100*r['aa_std']:5.2f} "
                f"{100*r['oa_mean']:6.2f} ± {100*r['oa_std']:5.2f}"
            )
        return "\n".join(lines)

    def save(self, out_dir: Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for (v, p, s), rep in self.reports.items():
            (out_dir / f"{v}_{p}_seed{s}.json").write_text(
                json.dumps(rep.to_json(), indent=2))
        (out_dir / "summary.json").write_text(
            json.dumps(self.summary_rows(), indent=2))
        (out_dir / "summary.txt").write_text(self.summary_table() + "\n")


def pretrain_variant(variant: str, seed: int, spec: NetworkSpec,
                     manifest: DatasetManifest, stage_cfgs: dict[str, StageConfig],
                     cache: SampleCache | None = None,
                     p_drop: float | None = None) -> Checkpoint:
    """Produce the pretrained checkpoint of one variant at one seed."""
    init = init_checkpoint(spec, seed=seed, dataset_id=dataset_id(manifest))
    if variant == "random":
        return init
    if variant == "simsiam":
        cfg = dataclasses.replace(stage_cfgs["simsiam"], seed=seed)
        return run_simsiam(cfg, manifest, init, cache=cache)
    core_cfg = dataclasses.replace(
        stage_cfgs["core"], seed=seed,
        **({} if p_drop is None else {"p_drop": p_drop}))
    if variant == "core_only":
        return run_core(core_cfg, manifest, init, cache=cache)
    if variant == "sscl":
        u = run_unifeat(dataclasses.replace(stage_cfgs["unifeat"], seed=seed),
                        manifest, init, cache=cache)
        return run_core(core_cfg, manifest, u, cache=cache)
    raise ValueError(f"unknown variant {variant!r}")


def run_ablation(manifest: DatasetManifest, spec: NetworkSpec,
                 stage_cfgs: dict[str, StageConfig],
                 seeds=(0, 1, 2), variants=("random", "core_only", "sscl"),
                 protocols=("probe", "finetune"), p_drop_sweep=(),
                 out_dir: Path | None = None,
                 cache: SampleCache | None = None,
                 progress=None) -> AblationResult:
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    cache = cache or SampleCache(manifest, ("train", "test"))
    reports: dict = {}

    def note(msg):
        if progress is not None:
            progress(msg)

    for seed in seeds:
        for variant in variants:
            ckpt = pretrain_variant(variant, seed, spec, manifest, stage_cfgs,
                                    cache=cache)
            note(f"seed {seed}: {variant} pretrained")
            if "probe" in protocols:
                pcfg = dataclasses.replace(stage_cfgs["probe"], seed=seed)
                _, rep = run_linear_probe(pcfg, manifest, ckpt, cache=cache)
                reports[(variant, "probe", seed)] = rep
                note(f"seed {seed}: {variant} probe AA={rep.average_accuracy:.3f}")
            if "finetune" in protocols:
                fcfg = dataclasses.replace(stage_cfgs["finetune"], seed=seed)
                ft = run_finetune(fcfg, manifest, ckpt, cache=cache)
                rep = evaluate(ft, manifest, "test", cache=cache)
                reports[(variant, "finetune", seed)] = rep
                note(f"seed {seed}: {variant} finetune AA={rep.average_accuracy:.3f}")
        for p in p_drop_sweep:
            ckpt = pretrain_variant("sscl", seed, spec, manifest, stage_cfgs,
                                    cache=cache, p_drop=float(p))
            fcfg = dataclasses.replace(stage_cfgs["finetune"], seed=seed)
            ft = run_finetune(fcfg, manifest, ckpt, cache=cache)
            rep = evaluate(ft, manifest, "test", cache=cache)
            reports[(f"sscl@p={p:g}", "finetune", seed)] = rep
            note(f"seed {seed}: sscl@p={p:g} finetune AA={rep.average_accuracy:.3f}")
    result = AblationResult(reports)
    if out_dir is not None:
        result.save(out_dir)
    return result
