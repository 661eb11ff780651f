"""Sweep harness: one frozen-backbone training plus evaluation per cell.

Axes cover the standard adaptation comparisons: per-block overrides, per-module overrides
(non-causal vs both stacks), an adapter mode-by-bottleneck grid, and the three
combined recipes. Every cell writes a manifest holding its plan JSON, seeds,
training budget and input paths, so any cell can be re-run bit-identically.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import bundles as bd
from . import figures
from . import routing as rt
from . import synth
from . import training as tr
from .errors import ConfigError

AXES = ("per-block", "per-module", "adapter-grid", "recipe")


@dataclass(frozen=True)
class SweepCell:
    cell_id: str
    plan: rt.DomainPlan


@dataclass
class SweepSpec:
    axis: str
    domain: str
    backbone_path: str
    train_corpus: str
    eval_corpus: str
    train: tr.TrainConfig
    out_dir: str
    jobs: int = 1

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "domain": self.domain,
            "backbone_path": self.backbone_path,
            "train_corpus": self.train_corpus,
            "eval_corpus": self.eval_corpus,
            "train": self.train.to_json(),
            "out_dir": self.out_dir,
            "jobs": self.jobs,
        }


def cells_for_axis(axis: str, config: rt.ModelConfig, domain: str, base_seed: int) -> list[SweepCell]:
    cells: list[SweepCell] = []

    def seed_for(i: int) -> int:
        return base_seed * 1009 + i

    if axis == "per-block":
        i = 0
        for stack in ("causal", "noncausal"):
            blocks = config.encoder.causal_blocks if stack == "causal" else config.encoder.noncausal_blocks
            for k in range(blocks):
                cells.append(SweepCell(f"{stack}-block{k}", rt.plan_block_override(domain, stack, k, seed_for(i))))
                i += 1
    elif axis == "per-module":
        i = 0
        for site in ("ffn_start", "mhsa", "conv", "ffn_end"):
            for tag, stacks in (("nc", ("noncausal",)), ("c+nc", ("causal", "noncausal"))):
                cells.append(
                    SweepCell(f"{site}-{tag}", rt.plan_module_override(domain, config, site, stacks, seed_for(i)))
                )
                i += 1
    elif axis == "adapter-grid":
        i = 0
        for mode in ("sequential", "parallel"):
            for b in rt.adapter_grid_dims(config):
                for tag, stacks in (("nc", ("noncausal",)), ("c+nc", ("causal", "noncausal"))):
                    cells.append(
                        SweepCell(f"{mode}-b{b}-{tag}", rt.plan_adapters(domain, config, mode, b, stacks, seed_for(i)))
                    )
                    i += 1
    elif axis == "recipe":
        b = rt.adapter_grid_dims(config)[2]
        cells = [
            SweepCell("pa-c+pa-nc", rt.plan_adapters(domain, config, "parallel", b, ("causal", "noncausal"), seed_for(0))),
            SweepCell("pa-c+ffn-nc", rt.plan_final_recipe(domain, config, b, seed_for(1))),
            SweepCell("ffn-c+ffn-nc", rt.plan_module_override(domain, config, "ffn_end", ("causal", "noncausal"), seed_for(2))),
        ]
    else:
        raise ConfigError(f"unknown sweep axis '{axis}' (expected one of {AXES})")
    return cells


def run_cell(manifest: dict) -> dict:
    """Train and evaluate one cell from its manifest; pure function of the manifest."""
    backbone = bd.load_bundle(manifest["backbone_path"])
    train_utts, _ = synth.load_corpus(manifest["train_corpus"])
    eval_utts, _ = synth.load_corpus(manifest["eval_corpus"])
    plan = rt.DomainPlan.from_json(manifest["plan"])
    cfg = tr.TrainConfig.from_json(manifest["train"])
    train_utts = [u for u in train_utts if u.domain == plan.domain]
    eval_utts = [u for u in eval_utts if u.domain == plan.domain]
    result = tr.train_domain(backbone, plan, train_utts, cfg)
    model = bd.compose(backbone, result.bundle)
    report = tr.evaluate(model, eval_utts, plan.domain, decoder="noncausal")
    row = {
        "cell_id": manifest["cell_id"],
        "status": "ok",
        "trainable_params": rt.count_plan_params(backbone.config(), plan),
        "final_nll": result.curve[-1][1] if result.curve else None,
        **report.to_json(),
        "rate": report.rate,
    }
    return {"row": row, "bundle": result.bundle}


def _cell_worker(args: tuple[dict, str]) -> dict:
    manifest, bundle_path = args
    try:
        out = run_cell(manifest)
        bd.save_bundle(out["bundle"], bundle_path)
        return out["row"]
    except Exception as e:  # a failing cell must not sink the sweep
        return {"cell_id": manifest["cell_id"], "status": "failed", "error": f"{type(e).__name__}: {e}"}


def format_table(axis: str, domain: str, rows: list[dict]) -> str:
    header = f"{'cell':22s} {'params':>10s} {'rate%':>7s} {'sub':>5s} {'ins':>5s} {'del':>5s}  status"
    lines = [f"axis={axis} domain={domain}", header, "-" * len(header)]
    for r in rows:
        if r["status"] == "ok":
            lines.append(
                f"{r['cell_id']:22s} {r['trainable_params']:>10,d} {100 * r['rate']:>7.2f}"
                f" {r['substitutions']:>5d} {r['insertions']:>5d} {r['deletions']:>5d}  ok"
            )
        else:
            lines.append(f"{r['cell_id']:22s} {'-':>10s} {'-':>7s} {'-':>5s} {'-':>5s} {'-':>5s}  {r['error']}")
    return "\n".join(lines) + "\n"


@dataclass
class SweepResult:
    axis: str
    rows: list[dict]
    table_json: Path
    table_txt: Path
    figure: Path
    manifests: list[Path] = field(default_factory=list)


def run_sweep(spec: SweepSpec) -> SweepResult:
    out = Path(spec.out_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    backbone = bd.load_bundle(spec.backbone_path)
    cells = cells_for_axis(spec.axis, backbone.config(), spec.domain, spec.train.seed)
    manifests: list[Path] = []
    jobs_args = []
    for cell in cells:
        manifest = {
            "kind": "sweep-cell",
            "axis": spec.axis,
            "cell_id": cell.cell_id,
            "plan": cell.plan.to_json(),
            "train": spec.train.to_json(),
            "backbone_path": str(spec.backbone_path),
            "backbone_fingerprint": backbone.manifest["fingerprint"],
            "train_corpus": str(spec.train_corpus),
            "eval_corpus": str(spec.eval_corpus),
        }
        mpath = out / "cells" / f"{cell.cell_id}.manifest.json"
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        manifests.append(mpath)
        jobs_args.append((manifest, str(out / "cells" / f"{cell.cell_id}.mdab")))
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            rows = list(pool.map(_cell_worker, jobs_args))
    else:
        rows = [_cell_worker(a) for a in jobs_args]
    table_json = out / "table.json"
    table_json.write_text(json.dumps({"axis": spec.axis, "domain": spec.domain, "rows": rows}, indent=2))
    table_txt = out / "table.txt"
    table_txt.write_text(format_table(spec.axis, spec.domain, rows))
    figure = figures.save_sweep_bars(rows, out / "sweep.png", title=f"{spec.axis} on {spec.domain}")
    return SweepResult(spec.axis, rows, table_json, table_txt, figure, manifests)


def rerun_cell(manifest_path: str | Path) -> dict:
    """Re-run one cell exactly from its manifest; returns the result row."""
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("kind") != "sweep-cell":
        raise ConfigError(f"{manifest_path} is not a sweep cell manifest")
    return run_cell(manifest)["row"]
