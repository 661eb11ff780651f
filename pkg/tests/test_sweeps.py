"""Sweep harness tests: axis shapes, artifacts, re-runnable cell manifests."""
from __future__ import annotations

import json

import numpy as np
import pytest

from modasr import bundles as bd
from modasr import routing as rt
from modasr import sweeps
from modasr import synth
from modasr import training as tr
from modasr.errors import ConfigError

DESK = rt.load_config("desk")


class TestCellShapes:
    def test_per_module_covers_eight_cells(self):
        cells = sweeps.cells_for_axis("per-module", DESK, "vs-like", 0)
        assert len(cells) == 8
        ids = {c.cell_id for c in cells}
        assert ids == {
            f"{site}-{tag}"
            for site in ("ffn_start", "mhsa", "conv", "ffn_end")
            for tag in ("nc", "c+nc")
        }

    def test_adapter_grid_covers_twelve_cells(self):
        cells = sweeps.cells_for_axis("adapter-grid", DESK, "vs-like", 0)
        assert len(cells) == 12
        modes = {c.plan.adapters[0].mode for c in cells}
        dims = {c.plan.adapters[0].bottleneck_dim for c in cells}
        assert modes == {"sequential", "parallel"}
        assert dims == set(rt.adapter_grid_dims(DESK))

    def test_per_block_matches_block_count(self):
        cells = sweeps.cells_for_axis("per-block", DESK, "vs-like", 0)
        assert len(cells) == DESK.encoder.causal_blocks + DESK.encoder.noncausal_blocks

    def test_recipe_axis_three_rows(self):
        cells = sweeps.cells_for_axis("recipe", DESK, "vs-like", 0)
        assert [c.cell_id for c in cells] == ["pa-c+pa-nc", "pa-c+ffn-nc", "ffn-c+ffn-nc"]

    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            sweeps.cells_for_axis("sideways", DESK, "vs-like", 0)

    def test_per_cell_seeds_differ(self):
        cells = sweeps.cells_for_axis("adapter-grid", DESK, "vs-like", 3)
        seeds = [c.plan.init_seed for c in cells]
        assert len(set(seeds)) == len(seeds)


@pytest.fixture(scope="module")
def sweep_env(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweepenv")
    styles = synth.default_styles()
    protos = synth.prototype_bank(7, 32, 16)
    yt = synth.generate_split(styles, protos, "yt-like", "train", 40, global_seed=7)
    vs_train = synth.generate_split(styles, protos, "vs-like", "train", 24, global_seed=7)
    vs_test = synth.generate_split(styles, protos, "vs-like", "test", 10, global_seed=7)
    train_path = synth.save_corpus(vs_train, out / "vs.train.jsonl", 16, 32, 7)
    eval_path = synth.save_corpus(vs_test, out / "vs.test.jsonl", 16, 32, 7)
    cfg = tr.TrainConfig(steps=3, batch_size=4, seed=0)
    backbone = tr.train_backbone(yt, DESK, cfg, mode="single-domain").bundle
    backbone_path = bd.save_bundle(backbone, out / "backbone.mdab")
    return out, backbone_path, train_path, eval_path


class TestRunSweep:
    def test_recipe_sweep_artifacts_and_rerun(self, sweep_env):
        out, backbone_path, train_path, eval_path = sweep_env
        spec = sweeps.SweepSpec(
            axis="recipe",
            domain="vs-like",
            backbone_path=str(backbone_path),
            train_corpus=str(train_path),
            eval_corpus=str(eval_path),
            train=tr.TrainConfig(steps=2, batch_size=4, seed=1),
            out_dir=str(out / "sweep"),
        )
        result = sweeps.run_sweep(spec)
        assert len(result.rows) == 3
        assert all(r["status"] == "ok" for r in result.rows)
        table = json.loads(result.table_json.read_text())
        assert {r["cell_id"] for r in table["rows"]} == {"pa-c+pa-nc", "pa-c+ffn-nc", "ffn-c+ffn-nc"}
        text = result.table_txt.read_text()
        assert "pa-c+ffn-nc" in text and "rate%" in text
        assert result.figure.exists() and result.figure.stat().st_size > 0
        # every cell saved a bundle and a manifest that re-runs bit-identically
        cell = result.rows[1]
        manifest_path = out / "sweep" / "cells" / f"{cell['cell_id']}.manifest.json"
        again = sweeps.rerun_cell(manifest_path)
        assert again["rate"] == cell["rate"]
        assert again["final_nll"] == cell["final_nll"]
        assert (out / "sweep" / "cells" / f"{cell['cell_id']}.mdab").exists()

    def test_failed_cell_marked_not_fatal(self, sweep_env):
        out, backbone_path, train_path, eval_path = sweep_env
        manifest = {
            "kind": "sweep-cell",
            "axis": "recipe",
            "cell_id": "broken",
            "plan": rt.DomainPlan(domain="yt-like").to_json(),  # wrong domain for corpus
            "train": tr.TrainConfig(steps=1).to_json(),
            "backbone_path": str(backbone_path),
            "train_corpus": str(train_path),
            "eval_corpus": str(eval_path),
        }
        row = sweeps._cell_worker((manifest, str(out / "broken.mdab")))
        assert row["status"] == "failed"
        assert "error" in row

    def test_parallel_jobs_match_serial(self, sweep_env):
        out, backbone_path, train_path, eval_path = sweep_env
        base = dict(
            axis="recipe",
            domain="vs-like",
            backbone_path=str(backbone_path),
            train_corpus=str(train_path),
            eval_corpus=str(eval_path),
            train=tr.TrainConfig(steps=1, batch_size=2, seed=2),
        )
        serial = sweeps.run_sweep(sweeps.SweepSpec(out_dir=str(out / "s1"), jobs=1, **base))
        parallel = sweeps.run_sweep(sweeps.SweepSpec(out_dir=str(out / "s2"), jobs=2, **base))
        for a, b in zip(serial.rows, parallel.rows):
            assert a == b
