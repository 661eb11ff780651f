"""Command-line interface.

Subcommands map one-to-one onto library operations: gen-data (corpora),
train-backbone / train-domain (training), eval (scoring), sweep (cell grids),
params (parameter accounting), ckpt (bundle inspect/diff/compose). Every
artifact-producing run writes a manifest with the resolved configuration and
seeds next to its outputs; loss curves and sweep tables are rendered to PNG
alongside their CSV/JSON forms. Errors are emitted to stderr as single-line
JSON; exit code 2 flags usage errors and 1 runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import bundles as bd
from . import conformer as cf
from . import figures
from . import routing as rt
from . import sweeps
from . import synth
from . import training as tr
from . import transducer as td
from .errors import ModAsrError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def source_revision() -> str:
    """Short content hash of the installed package sources."""
    digest = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")) + sorted(root.rglob("*.json")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()[:10]


def _write_manifest(out: Path, command: str, payload: dict) -> Path:
    manifest = {
        "command": command,
        "version": f"{__version__}+{source_revision()}",
        **payload,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model_config(args) -> rt.ModelConfig:
    return rt.load_config(args.config)


def _train_config(args) -> tr.TrainConfig:
    cfg = tr.TrainConfig()
    for name in ("steps", "batch_size", "peak_lr", "warmup_steps", "clip_norm", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            cfg = replace(cfg, **{name: value})
    return cfg


def _write_curve(out: Path, curve, stem: str = "curve") -> None:
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "nll"])
        writer.writerows(curve)
    figures.save_loss_curve(curve, out / f"{stem}.png")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    domains = args.domains.split(",")
    styles = synth.default_styles(args.feature_dim, args.vocab, args.seed)
    protos = synth.prototype_bank(args.seed, args.vocab, args.feature_dim)
    outputs = []
    all_utts = []
    for domain in domains:
        if domain not in styles:
            raise ModAsrError(f"unknown domain preset '{domain}'")
        for split, count in (("train", args.train_count), ("test", args.test_count)):
            utts = synth.generate_split(styles, protos, domain, split, count, args.seed)
            path = synth.save_corpus(utts, out / f"{domain}.{split}.jsonl", args.feature_dim, args.vocab, args.seed)
            outputs.append(path.name)
            all_utts += utts
    (out / "stats.json").write_text(json.dumps(synth.corpus_stats(all_utts), indent=2))
    _write_manifest(out, "gen-data", {
        "domains": domains,
        "train_count": args.train_count,
        "test_count": args.test_count,
        "seeds": {"global": args.seed},
        "feature_dim": args.feature_dim,
        "vocab": args.vocab,
        "outputs": outputs + ["stats.json"],
    })
    return 0


def cmd_train_backbone(args) -> int:
    out = _out_dir(args)
    config = _load_model_config(args)
    if args.mode == "multidomain-onehot":
        config = rt.with_onehot(config, 16)
    corpus = []
    for path in args.corpus.split(","):
        utts, _ = synth.load_corpus(path)
        corpus += utts
    cfg = _train_config(args)
    result = tr.train_backbone(corpus, config, cfg, mode=args.mode)
    bundle_path = bd.save_bundle(result.bundle, out / "backbone.mdab")
    _write_curve(out, result.curve)
    _write_manifest(out, "train-backbone", {
        "config": config.to_json(),
        "config_fingerprint": config.fingerprint(),
        "mode": args.mode,
        "corpus": args.corpus.split(","),
        "train": cfg.to_json(),
        "seeds": {"train": cfg.seed},
        "outputs": [bundle_path.name, "curve.csv", "curve.png"],
        "final_nll": result.curve[-1][1],
    })
    print(json.dumps({"bundle": str(bundle_path), "final_nll": result.curve[-1][1]}))
    return 0


def _resolve_plan(args, config: rt.ModelConfig) -> rt.DomainPlan:
    if args.plan:
        return rt.DomainPlan.from_json(json.loads(Path(args.plan).read_text()))
    if not args.recipe:
        raise ModAsrError("either --plan FILE or --recipe NAME is required")
    if not args.domain:
        raise ModAsrError("--recipe needs --domain")
    stacks = ("noncausal",) if args.scope == "nc" else ("causal", "noncausal")
    b = args.bottleneck or rt.adapter_grid_dims(config)[2]
    if args.recipe == "final":
        return rt.plan_final_recipe(args.domain, config, b, args.plan_seed)
    if args.recipe == "parallel-adapters":
        return rt.plan_adapters(args.domain, config, "parallel", b, stacks, args.plan_seed)
    if args.recipe == "sequential-adapters":
        return rt.plan_adapters(args.domain, config, "sequential", b, stacks, args.plan_seed)
    if args.recipe == "ffn-end":
        return rt.plan_module_override(args.domain, config, "ffn_end", stacks, args.plan_seed)
    raise ModAsrError(f"unknown recipe '{args.recipe}'")


def cmd_train_domain(args) -> int:
    out = _out_dir(args)
    backbone = bd.load_bundle(args.backbone)
    config = backbone.config()
    plan = _resolve_plan(args, config)
    corpus, _ = synth.load_corpus(args.corpus)
    corpus = [u for u in corpus if u.domain == plan.domain]
    cfg = _train_config(args)
    result = tr.train_domain(backbone, plan, corpus, cfg)
    bundle_path = bd.save_bundle(result.bundle, out / f"{plan.domain}.mdab")
    _write_curve(out, result.curve)
    _write_manifest(out, "train-domain", {
        "config": config.to_json(),
        "config_fingerprint": config.fingerprint(),
        "backbone": str(args.backbone),
        "plan": plan.to_json(),
        "corpus": [args.corpus],
        "train": cfg.to_json(),
        "seeds": {"train": cfg.seed, "plan_init": plan.init_seed},
        "trainable_params": rt.count_plan_params(config, plan),
        "outputs": [bundle_path.name, "curve.csv", "curve.png"],
        "final_nll": result.curve[-1][1],
    })
    print(json.dumps({"bundle": str(bundle_path), "trainable_params": rt.count_plan_params(config, plan)}))
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    backbone = bd.load_bundle(args.backbone)
    domain_bundles = []
    if args.domains:
        domain_bundles = [bd.load_bundle(p) for p in args.domains.split(",")]
    model = bd.compose(backbone, *domain_bundles)
    split, _ = synth.load_corpus(args.corpus)
    split = [u for u in split if u.domain == args.domain]
    report = tr.evaluate(model, split, args.domain if args.domain in model.domains else model.backbone_domain, decoder=args.decoder)
    report = replace(report, domain=args.domain)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2))
    _write_manifest(out, "eval", {
        "backbone": str(args.backbone),
        "domains": args.domains.split(",") if args.domains else [],
        "corpus": [args.corpus],
        "eval_domain": args.domain,
        "decoder": args.decoder,
        "seeds": {},
        "outputs": ["report.json"],
    })
    print(json.dumps(report.to_json()))
    return 0


def cmd_sweep(args) -> int:
    out = _out_dir(args)
    cfg = _train_config(args)
    spec = sweeps.SweepSpec(
        axis=args.axis,
        domain=args.domain,
        backbone_path=args.backbone,
        train_corpus=args.corpus,
        eval_corpus=args.eval_corpus,
        train=cfg,
        out_dir=str(out),
        jobs=args.jobs,
    )
    result = sweeps.run_sweep(spec)
    _write_manifest(out, "sweep", {
        "spec": spec.to_json(),
        "seeds": {"train": cfg.seed},
        "outputs": [result.table_json.name, result.table_txt.name, result.figure.name]
        + [f"cells/{p.name}" for p in result.manifests],
    })
    print(result.table_txt.read_text(), end="")
    return 0


def _params_table(config: rt.ModelConfig) -> dict:
    enc = config.encoder
    table: dict = {"modules": {}, "blocks": {}, "encoders": {}, "decoder": {}, "adapters": {}}
    for site in cf.MODULE_SITES:
        table["modules"][site] = {
            "causal": cf.count_params(enc, site, "causal"),
            "noncausal": cf.count_params(enc, site, "noncausal"),
        }
    table["encoders"] = {
        "causal": cf.count_params(enc, "encoder", "causal"),
        "noncausal": cf.count_params(enc, "encoder", "noncausal"),
    }
    table["blocks"] = {
        "causal_first": cf.count_params(enc, "block-0", "causal"),
        "causal_with_mhsa": cf.count_params(enc, f"block-{enc.mhsa_skip_first_n}", "causal"),
        "noncausal": cf.count_params(enc, "block-0", "noncausal"),
    }
    table["decoder"] = {
        "prediction": td.count_decoder_params(config.decoder, enc.joint_projection_dim, "prediction"),
        "joint": td.count_decoder_params(config.decoder, enc.joint_projection_dim, "joint"),
        "total": td.count_decoder_params(config.decoder, enc.joint_projection_dim, "all"),
    }
    for b in rt.adapter_grid_dims(config):
        table["adapters"][f"b{b}"] = {
            "causal": rt.count_adapter_params(config, rt.AdapterSpec("parallel", rt.ffn_adapter_sites(config, ("causal",)), b)),
            "noncausal": rt.count_adapter_params(config, rt.AdapterSpec("parallel", rt.ffn_adapter_sites(config, ("noncausal",)), b)),
        }
    return table


def _format_params_table(table: dict) -> str:
    lines = [f"{'component':26s} {'causal':>14s} {'non-causal':>14s}"]
    lines.append("-" * len(lines[0]))
    for site, row in table["modules"].items():
        lines.append(f"{site:26s} {row['causal']:>14,d} {row['noncausal']:>14,d}")
    lines.append(f"{'encoder total':26s} {table['encoders']['causal']:>14,d} {table['encoders']['noncausal']:>14,d}")
    lines.append(
        f"{'one block':26s} {table['blocks']['causal_with_mhsa']:>14,d} {table['blocks']['noncausal']:>14,d}"
    )
    for name, row in table["adapters"].items():
        lines.append(f"{'ffn adapters ' + name:26s} {row['causal']:>14,d} {row['noncausal']:>14,d}")
    dec = table["decoder"]
    lines.append(f"{'decoder prediction':26s} {dec['prediction']:>14,d}")
    lines.append(f"{'decoder joint':26s} {dec['joint']:>14,d}")
    lines.append(f"{'decoder total':26s} {dec['total']:>14,d}")
    return "\n".join(lines) + "\n"


def cmd_params(args) -> int:
    config = rt.load_config(args.preset if args.config is None else args.config)
    if args.select:
        if args.select in ("prediction", "joint"):
            n = td.count_decoder_params(config.decoder, config.encoder.joint_projection_dim, args.select)
        else:
            n = cf.count_params(config.encoder, args.select, args.stack)
        print(json.dumps({"select": args.select, "stack": args.stack, "count": n}) if args.json else n)
        return 0
    table = _params_table(config)
    if args.json:
        print(json.dumps(table, indent=2))
    else:
        print(_format_params_table(table), end="")
    return 0


def cmd_ckpt(args) -> int:
    if args.ckpt_cmd == "inspect":
        bundle = bd.load_bundle(args.file)
        info = {
            "kind": bundle.kind,
            "domain": bundle.domain,
            "fingerprint": bundle.manifest["fingerprint"],
            "created_step": bundle.manifest["created_step"],
            "entries": len(bundle.arrays),
            "parameters": int(sum(a.size for a in bundle.arrays.values())),
        }
        print(json.dumps(info, indent=2))
        return 0
    if args.ckpt_cmd == "diff":
        report = bd.diff(bd.load_bundle(args.a), bd.load_bundle(args.b))
        print(json.dumps(report.to_json(), indent=2))
        return 0
    if args.ckpt_cmd == "compose":
        out = _out_dir(args)
        backbone = bd.load_bundle(args.backbone)
        domains = [bd.load_bundle(p) for p in args.domains.split(",")] if args.domains else []
        model = bd.compose(backbone, *domains)
        info = {
            "config_fingerprint": model.config.fingerprint(),
            "backbone_domain": model.backbone_domain,
            "domains": {
                name: {"id": st.domain_id, "parameters": int(sum(a.size for a in st.params.values()))}
                for name, st in model.domains.items()
            },
            "sources": {"backbone": str(args.backbone), "domains": args.domains.split(",") if args.domains else []},
        }
        (out / "model.json").write_text(json.dumps(info, indent=2, sort_keys=True))
        _write_manifest(out, "ckpt-compose", {"seeds": {}, "outputs": ["model.json"], **info})
        print(json.dumps(info))
        return 0
    raise ModAsrError(f"unknown ckpt subcommand '{args.ckpt_cmd}'")


def build_parser() -> _Parser:
    parser = _Parser(prog="modasr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate deterministic multi-domain corpora")
    p.add_argument("--out", required=True)
    p.add_argument("--domains", default=",".join(synth.PRESET_ORDER))
    p.add_argument("--train-count", type=int, default=2000)
    p.add_argument("--test-count", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--vocab", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    def add_train_flags(q, steps_default):
        q.add_argument("--steps", type=int, default=steps_default)
        q.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        q.add_argument("--peak-lr", type=float, default=None, dest="peak_lr")
        q.add_argument("--warmup-steps", type=int, default=None, dest="warmup_steps")
        q.add_argument("--clip-norm", type=float, default=None, dest="clip_norm")
        q.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-backbone", help="train a backbone on one domain or a one-hot multidomain mix")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default="desk")
    p.add_argument("--corpus", required=True, help="comma-separated corpus files")
    p.add_argument("--mode", choices=("single-domain", "multidomain-onehot"), default="single-domain")
    add_train_flags(p, 3000)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train-domain", help="train per-domain parameters over a frozen backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--plan", default=None, help="path to a plan JSON")
    p.add_argument("--recipe", choices=("final", "parallel-adapters", "sequential-adapters", "ffn-end"), default=None)
    p.add_argument("--domain", default=None)
    p.add_argument("--scope", choices=("nc", "cnc"), default="cnc")
    p.add_argument("--bottleneck", type=int, default=None)
    p.add_argument("--plan-seed", type=int, default=0, dest="plan_seed")
    add_train_flags(p, 1200)
    p.set_defaults(func=cmd_train_domain)

    p = sub.add_parser("eval", help="greedy-decode a test split and report error rates")
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--domains", default=None, help="comma-separated domain bundles")
    p.add_argument("--corpus", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--decoder", choices=("causal", "noncausal"), default="noncausal")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train+evaluate a grid of per-domain plans")
    p.add_argument("--out", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--axis", choices=sweeps.AXES, required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--eval-corpus", required=True, dest="eval_corpus")
    p.add_argument("--domain", required=True)
    p.add_argument("--jobs", type=int, default=1)
    add_train_flags(p, 1200)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("params", help="exact parameter accounting for a config")
    p.add_argument("--preset", choices=("desk", "paper"), default="paper")
    p.add_argument("--config", default=None)
    p.add_argument("--select", default=None)
    p.add_argument("--stack", choices=("causal", "noncausal"), default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("ckpt", help="inspect, diff or compose parameter bundles")
    ck = p.add_subparsers(dest="ckpt_cmd", required=True)
    q = ck.add_parser("inspect")
    q.add_argument("file")
    q = ck.add_parser("diff")
    q.add_argument("a")
    q.add_argument("b")
    q = ck.add_parser("compose")
    q.add_argument("--backbone", required=True)
    q.add_argument("--domains", default=None)
    q.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ckpt)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except ModAsrError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
