"""Command-line entry point: ``moe-rebasin <command> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks
from .harness import (DatasetSpec, FrozenBackbone, TrainConfig, gen_blobs, load_csv_dataset,
                      make_loss_fn, require_same_backbone, train_sgd)
from .lmc import barrier_report, brute_force_best_permutation, ratio_report
from .matching import align_moe
from .model import MoEConfig
from .persist import (Checkpoint, RunManifest, export_report, load_checkpoint, report_from_dict,
                      save_checkpoint)


def _config_from_args(args) -> MoEConfig:
    if args.variant == "dense":
        return MoEConfig.dense(args.experts, args.dim, args.hidden)
    if args.variant == "sparse":
        return MoEConfig.sparse(args.experts, args.dim, args.hidden, args.topk)
    return MoEConfig.shared(args.shared, args.experts - args.shared, args.dim, args.hidden, args.topk)


def _dataset_from_provenance(prov: dict):
    if prov.get("csv"):
        return load_csv_dataset(prov["csv"], seed=int(prov.get("split_seed", 0)))
    return gen_blobs(DatasetSpec(**prov["dataset"]))


def _pair(args):
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    require_same_backbone(a.backbone_seed, b.backbone_seed)
    if a.config != b.config:
        raise ValueError(f"checkpoints have different configs: {a.config} vs {b.config}")
    if a.provenance.get("dataset") != b.provenance.get("dataset") or a.provenance.get("csv") != b.provenance.get("csv"):
        raise ValueError("checkpoints were trained on different datasets")
    data = _dataset_from_provenance(a.provenance)
    bb = FrozenBackbone.generate(a.backbone_seed, data.input_dim, a.config.d, data.classes)
    return a, b, make_loss_fn(bb, data.X_test, data.y_test)


def _write_manifest(args, method, outputs):
    if not args.out:
        return
    RunManifest(f"{args.command}:{Path(args.a).stem}-{Path(args.b).stem}",
                [str(args.a), str(args.b)], getattr(args, "grid", 25), method,
                [str(o) for o in outputs]).save(str(args.out) + ".manifest.json")


def cmd_train(args) -> int:
    config = _config_from_args(args)
    if args.csv:
        data = load_csv_dataset(args.csv, seed=args.dataset_seed)
        dataset_prov = None
    else:
        spec = DatasetSpec(args.classes, args.samples, args.input_dim, args.noise, args.dataset_seed)
        data = gen_blobs(spec)
        dataset_prov = spec.to_dict()
    bb = FrozenBackbone.generate(args.backbone_seed, data.input_dim, config.d, data.classes)
    tc = TrainConfig(args.steps, args.batch_size, args.lr, args.seed, args.data_seed, args.init_scale)
    result = train_sgd(data, bb, tc, config)
    prov = {"train": tc.to_dict(), "dataset": dataset_prov,
            "csv": str(args.csv) if args.csv else None, "split_seed": args.dataset_seed,
            "initial_loss": result.initial_loss, "final_loss": result.final_loss}
    out = args.out or Path(f"ckpt-{args.variant}-seed{args.seed}.json")
    save_checkpoint(out, Checkpoint(result.params, args.backbone_seed, prov))
    print(f"trained {args.variant} n={config.n}: loss {result.initial_loss:.6f} -> "
          f"{result.final_loss:.6f}; wrote {out}")
    return 0


def cmd_align(args) -> int:
    a, b = load_checkpoint(args.a), load_checkpoint(args.b)
    require_same_backbone(a.backbone_seed, b.backbone_seed)
    result = align_moe(a.params, b.params, args.method)
    outputs = []
    if args.out:
        Path(args.out).write_text(json.dumps(result.to_dict(), indent=1), encoding="utf-8")
        outputs.append(args.out)
    if args.aligned_out:
        save_checkpoint(args.aligned_out, Checkpoint(result.apply(b.params), b.backbone_seed,
                                                     {**b.provenance, "aligned_to": str(args.a)}))
        outputs.append(args.aligned_out)
    _write_manifest(args, result.method, outputs)
    cost = result.cost[np.arange(len(result.tau)), result.tau].sum()
    print(f"method={result.method} tau={result.tau.tolist()} matched cost={cost:.6g}")
    return 0


def cmd_interp(args) -> int:
    a, b, loss_fn = _pair(args)
    naive = barrier_report(a.params, b.params, loss_fn, args.grid, label="naive")
    report = naive
    if args.method:
        aligned_b = align_moe(a.params, b.params, args.method).apply(b.params)
        report = barrier_report(a.params, aligned_b, loss_fn, args.grid, label=f"aligned-{args.method}")
    if args.out:
        export_report(args.out, report, args.format)
        _write_manifest(args, args.method, [args.out])
    line = (f"{report.label}: loss_barrier={report.loss_barrier:.6g} loss_auc={report.loss_auc:.6g} "
            f"acc_barrier={report.acc_barrier:.6g} acc_auc={report.acc_auc:.6g}")
    if args.method:
        ratios = ratio_report(report, naive)
        line += " ratios(x100): " + " ".join(
            f"{k}={'n/a' if v is None else f'{v:.4g}'}" for k, v in ratios.items())
    print(line)
    return 0


def cmd_rank(args) -> int:
    a, b, loss_fn = _pair(args)
    report = brute_force_best_permutation(a.params, b.params, loss_fn, method=args.method, grid=args.grid)
    if args.out:
        export_report(args.out, report, args.format)
        _write_manifest(args, args.method, [args.out])
    print(f"method={args.method} tau={list(report.chosen_tau)} rank={report.rank}/"
          f"{len(report.permutations)} L_hat={report.L_hat:.6g} L_method={report.L_method:.6g} "
          f"L_top1={report.L_top1:.6g} L_naive={report.L_naive:.6g}")
    return 0


def cmd_oracle(args) -> int:
    result = checks.lap_oracle(args.trials, args.max_n, args.seed)
    print(result.line())
    return 0 if result.passed else 1


def cmd_invariance(args) -> int:
    results = checks.run_invariance_checks(args.trials, args.seed, args.epsilon)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_export(args) -> int:
    report = report_from_dict(json.loads(Path(args.report).read_text(encoding="utf-8")))
    out = args.out or Path(args.report).with_suffix("." + args.format)
    export_report(out, report, args.format)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moe-rebasin",
                                description="MoE weight matching and linear mode connectivity")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one MoE checkpoint on synthetic blobs or a CSV")
    t.add_argument("--variant", choices=["dense", "sparse", "shared"], default="dense")
    t.add_argument("--experts", type=int, default=4, help="total experts (shared + routed)")
    t.add_argument("--topk", type=int, default=2)
    t.add_argument("--shared", type=int, default=1, help="shared experts (shared variant)")
    t.add_argument("--dim", type=int, default=8)
    t.add_argument("--hidden", type=int, default=16)
    t.add_argument("--seed", type=int, default=0, help="initialisation seed")
    t.add_argument("--data-seed", type=int, default=0, help="minibatch order seed")
    t.add_argument("--backbone-seed", type=int, default=0)
    t.add_argument("--dataset-seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--init-scale", type=float, default=1.0)
    t.add_argument("--classes", type=int, default=6)
    t.add_argument("--samples", type=int, default=100, help="samples per class")
    t.add_argument("--input-dim", type=int, default=16)
    t.add_argument("--noise", type=float, default=1.0)
    t.add_argument("--csv", type=Path, help="train on f0..f{D-1},label CSV instead of blobs")
    t.add_argument("--out", type=Path)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in [("align", cmd_align, "compute the expert and neuron alignment"),
                                 ("interp", cmd_interp, "interpolation curve and barrier metrics"),
                                 ("rank", cmd_rank, "rank the chosen expert order among all n!")]:
        s = sub.add_parser(name, help=helptext)
        s.add_argument("a", type=Path)
        s.add_argument("b", type=Path)
        if name == "interp":
            s.add_argument("--method", choices=["gate", "gram"], default=None,
                           help="align B to A first (default: naive interpolation)")
        else:
            s.add_argument("--method", choices=["gate", "gram"], default="gram")
        s.add_argument("--out", type=Path)
        if name == "align":
            s.add_argument("--aligned-out", type=Path, help="also write the aligned B checkpoint")
        else:
            s.add_argument("--grid", type=int, default=25)
            s.add_argument("--format", choices=["json", "csv"], default="json")
        s.set_defaults(func=func)

    o = sub.add_parser("oracle", help="Hungarian solver vs brute-force enumeration")
    o.add_argument("--trials", type=int, default=200)
    o.add_argument("--max-n", type=int, default=7)
    o.add_argument("--seed", type=int, default=0)
    o.set_defaults(func=cmd_oracle)

    iv = sub.add_parser("invariance-check", help="randomised symmetry and invariance checks")
    iv.add_argument("--trials", type=int, default=500)
    iv.add_argument("--seed", type=int, default=0)
    iv.add_argument("--epsilon", type=float, default=1e-6, help="omega margin for sparse draws")
    iv.set_defaults(func=cmd_invariance)

    e = sub.add_parser("export", help="convert a JSON report to CSV or JSON")
    e.add_argument("report", type=Path)
    e.add_argument("--format", choices=["json", "csv"], default="csv")
    e.add_argument("--out", type=Path)
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line error for any failure
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
