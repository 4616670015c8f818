"""Command line entry point: ``rulegp <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import anchors as anc
from . import harness
from . import rules as rl
from .gp_head import InferenceConfig
from .metrics import rows_to_csv
from .model import ModelConfig, load_checkpoint, save_checkpoint, standardizer
from .scene import PROFILES, generate_dataset, load_dataset, save_dataset
from .training import RegularizationConfig, RuleData, TaskSpec, TwoStageConfig, run_ground_truth_stage, run_rule_stage


def _gen_data(args) -> int:
    if args.profile not in PROFILES:
        raise SystemExit(f"unknown profile {args.profile!r}; choose from {sorted(PROFILES)}")
    save_dataset(generate_dataset(PROFILES[args.profile], args.n, args.seed), args.out)
    return 0


def _build_anchors(args) -> int:
    ds = load_dataset(args.data)
    a = anc.build_cover_set(ds.futures(), args.eps)
    anc.save_anchors(a, args.out)
    print(f"K={a.K} hash={a.hash}")
    return 0


def _label_rules(args) -> int:
    rules = rl.load_rules(args.rules)
    ds = load_dataset(args.data)
    a = anc.load_anchors(args.anchors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for m in rl.label_dataset(rules, ds, a, args.mode, workers=harness._workers()):
        rl.save_matrix(m, out / rl.matrix_filename(m.rule_id))
        print(f"{m.rule_id}: compliance {m.entries.mean():.3f}")
    return 0


def _rule_matrices(rules, ds, anchor_set, labels_dir, tag):
    """Per-rule matrices, loaded from ``labels_dir/<tag>`` when present."""
    if labels_dir:
        d = Path(labels_dir) / tag
        return {r.name: rl.load_matrix(d / rl.matrix_filename(r.name)).entries for r in rules}
    return {m.rule_id: m.entries for m in rl.label_dataset(rules, ds, anchor_set, workers=harness._workers())}


def _train(args) -> int:
    cfg = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
    base = Path(args.config).parent
    paths = {k: (base / v if v and not Path(v).is_absolute() else v) for k, v in cfg["data"].items()}
    train, val = load_dataset(paths["train"]), load_dataset(paths["val"])
    anchor_set = anc.load_anchors(paths["anchors"])
    rules = rl.load_rules(paths["rules"]) if paths.get("rules") else rl.default_rules()
    mode = cfg.get("mode", "unified")
    names = tuple(cfg.get("rules") or [r.name for r in rules])
    tsc = TwoStageConfig(
        mode=mode,
        rules=names if mode != "uninformed" else (),
        reg=RegularizationConfig(**cfg.get("reg", {})),
        rule_task=TaskSpec("rules", "rules", **cfg.get("rule_task", {})),
        gt_task=TaskSpec("ground_truth", "ground_truth", **cfg.get("gt_task", {})),
        model=ModelConfig.from_dict(cfg.get("model", {})),
    )
    X, X_val = train.features(), val.features()
    y, y_val = anc.assign_labels(train.futures(), anchor_set), anc.assign_labels(val.futures(), anchor_set)
    rule_data = None
    if mode != "uninformed":
        used = [r for r in rules if r.name in names]
        tr = _rule_matrices(used, train, anchor_set, paths.get("labels"), "train")
        va = _rule_matrices(used, val, anchor_set, paths.get("labels"), "val")
        rule_data = RuleData(X, X_val, {n: (tr[n], va[n]) for n in names})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.get("seeds", [0]):
        stats = standardizer(X)
        model, prior, logs = run_rule_stage(tsc, rule_data, X.shape[1], anchor_set.K, seed, stats)
        model, _, gt_log = run_ground_truth_stage(tsc, model, prior, X, y, X_val, y_val, seed, len(logs))
        model.meta["data"] = {"eval": str(paths.get("test") or paths["val"]), "anchors": str(paths["anchors"])}
        save_checkpoint(model, out / f"model_seed{seed}.ckpt")
        rows = [{"task": lg.task, "epoch": e, "train_loss": tl, "val_loss": vl} for lg in logs + [gt_log] for e, tl, vl in lg.rows]
        (out / f"train_log_seed{seed}.csv").write_text(rows_to_csv(rows, ("task", "epoch", "train_loss", "val_loss")), encoding="utf-8")
        print(f"seed {seed}: best epoch {gt_log.best_epoch}, val loss {gt_log.rows[gt_log.best_epoch][2]:.4f}")
    return 0


def _run_grid(args) -> int:
    cfg = harness.load_config(args.config)
    result = harness.run_grid(cfg, args.out)
    n_fail = len(result["failures"])
    print(f"{len(result['rows'])} rows, {n_fail} failed cells, {result['seconds']:.1f} s -> {args.out}")
    return 1 if n_fail else 0


def parse_taus(text: str) -> list[float]:
    """Comma list; ``a,b,...,z`` expands the arithmetic progression a, b, ... up to z."""
    parts = [t.strip() for t in text.split(",") if t.strip()]
    if "..." in parts:
        i = parts.index("...")
        if i < 2 or i != len(parts) - 2:
            raise ValueError(f"cannot expand {text!r}; use a,b,...,z")
        a, b, z = float(parts[i - 2]), float(parts[i - 1]), float(parts[i + 1])
        step = b - a
        if step <= 0:
            raise ValueError("progression must increase")
        n = int(round((z - a) / step))
        return [float(p) for p in parts[: i - 2]] + [a + k * step for k in range(n + 1)]
    return [float(p) for p in parts]


def _sweep_temp(args) -> int:
    model = load_checkpoint(args.model)
    data_meta = model.meta.get("data", {})
    data_path = args.data or data_meta.get("eval")
    anchor_path = args.anchors or data_meta.get("anchors")
    if not data_path or not anchor_path:
        raise SystemExit("checkpoint records no evaluation data; pass --data and --anchors")
    ds = load_dataset(data_path)
    a = anc.load_anchors(anchor_path)
    if a.K != model.K:
        raise SystemExit(f"anchor set has K={a.K}, model has K={model.K}")
    taus = parse_taus(args.taus)
    config = InferenceConfig(S=args.samples, tau=1.0, w_sngp=args.w_sngp, w_het=args.w_het)
    rows = harness.temperature_sweep(model, ds.features(), ds.futures(), anc.assign_labels(ds.futures(), a), a, taus, config, args.seed)
    text = rows_to_csv(rows, harness.SWEEP_COLUMNS)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def _report(args) -> int:
    harness.report(args.dir)
    print((Path(args.dir) / "report.md").read_text(encoding="utf-8"))
    failures = Path(args.dir) / "failures.json"
    return 1 if failures.exists() and json.loads(failures.read_text()) else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rulegp", description="Rule-informed GP trajectory classifier on a synthetic driving benchmark.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--profile", required=True, choices=sorted(PROFILES))
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_gen_data)

    s = sub.add_parser("build-anchors", help="greedy epsilon-cover anchor set")
    s.add_argument("--data", required=True)
    s.add_argument("--eps", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_build_anchors)

    s = sub.add_parser("label-rules", help="rule-compliance matrices")
    s.add_argument("--rules", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--anchors", required=True)
    s.add_argument("--mode", choices=("per-rule", "unified"), default="per-rule")
    s.add_argument("--out", required=True)
    s.set_defaults(func=_label_rules)

    s = sub.add_parser("train", help="two-stage training from a YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_train)

    s = sub.add_parser("run-grid", help="run the experiment grid")
    s.add_argument("--config", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_run_grid)

    s = sub.add_parser("sweep-temp", help="evaluate a checkpoint over softmax temperatures")
    s.add_argument("--model", required=True)
    s.add_argument("--taus", default="5,10,15,20,25,30,35,40,45")
    s.add_argument("--data", default=None)
    s.add_argument("--anchors", default=None)
    s.add_argument("--samples", type=int, default=16)
    s.add_argument("--w-sngp", type=float, default=0.1)
    s.add_argument("--w-het", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=_sweep_temp)

    s = sub.add_parser("report", help="rebuild summary and markdown from raw.csv")
    s.add_argument("--dir", required=True)
    s.set_defaults(func=_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
