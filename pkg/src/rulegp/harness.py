"""Experiment grid runner and reports.

A grid cell is ``(variant, fraction, source -> target, seed)``. Rule-stage
priors depend only on the variant, the seed and the rule pool, so they are
trained once and shared by every fraction and source that uses them. A model
trained on a source region is evaluated on every target paired with it.
"""
from __future__ import annotations

import copy
import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from . import anchors as anc
from . import rules as rl
from .gp_head import InferenceConfig
from .metrics import REPORT_COLUMNS, evaluate_predictions, format_value
from .model import ModelConfig, predict, standardizer
from .scene import PROFILES, Dataset, generate_dataset, split_dataset, subsample
from .training import RegularizationConfig, RuleData, TaskSpec, TwoStageConfig, init_model, run_ground_truth_stage, run_rule_stage, uninformed_prior

WORKERS_ENV = "RULEGP_WORKERS"
CELL_COLUMNS = ("variant", "fraction", "source", "target", "seed")

# Tuned on the synthetic benchmark; see the comments in configs/grid.yaml.
DEFAULT_CONFIG = {
    "data": {
        "regions": ["grid-right", "curve-left"],
        "n_train": 4000,
        "n_val": 1000,
        "n_test": 1000,
        "seed": 2024,
        "epsilon": 10.0,
        "rules_file": None,
        "rule_pool": "all",
    },
    "model": {"hidden": [64, 64], "d_h": 32, "m": 128, "rff_sigma": 3.0, "rank": 2, "w_het": 0.2},
    "reg": {"lam_gp": 0.001, "gamma_gp": 0.5, "lam_nn": 0.01},
    "rule_task": {"epochs_max": 8, "patience": 3, "learning_rate": 0.02, "batch_size": 128},
    "gt_task": {
        "patience": 15,
        "batch_size": 64,
        "by_fraction": {
            1.0: {"learning_rate": 0.02, "epochs_max": 12, "batch_size": 128},
            0.5: {"learning_rate": 0.01, "epochs_max": 20, "batch_size": 128},
            0.1: {"learning_rate": 0.005, "epochs_max": 80},
        },
    },
    "inference": {"S": 16, "tau": 20.0, "w_sngp": 0.1, "w_het": 0.2},
    "grid": {
        "fractions": [1.0, 0.5, 0.1],
        "pairs": [
            ["grid-right", "grid-right"],
            ["curve-left", "curve-left"],
            ["grid-right", "curve-left"],
            ["curve-left", "grid-right"],
        ],
        "variants": ["uninformed", "homoscedastic-rules", "chained", "unified", "only-stop", "only-drivable"],
        "seeds": [0, 1, 2, 3, 4],
    },
}

# variant -> (training mode, rule set name, heteroscedastic noise on)
VARIANTS = {
    "uninformed": ("uninformed", None, True),
    "homoscedastic-rules": ("unified", "all", False),
    "chained": ("chained", "all", True),
    "unified": ("unified", "all", True),
    "only-stop": ("unified", "stop", True),
    "only-drivable": ("unified", "drivability", True),
}


class GridFailure(RuntimeError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        cfg = _merge(cfg, yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {})
    cfg = _merge(cfg, overrides or {})
    fr = cfg["gt_task"].get("by_fraction", {})
    cfg["gt_task"]["by_fraction"] = {float(k): v for k, v in fr.items()}
    return cfg


def _rules(cfg) -> list:
    path = cfg["data"].get("rules_file")
    return rl.load_rules(path) if path else rl.default_rules()


def rule_names(cfg, set_name: str | None) -> tuple:
    """Rule names of a named set, in file order."""
    if set_name is None:
        return ()
    names = [r.name for r in _rules(cfg)]
    if set_name == "all":
        return tuple(names)
    wanted = set(cfg.get("rule_sets", {}).get(set_name, rl.RULE_SETS[set_name]))
    return tuple(n for n in names if n in wanted)


def gt_task_for(cfg, fraction: float) -> TaskSpec:
    base = {k: v for k, v in cfg["gt_task"].items() if k != "by_fraction"}
    fr = cfg["gt_task"].get("by_fraction", {})
    key = min(fr, key=lambda f: abs(f - fraction)) if fr else None
    spec = _merge(base, fr[key] if key is not None else {})
    return TaskSpec("ground_truth", "ground_truth", **spec)


def two_stage_config(cfg, variant: str, fraction: float = 1.0) -> TwoStageConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    mode, set_name, het = VARIANTS[variant]
    mc = dict(cfg["model"])
    if not het:
        mc["w_het"] = 0.0
    return TwoStageConfig(
        mode=mode,
        rules=rule_names(cfg, set_name),
        reg=RegularizationConfig(**cfg["reg"]),
        rule_task=TaskSpec("rules", "rules", **cfg["rule_task"]),
        gt_task=gt_task_for(cfg, fraction),
        model=ModelConfig(**mc),
    )


def inference_config(cfg, variant: str) -> InferenceConfig:
    ic = dict(cfg["inference"])
    if not VARIANTS[variant][2]:
        ic["w_het"] = 0.0
    return InferenceConfig(**ic)


# ---------------------------------------------------------------------------
# data preparation


@dataclass(eq=False)
class RegionData:
    train: Dataset
    val: Dataset
    test: Dataset
    y_train: np.ndarray
    y_val: np.ndarray
    y_test: np.ndarray


@dataclass(eq=False)
class PreparedData:
    regions: dict  # name -> RegionData
    anchors: anc.AnchorSet
    rule_data: dict  # pool key -> RuleData


def _region_seed(base: int, name: str) -> int:
    return int(np.random.SeedSequence([int(base), *name.encode()]).generate_state(1)[0])


def prepare_data(cfg) -> PreparedData:
    """Generate, split, anchor and label the benchmark described by ``cfg``."""
    dc = cfg["data"]
    total = dc["n_train"] + dc["n_val"] + dc["n_test"]
    fr = (dc["n_train"] / total, dc["n_val"] / total, dc["n_test"] / total)
    splits = {}
    for name in dc["regions"]:
        ds = generate_dataset(PROFILES[name], total, _region_seed(dc["seed"], name))
        splits[name] = split_dataset(ds, fr, dc["seed"])
    pool = np.concatenate([splits[n][0].futures() for n in dc["regions"]])
    anchor_set = anc.build_cover_set(pool, dc["epsilon"])
    regions = {
        n: RegionData(tr, va, te, anc.assign_labels(tr.futures(), anchor_set), anc.assign_labels(va.futures(), anchor_set), anc.assign_labels(te.futures(), anchor_set))
        for n, (tr, va, te) in splits.items()
    }
    rules = _rules(cfg)
    per_region = {}
    needed = dc["regions"]
    for n in needed:
        tr_m = {m.rule_id: m.entries for m in rl.label_dataset(rules, regions[n].train, anchor_set, workers=_workers())}
        va_m = {m.rule_id: m.entries for m in rl.label_dataset(rules, regions[n].val, anchor_set, workers=_workers())}
        per_region[n] = (tr_m, va_m)
    rule_data = {}
    pools = {"all": list(needed)} if dc["rule_pool"] == "all" else {n: [n] for n in needed}
    for key, members in pools.items():
        rule_data[key] = RuleData(
            np.concatenate([regions[n].train.features() for n in members]),
            np.concatenate([regions[n].val.features() for n in members]),
            {
                r.name: (
                    np.concatenate([per_region[n][0][r.name] for n in members]),
                    np.concatenate([per_region[n][1][r.name] for n in members]),
                )
                for r in rules
            },
        )
    return PreparedData(regions, anchor_set, rule_data)


def pool_key(cfg, source: str) -> str:
    return "all" if cfg["data"]["rule_pool"] == "all" else source


# ---------------------------------------------------------------------------
# jobs

_STATE: dict = {}


def _stage1_job(args):
    cfg, variant, seed, key = args
    data: PreparedData = _STATE["data"]
    try:
        tsc = two_stage_config(cfg, variant)
        rd = data.rule_data[key]
        model, prior, _ = run_rule_stage(tsc, rd, rd.X.shape[1], data.anchors.K, seed)
        return (variant, seed, key), (model, prior), None
    except Exception as exc:  # reported in the failure manifest
        return (variant, seed, key), None, f"{type(exc).__name__}: {exc}"


def _stage2_job(args):
    cfg, variant, seed, source, fraction, targets, stage1 = args
    data: PreparedData = _STATE["data"]
    rows = []
    try:
        tsc = two_stage_config(cfg, variant, fraction)
        reg = data.regions[source]
        if fraction < 1.0:
            sub = subsample(reg.train, fraction, seed)
            pos = {id(s): i for i, s in enumerate(reg.train.samples)}
            idx = [pos[id(s)] for s in sub.samples]
            X, y = sub.features(), reg.y_train[idx]
        else:
            X, y = reg.train.features(), reg.y_train
        if tsc.mode == "uninformed":
            model = init_model(X.shape[1], data.anchors.K, tsc.model, seed, *standardizer(X))
            prior = uninformed_prior(model)
            stream = 0
        else:
            if stage1 is None:
                raise GridFailure("rule stage failed")
            model, prior = stage1
            stream = len(prior.provenance)
        model, _, _ = run_ground_truth_stage(tsc, model, prior, X, y, reg.val.features(), reg.y_val, seed, stream)
        ic = inference_config(cfg, variant)
        for target in targets:
            t = data.regions[target]
            P = predict(model, t.test.features(), ic, seed)
            m = evaluate_predictions(P, t.test.futures(), t.y_test, data.anchors)
            rows.append({"variant": variant, "fraction": fraction, "source": source, "target": target, "seed": seed, **m})
        return rows, []
    except Exception as exc:
        err = f"{type(exc).__name__}: {exc}"
        return [], [{"variant": variant, "fraction": fraction, "source": source, "target": t, "seed": seed, "error": err} for t in targets]


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, jobs))


def run_grid(cfg, out_dir, data: PreparedData | None = None, workers: int | None = None) -> dict:
    """Run every grid cell, write raw rows, summary and report; return a status dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = _workers() if workers is None else workers
    t0 = time.perf_counter()
    if data is None:
        data = prepare_data(cfg)
    t_prep = time.perf_counter() - t0
    _STATE["data"] = data
    g = cfg["grid"]
    sources = []
    for s, _ in g["pairs"]:
        if s not in sources:
            sources.append(s)
    informed = [v for v in g["variants"] if VARIANTS[v][0] != "uninformed"]
    s1_jobs = []
    for v in informed:
        for seed in g["seeds"]:
            for key in dict.fromkeys(pool_key(cfg, s) for s in sources):
                s1_jobs.append((cfg, v, seed, key))
    stage1, s1_errors = {}, {}
    for key, result, err in _map(_stage1_job, s1_jobs, workers):
        if err is None:
            stage1[key] = result
        else:
            s1_errors[key] = err
    s2_jobs = []
    for v in g["variants"]:
        for fraction in g["fractions"]:
            for source in sources:
                targets = [t for s, t in g["pairs"] if s == source]
                for seed in g["seeds"]:
                    st = stage1.get((v, seed, pool_key(cfg, source)))
                    s2_jobs.append((cfg, v, seed, source, float(fraction), targets, st))
    rows, failures = [], []
    for r, f in _map(_stage2_job, s2_jobs, workers):
        rows += r
        failures += f
    for f in failures:
        key = (f["variant"], f["seed"], pool_key(cfg, f["source"]))
        if key in s1_errors:
            f["error"] = f"rule stage: {s1_errors[key]}"
    order = {v: i for i, v in enumerate(g["variants"])}
    fr_order = {float(f): i for i, f in enumerate(g["fractions"])}
    pair_order = {tuple(p): i for i, p in enumerate(g["pairs"])}

    def sort_key(r):
        return (order[r["variant"]], fr_order[r["fraction"]], pair_order[(r["source"], r["target"])], r["seed"])

    rows.sort(key=sort_key)
    failures.sort(key=sort_key)
    write_raw(rows, out / "raw.csv")
    (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "config.yaml").write_text(yaml.safe_dump(_plain(cfg), sort_keys=True), encoding="utf-8")
    report(out)
    elapsed = time.perf_counter() - t0
    (out / "timing.json").write_text(json.dumps({"prepare_s": t_prep, "total_s": elapsed, "workers": workers}, indent=2) + "\n")
    return {"rows": rows, "failures": failures, "seconds": elapsed, "prepare_seconds": t_prep}


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# reports

RAW_COLUMNS = CELL_COLUMNS + REPORT_COLUMNS


def write_raw(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_COLUMNS)
        for r in rows:
            w.writerow([format_value(r[c]) for c in RAW_COLUMNS])


def read_raw(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = {"variant": r["variant"], "fraction": float(r["fraction"]), "source": r["source"], "target": r["target"], "seed": int(r["seed"])}
        d.update({c: float(r[c]) for c in REPORT_COLUMNS})
        out.append(d)
    return out


def summarize(rows) -> list[dict]:
    """Mean and sample standard deviation (ddof=1; 0 for one seed) per cell."""
    cells: dict = {}
    for r in rows:
        cells.setdefault((r["variant"], r["fraction"], r["source"], r["target"]), []).append(r)
    out = []
    for (v, f, s, t), rs in cells.items():
        row = {"variant": v, "fraction": f, "source": s, "target": t, "n": len(rs)}
        for c in REPORT_COLUMNS:
            vals = np.array([r[c] for r in rs])
            row[f"{c}_mean"] = float(vals.mean())
            row[f"{c}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(row)
    return out


SUMMARY_COLUMNS = ("variant", "fraction", "source", "target", "n") + tuple(f"{c}_{s}" for c in REPORT_COLUMNS for s in ("mean", "std"))


def _table(rows, title, note, label_cols) -> list[str]:
    if not rows:
        return []
    head = list(label_cols) + list(REPORT_COLUMNS)
    lines = [f"## {title}", "", note, "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in rows:
        cells = [str(r[c]) if c != "fraction" else f"{r[c]:g}" for c in label_cols]
        cells += [f"{r[c + '_mean']:.3f} ± {r[c + '_std']:.3f}" for c in REPORT_COLUMNS]
        lines.append("| " + " | ".join(cells) + " |")
    return lines + [""]


def render_markdown(summary, failures=()) -> str:
    in_region = [r for r in summary if r["source"] == r["target"]]
    top = max((r["fraction"] for r in summary), default=1.0)
    lines = ["# Experiment report", "", "Mean ± sample standard deviation over seeds. NLL uses a probability floor of 1e-12; ECE uses 10 equal-width bins.", ""]
    lines += _table([r for r in in_region if r["fraction"] == top], "Full training data", f"In-region evaluation at data fraction {top:g}.", ("variant", "source"))
    lines += _table(
        sorted([r for r in in_region if r["fraction"] < top], key=lambda r: (-r["fraction"],)),
        "Reduced training data",
        "In-region evaluation with a seeded subsample of the training split.",
        ("variant", "fraction", "source"),
    )
    lines += _table(
        [r for r in summary if r["fraction"] == top],
        "Geographic generalization",
        "Trained on the source region, tested on the target region.",
        ("variant", "source", "target"),
    )
    ablation = ("unified", "only-stop", "only-drivable", "uninformed")
    lines += _table(
        sorted([r for r in in_region if r["fraction"] == top and r["variant"] in ablation], key=lambda r: ablation.index(r["variant"])),
        "Rule ablation",
        "All rules, stop-related rules only, drivability only, and no rules.",
        ("variant", "source"),
    )
    if failures:
        lines += ["## Failed cells", ""]
        lines += [f"- {f['variant']} / {f['fraction']:g} / {f['source']} -> {f['target']} / seed {f['seed']}: {f['error']}" for f in failures]
        lines.append("")
    return "\n".join(lines)


def report(out_dir) -> list[dict]:
    """Rebuild ``summary.csv`` and ``report.md`` from ``raw.csv``."""
    out = Path(out_dir)
    rows = read_raw(out / "raw.csv")
    summary = summarize(rows)
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in summary:
            w.writerow([format_value(r[c]) for c in SUMMARY_COLUMNS])
    fpath = out / "failures.json"
    failures = json.loads(fpath.read_text()) if fpath.exists() else []
    (out / "report.md").write_text(render_markdown(summary, failures), encoding="utf-8")
    return summary


# ---------------------------------------------------------------------------
# temperature sweep

SWEEP_COLUMNS = ("tau", "minADE_1", "minADE_5", "minFDE_1", "NLL", "ECE")


def temperature_sweep(model, X, futures, labels, anchor_set, taus, config: InferenceConfig = InferenceConfig(), seed: int = 0) -> list[dict]:
    """Evaluate the predictive at each temperature with one fixed random stream."""
    rows = []
    for tau in taus:
        P = predict(model, X, replace(config, tau=float(tau)), seed)
        m = evaluate_predictions(P, futures, labels, anchor_set)
        rows.append({"tau": float(tau), **{c: m[c] for c in SWEEP_COLUMNS[1:]}})
    return rows
