"""Command-line interface: ``train``, ``eval``, ``report`` and ``theory``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 some (but not all) seeds aborted.
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .config import ConfigError, RunConfig, ladder_candidates, load_config
from .data import CsvError, load_csv
from .io import ModelFileError, atomic_write_text, load_model, save_model, write_json
from .model import MlpModel
from .numerics import seeded_rng
from .training import evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
RUN_ARTIFACTS = ("train_result.json", "bit_report.json", "memory.json")

logger = logging.getLogger("nmpqat")


class RuntimeFailure(RuntimeError):
    pass


def _tag(arch) -> str:
    mode = "".join(c if c.isalnum() or c in "._" else "_" for c in arch.mode.name).strip("_")
    return f"{mode}__h{'-'.join(str(h) for h in arch.hidden_sizes)}"


def make_run_dir(root, cfg_hash: str, prefix: str = "") -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(root) / f"{prefix}{cfg_hash}-{stamp}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _csv_text(rows, delimiter="\t") -> str:
    buf = _stdio.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return repr(float(v))


def write_split_csv(path, ds) -> None:
    names = ds.feature_names or [f"x{i}" for i in range(ds.n_features)]
    rows = [list(names) + ["target"]]
    for x, t in zip(ds.features, ds.targets):
        label = ds.label_map[int(t)] if ds.label_map else _num(t)
        rows.append([_num(v) for v in x] + [label])
    atomic_write_text(path, _csv_text(rows, ","))


def _headline(task) -> str:
    return "mse" if task == "regression" else "accuracy"


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, mode=args.mode, out=args.out)
    tr, val, te, raw_test, stats = cfg.prepare()
    run_dir = make_run_dir(cfg.output_dir, cfg.hash)
    atomic_write_text(run_dir / "config.yaml", yaml.safe_dump(cfg.raw, sort_keys=True))
    write_split_csv(run_dir / "test_split.csv", raw_test)
    tags, n_ok, n_total = [], 0, 0
    for arch in cfg.archs:
        tag = _tag(arch)
        out = run_dir / tag
        result = train(arch, tr, te, cfg.train, val)
        bits, memory = {}, {}
        for seed, frozen in result.frozen.items():
            frozen.provenance = {"config_hash": cfg.hash, "seed": int(seed)}
            if stats is not None:
                frozen.feature_mean, frozen.feature_std = stats.mean, stats.std
            save_model(frozen, out / f"model_seed{seed}.json")
            bits[str(seed)] = analysis.bit_report(frozen).to_dict()
            memory[str(seed)] = analysis.memory_bytes(frozen, 1).to_dict()
        w_cands, a_cands = ladder_candidates(arch.mode)
        summary = result.to_dict()
        summary.update(config_hash=cfg.hash, weight_candidates=list(w_cands),
                       act_candidates=None if a_cands is None else list(a_cands))
        write_json(out / "train_result.json", summary)
        write_json(out / "bit_report.json", bits)
        write_json(out / "memory.json", memory)
        n_ok += len(result.ok_runs)
        n_total += len(result.runs)
        tags.append(tag)
        head = _headline(result.task)
        s = result.summary().get(head)
        line = f"{tag}: {len(result.ok_runs)}/{len(result.runs)} seeds ok"
        if s:
            mean_bits = np.mean([b["mean_weight_bits"] for b in bits.values()])
            line += f", test {head} {s['mean']:.6g} +- {s['std']:.3g}, mean weight bits {mean_bits:.4g}"
        print(line)
        for run in result.runs:
            if run.status != "ok":
                print(f"  seed {run.seed} aborted: {run.error}", file=sys.stderr)
    write_json(run_dir / "manifest.json", {"config_hash": cfg.hash, "runs": tags})
    print(f"run directory: {run_dir}")
    if n_ok == 0:
        return EXIT_RUNTIME
    return EXIT_OK if n_ok == n_total else EXIT_PARTIAL


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_dataset(model, spec: str, args):
    if spec.endswith((".yaml", ".yml")):
        return load_config(spec).prepare()[3]
    target = args.target
    if target is None:
        with open(spec, encoding="utf-8") as fh:
            first = fh.readline().strip().split(args.delimiter)
        target = "target" if not args.no_header and "target" in first else -1
    label_map = model.label_map if model.task == "classification" else None
    return load_csv(spec, target, model.task, header=not args.no_header,
                    delimiter=args.delimiter, label_map=label_map)


def cmd_eval(args) -> int:
    model = load_model(args.model)
    report = {"model": str(args.model), "mode": model.mode, "task": model.task, "results": []}
    for spec in args.data:
        ds = _eval_dataset(model, spec, args)
        if ds.n_features != model.n_inputs:
            raise RuntimeFailure(f"{spec}: expected {model.n_inputs} features, found {ds.n_features}")
        metrics = evaluate(model, model.preprocess(ds.features), ds.targets, model.task,
                           model.n_classes)
        report["results"].append({"data": spec, "n_rows": ds.n_rows, "metrics": metrics})
        print(f"{spec}: " + ", ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    out = Path(args.out) if args.out else Path(str(args.model) + ".eval.json")
    write_json(out, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _load_run(run_dir: Path):
    manifest = run_dir / "manifest.json"
    if not manifest.exists():
        raise RuntimeFailure(f"missing artifacts: {manifest}")
    tags = json.loads(manifest.read_text(encoding="utf-8"))["runs"]
    missing = [str(run_dir / t / f) for t in tags for f in RUN_ARTIFACTS
               if not (run_dir / t / f).exists()]
    runs = {}
    for t in tags:
        if any(m.startswith(str(run_dir / t) + "/") for m in missing):
            continue
        res = json.loads((run_dir / t / "train_result.json").read_text(encoding="utf-8"))
        for r in res["runs"]:
            p = run_dir / t / f"model_seed{r['seed']}.json"
            if r["status"] == "ok" and not p.exists():
                missing.append(str(p))
        runs[t] = {
            "result": res,
            "bits": json.loads((run_dir / t / "bit_report.json").read_text(encoding="utf-8")),
            "memory": json.loads((run_dir / t / "memory.json").read_text(encoding="utf-8")),
        }
    if missing:
        raise RuntimeFailure("missing artifacts:\n  " + "\n  ".join(missing))
    return runs


def _fraction_table(runs, kind: str):
    hist_key, cand_key = f"{kind}_hist", f"{kind}_candidates"
    columns = set()
    for run in runs.values():
        columns.update(run["result"].get(cand_key) or [])
        for rep in run["bits"].values():
            for h in rep[hist_key]:
                columns.update(float(k) for k in (h or {}))
    if not columns:
        return None
    columns = sorted(columns)
    header = ["run", "mode", "depth", "seed", "layer", "neurons"] + [f"b{c:g}" for c in columns]
    rows = [header]
    for tag, run in runs.items():
        res = run["result"]
        for seed, rep in run["bits"].items():
            for li, (h, n) in enumerate(zip(rep[hist_key], rep["neurons_per_layer"])):
                if h is None:
                    continue
                counts = {float(k): v for k, v in h.items()}
                rows.append([tag, res["mode"], res["depth"], seed, li, n]
                            + [_num(counts.get(c, 0) / n) for c in columns])
    return rows


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    runs = _load_run(run_dir)
    out = run_dir / "report"
    written = []
    for kind in ("weight", "act"):
        rows = _fraction_table(runs, kind)
        if rows and len(rows) > 1:
            atomic_write_text(out / f"layer_{kind}_bits.tsv", _csv_text(rows))
            written.append(f"layer_{kind}_bits.tsv")
    mem = [["mode", "run", "seed", "bytes", "metric", "metric_name", "mean_weight_bits"]]
    sweep = {}
    for tag, run in runs.items():
        res = run["result"]
        head = _headline(res["task"])
        for r in res["runs"]:
            if r["status"] != "ok":
                continue
            s = str(r["seed"])
            mem.append([res["mode"], tag, s, run["memory"][s]["total_bytes"], _num(r["metrics"][head]),
                        head, _num(run["bits"][s]["mean_weight_bits"])])
        if res["summary"]:
            sweep.setdefault(res["mode"], []).append(
                [res["mode"], res["depth"], "-".join(map(str, res["hidden_sizes"])),
                 _num(res["summary"][head]["mean"]), _num(res["summary"][head]["std"]),
                 len([r for r in res["runs"] if r["status"] == "ok"]), head])
    atomic_write_text(out / "memory_utility.tsv", _csv_text(mem))
    written.append("memory_utility.tsv")
    depth_rows = [r for rows in sweep.values() if len({x[1] for x in rows}) > 1
                  for r in sorted(rows, key=lambda x: x[1])]
    if depth_rows:
        header = ["mode", "depth", "hidden_sizes", "metric_mean", "metric_std", "n_seeds", "metric_name"]
        atomic_write_text(out / "depth_sweep.tsv", _csv_text([header] + depth_rows))
        written.append("depth_sweep.tsv")
    for name in written:
        print(out / name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------

DEFAULT_TOLERANCES = (10.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-8)


def place_mid_band(model: MlpModel, rng) -> None:
    """Move every learnable strength to a randomly chosen band midpoint."""
    for layer in model.layers:
        for attr, ladder in (("s", layer.weight_ladder), ("s_act", layer.act_ladder)):
            if ladder is not None and ladder.n_bands > 1:
                mids = [ladder.band_midpoint(k) for k in range(ladder.n_bands)]
                getattr(layer, attr)[:] = rng.choice(mids, size=layer.d_out)


def run_theory(cfg: RunConfig) -> list:
    """Every theory check as ``(name, status, detail)``; status is PASS, FAIL or INFO."""
    th = cfg.theory
    seed = th.get("seed", 0)
    checks = []

    trials = analysis.loss_gap_trials(th.get("ridge_trials", 100), seed)
    n_hold = sum(t.holds for t in trials)
    checks.append(("loss_gap", "PASS" if n_hold == len(trials) else "FAIL",
                   f"{n_hold}/{len(trials)} ridge instances satisfy gap <= (L/2)||Wq - W*||^2"))

    ratios = [analysis.epsilon_bound(1.0, b) / analysis.epsilon_bound(1.0, b + 1) for b in range(1, 16)]
    ok = analysis.epsilon_bound(1.0, 2) == 1.0 / 48.0 and all(r == 4.0 for r in ratios)
    checks.append(("epsilon_factor4", "PASS" if ok else "FAIL",
                   "eps(sigma2=1, b=2) = 1/48 and eps(b)/eps(b+1) = 4 for b = 1..15"))

    tr, _, _, _, _ = cfg.prepare()
    model = cfg.archs[0].build(tr.n_features, tr.task, tr.n_classes, rng=seeded_rng(seed))
    sigma2 = np.concatenate([layer.W.var(axis=0) for layer in model.layers])
    fan_in = np.concatenate([np.full(layer.d_out, layer.d_in) for layer in model.layers])
    L = float(th.get("smoothness", 1.0))
    table = [["tolerance", "bits", "saturated", "rho", "target"]]
    prev = 0.0
    mono = True
    for tol in sorted(th.get("tolerances", DEFAULT_TOLERANCES), reverse=True):
        bb = analysis.bit_budget(tol, L, sigma2, fan_in)
        mono &= bb.bits >= prev
        prev = bb.bits
        table.append([_num(tol), _num(bb.bits), str(bb.saturated).lower(), _num(bb.rho), _num(bb.target)])
    checks.append(("bit_budget_monotone", "PASS" if mono else "FAIL",
                   "smaller tolerance never lowers the required uniform bit-width"))

    rng = seeded_rng(seed)
    batch = th.get("gradcheck_batch", 16)
    x = tr.features[:batch]
    y = tr.targets[:batch]
    for mode in cfg.modes:
        n_out = tr.n_classes if tr.task == "classification" else 1
        small = MlpModel.build(tr.n_features, (th.get("gradcheck_hidden", 8),), n_out, tr.task,
                               mode, rng=rng, n_classes=tr.n_classes)
        place_mid_band(small, rng)
        small.init_alpha(x)
        rep = analysis.gradient_check(small, x, y)
        worst = max(r.max_rel_error for r in rep.values())
        detail = ", ".join(f"{k}: {r.max_rel_error:.2e} ({r.checked} checked, {r.excluded} excluded)"
                           for k, r in rep.items() if r.checked or r.excluded)
        checks.append((f"gradient_check[{mode.name}]", "PASS" if worst < 1e-4 else "FAIL",
                       f"max rel. error {worst:.2e}; {detail}"))

    n_mc = th.get("mc_samples", 10**6)
    mses = [analysis.uniform_quantizer_mse(b, n_mc, seed + b) for b in range(2, 9)]
    worst = max(m.rel_error for m in mses)
    checks.append(("quantizer_mse_step2_over_12", "PASS" if worst <= 0.05 else "FAIL",
                   f"max relative deviation from step^2/12 over 2..8 bits: {worst:.3%}"))
    ratio = ", ".join(f"{a.bits}->{b.bits}: {a.mse / b.mse:.3f}" for a, b in zip(mses, mses[1:]))
    checks.append(("quantizer_mse_ratio_per_bit", "INFO",
                   f"{ratio} (symmetric grid: ratio = ((2^b - 1)/(2^(b-1) - 1))^2 -> 4)"))
    return checks, table


def cmd_theory(args) -> int:
    cfg = load_config(args.config, seed=args.seed, mode=args.mode, out=args.out)
    checks, table = run_theory(cfg)
    run_dir = make_run_dir(cfg.output_dir, cfg.hash, prefix="theory-")
    atomic_write_text(run_dir / "bit_budget.tsv", _csv_text(table))
    write_json(run_dir / "theory_report.json",
               {"config_hash": cfg.hash,
                "checks": [{"name": n, "status": s, "detail": d} for n, s, d in checks]})
    for name, status, detail in checks:
        print(f"{status} {name}: {detail}")
    print(f"theory directory: {run_dir}")
    return EXIT_RUNTIME if any(s == "FAIL" for _, s, _ in checks) else EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmpqat", description="Neuron-level mixed-precision QAT for MLPs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def overrides(sp):
        sp.add_argument("--seed", type=int, help="run this single seed instead of train.seeds")
        sp.add_argument("--mode", help="override quant.mode, e.g. nmp_weights_acts or 'uniform(4)'")
        sp.add_argument("--out", help="override output.dir")

    sp = sub.add_parser("train", help="train every (mode, architecture, seed) in a config")
    sp.add_argument("config")
    overrides(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a frozen model on CSV files or a config's test split")
    sp.add_argument("model")
    sp.add_argument("data", nargs="+", help="CSV file(s), or a run config (.yaml) to use its test split")
    sp.add_argument("--target", help="target column name or index (default: 'target', else last)")
    sp.add_argument("--no-header", action="store_true")
    sp.add_argument("--delimiter", default=",")
    sp.add_argument("--out", help="metrics JSON path (default: <model>.eval.json)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="write plot-ready TSV tables for a run directory")
    sp.add_argument("run_dir")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("theory", help="run the quantization-error and gradient checks")
    sp.add_argument("config")
    overrides(sp)
    sp.set_defaults(func=cmd_theory)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, ModelFileError, CsvError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
