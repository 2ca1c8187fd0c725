"""Command-line workflow: one subcommand per stage, handing off through files.

Each stage writes ``manifest_<stage>.json`` with content hashes of what it
read and wrote. A later stage refuses (exit 3) to read an artifact whose
bytes no longer match the manifest that produced it, or that is missing.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .allocsim import (
    EconomicsConfig,
    compare_policies,
    format_table,
    outcomes_from_arrays,
    write_allocation_report,
)
from .explain import rank_importance, shap_values, summary_export, write_importance, read_importance
from .features import apply_caps, build_features, read_matrix, write_matrix
from .features.preprocess import CapRule
from .gbdt import deserialize, serialize
from .ingest import load_bundle, write_bundle
from .labeling import GrowthThresholds, class_balance, label_clients, read_labels, write_labels
from .metrics import metric_report
from .pipeline import PipelineConfig, run_matrix_pipeline, write_history, write_result
from .syndata import GeneratorConfig, generate

logger = logging.getLogger("growthtarget")

EXIT_ERROR = 1
EXIT_ARTIFACT = 3

BUNDLE_FILES = ("transactions.csv", "clients.csv", "polygons.geojson", "competitors.csv")


class ArtifactError(Exception):
    """Missing or stale input artifact."""


# --------------------------------------------------------------------------
# manifests

def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _producers(directory: Path) -> dict[str, tuple[str, str]]:
    """artifact name -> (expected sha256, manifest file) from manifests in ``directory``."""
    out = {}
    for m in sorted(directory.glob("manifest_*.json")):
        try:
            doc = json.loads(m.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            continue
        for name, digest in doc.get("outputs", {}).items():
            out[name] = (digest, m.name)
    return out


class Stage:
    def __init__(self, name: str, args: argparse.Namespace):
        self.name = name
        self.args = args
        self.input_dir = Path(args.input_dir or args.out_dir)
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.started = datetime.now(timezone.utc).isoformat()
        self._producers = _producers(self.input_dir) if self.input_dir.is_dir() else {}

    def need(self, name: str, label: str | None = None) -> Path:
        path = self.input_dir / name
        if not path.is_file():
            raise ArtifactError(f"missing {label or name} ({path})")
        digest = sha256_file(path)
        expected = self._producers.get(name)
        if expected is not None and expected[0] != digest:
            raise ArtifactError(f"stale input {name}: hash differs from {expected[1]}")
        self.inputs[name] = digest
        return path

    def optional(self, name: str) -> Path | None:
        return self.need(name) if (self.input_dir / name).is_file() else None

    def out(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out_dir / name

    def dump_json(self, name: str, doc: dict) -> Path:
        path = self.out(name)
        with path.open("w", encoding="utf-8") as fh:
            json.dump({**doc, "manifest": f"manifest_{self.name}.json"}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return path

    def finish(self, extra: dict | None = None) -> None:
        doc = {
            "command": self.name,
            "version": __version__,
            "seed": getattr(self.args, "seed", None),
            "tau": getattr(self.args, "tau", None),
            "config": getattr(self.args, "config", None),
            "input_dir": str(self.input_dir),
            "out_dir": str(self.out_dir),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": {n: sha256_file(self.out_dir / n) for n in sorted(set(self.outputs))},
            "started_at": self.started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            **(extra or {}),
        }
        with (self.out_dir / f"manifest_{self.name}.json").open("w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _load_json_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ArtifactError(f"missing config file {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get("GT_THREADS")
    return max(1, int(env)) if env else 1


# --------------------------------------------------------------------------
# stages

def cmd_generate(args) -> int:
    st = Stage("generate", args)
    conf = _load_json_config(args.config)
    if args.config:
        st.inputs[Path(args.config).name] = sha256_file(Path(args.config))
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.n_clients is not None:
        conf["n_clients"] = args.n_clients
    cfg = GeneratorConfig.from_dict(conf)
    bundle, truth = generate(cfg)
    for p in write_bundle(bundle, st.out_dir):
        st.outputs.append(p.name)
    truth.write(st.out("ground_truth.json"))
    st.finish({"generator_config": cfg.to_dict()})
    print(f"generated {len(bundle.clients)} clients, {len(bundle.transactions)} transaction lines "
          f"in {st.out_dir}")
    return 0


def _bundle(st: Stage):
    for name in BUNDLE_FILES[:2]:
        st.need(name)
    for name in BUNDLE_FILES[2:]:
        st.optional(name)
    return load_bundle(st.input_dir)


def cmd_label(args) -> int:
    st = Stage("label", args)
    bundle = _bundle(st)
    thresholds = GrowthThresholds()
    labeled = label_clients(bundle, thresholds)
    write_labels(labeled, st.out("labels.csv"), thresholds)
    balance = {}
    n_eligible = sum(lc.eligible for lc in labeled)
    for tau in thresholds.taus:
        neg, pos = class_balance(labeled, tau)
        balance[f"{tau:.2f}"] = {"negative": neg, "positive": pos}
    st.dump_json("class_balance.json", {"n_clients": len(labeled), "n_eligible": n_eligible,
                                        "thresholds": balance})
    st.finish()
    for tau, b in balance.items():
        print(f"tau={tau}: positive share {100 * b['positive']:.2f}% of {n_eligible} eligible clients")
    return 0


def cmd_featurize(args) -> int:
    st = Stage("featurize", args)
    bundle = _bundle(st)
    windows = tuple(_load_json_config(args.config).get("windows", (3, 6, 12)))
    matrix = build_features(bundle, windows)
    write_matrix(matrix, st.out("features.csv"), st.out("features.meta.json"))
    st.finish()
    print(f"{matrix.shape[0]} clients x {matrix.shape[1]} features")
    return 0


def _tau_rows(st: Stage, tau: float):
    labeled = read_labels(st.need("labels.csv"))
    rows = [lc for lc in labeled if lc.eligible]
    if rows and tau not in rows[0].labels:
        raise ValueError(f"labels.csv has no column for tau={tau}")
    return rows


def cmd_train(args) -> int:
    st = Stage("train", args)
    conf = _load_json_config(args.config)
    if args.config:
        st.inputs[Path(args.config).name] = sha256_file(Path(args.config))
    cfg = PipelineConfig.from_dict(conf)
    cfg.tau = args.tau
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.space.seed = args.seed
    rows = _tau_rows(st, cfg.tau)
    matrix = read_matrix(st.need("features.csv"), st.optional("features.meta.json"))
    ids = [lc.client_id for lc in rows]
    y = np.array([lc.labels[cfg.tau] for lc in rows], dtype=np.int64)
    result = run_matrix_pipeline(matrix.reindex(ids), y, cfg, n_threads=_threads(args))
    write_result(result, st.out("pipeline_result.json"))
    write_history(result.elimination_history, st.out("elimination_history.csv"))
    st.dump_json("filter_report.json", result.filter_report.to_dict())
    st.out("model.json").write_bytes(serialize(result.final_model))
    st.finish({"pipeline_config": cfg.to_dict()})
    m = result.holdout_metrics
    print(f"tau={cfg.tau}: {len(result.final_features)} features, CV AUC {result.cv_auc:.4f}, "
          f"holdout AUC {m.auc:.4f}")
    return 0


def _model_and_holdout(st: Stage):
    model_path = st.input_dir / "model.json"
    if not model_path.is_file():
        raise ArtifactError(f"missing model ({model_path})")
    model = deserialize(st.need("model.json").read_bytes())
    result = json.loads(st.need("pipeline_result.json").read_text(encoding="utf-8"))
    matrix = read_matrix(st.need("features.csv"), st.optional("features.meta.json"))
    caps = [CapRule(**c) for c in result["cap_rules"]]
    holdout = apply_caps(matrix.reindex(result["holdout_ids"]), caps)
    return model, result, holdout


def cmd_explain(args) -> int:
    st = Stage("explain", args)
    model, _, holdout = _model_and_holdout(st)
    explanations = shap_values(model, holdout)
    summary_export(explanations, holdout, model.feature_names, top_k=args.top_k,
                   path=st.out("shap_summary.json"))
    phi = np.vstack([e.phi for e in explanations])
    ranking = rank_importance(model.feature_names, np.mean(np.abs(phi), axis=0))
    write_importance(ranking, st.out("importance.csv"))
    st.finish()
    for name, imp in ranking[:10]:
        print(f"{imp:10.5f}  {name}")
    return 0


def cmd_evaluate(args) -> int:
    st = Stage("evaluate", args)
    model, result, holdout = _model_and_holdout(st)
    tau = result["tau"]
    by_id = {lc.client_id: lc for lc in _tau_rows(st, tau)}
    y = np.array([by_id[c].labels[tau] for c in holdout.client_ids], dtype=np.int64)
    scores = model.predict_proba(holdout)
    ks = tuple(args.k or (100, 500))
    model_rep = metric_report(scores, y, ks, ids=holdout.client_ids)
    volume = np.array([by_id[c].v_pre for c in holdout.client_ids])
    # volume percentile rank, so the 0.5 threshold means "top half by volume"
    pct = (np.argsort(np.argsort(volume, kind="mergesort"), kind="mergesort") + 1) / len(volume)
    base_rep = metric_report(pct, y, ks, ids=holdout.client_ids)
    doc = {
        "tau": tau,
        "n_holdout": len(y),
        "cv_mean_auc": result["cv_auc"],
        "models": {"gbdt_shap_rfe": model_rep.to_dict(), "volume_baseline": base_rep.to_dict()},
    }
    st.dump_json("metrics.json", doc)
    st.finish()
    p = model_rep.precision_at_half
    print(f"holdout AUC {model_rep.auc:.4f}, F1 {model_rep.f1:.4f}, precision@0.5 "
          f"{'n/a' if p is None else f'{p:.4f}'}, "
          + ", ".join(f"P@{k} {v:.3f}" for k, v in model_rep.precision_at_k.items()))
    return 0


def cmd_simulate(args) -> int:
    st = Stage("simulate", args)
    conf = _load_json_config(args.config)
    margin = args.margin_per_hl if args.margin_per_hl is not None else conf.get("margin_per_hl")
    if margin is None:
        raise ValueError("margin per hectoliter is required (--margin-per-hl or config)")
    budget = args.budget if args.budget is not None else conf.get("budget_coolers", 100)
    model, result, holdout = _model_and_holdout(st)
    tau = result["tau"]
    by_id = {lc.client_id: lc for lc in _tau_rows(st, tau)}
    ids = holdout.client_ids
    scores = model.predict_proba(holdout)
    outcomes = outcomes_from_arrays(ids, [by_id[c].v_pre for c in ids], [by_id[c].v_post for c in ids])
    kw = {"cooler_cost": conf["cooler_cost"]} if "cooler_cost" in conf else {}
    econ = EconomicsConfig(margin_per_hl=float(margin), budget_coolers=int(budget), **kw)
    plans = compare_policies(dict(zip(ids, (float(s) for s in scores))), outcomes, econ, tau)
    write_allocation_report(plans, econ, st.out("allocation_report.json"),
                            {"manifest": "manifest_simulate.json", "population": len(ids)})
    st.finish()
    print(format_table(plans))
    return 0


# --------------------------------------------------------------------------
# report

def _read_json(path: Path) -> dict | None:
    return json.loads(path.read_text(encoding="utf-8")) if path.is_file() else None


def render_report(directory: Path, top_k: int = 20) -> tuple[str, list[str]]:
    """Markdown report over whatever artifacts exist; returns (text, gaps)."""
    gaps = []
    out = ["# Cooler growth targeting report", ""]

    out += ["## Class balance", ""]
    bal = _read_json(directory / "class_balance.json")
    if bal is None:
        gaps.append("class_balance.json")
        out += ["_Gap: class balance artifact not found._", ""]
    else:
        out += [f"{bal['n_eligible']} eligible of {bal['n_clients']} clients.", "",
                "| growth threshold | negative (%) | positive (%) |", "|---|---|---|"]
        for tau, b in sorted(bal["thresholds"].items()):
            out.append(f"| {tau} | {100 * b['negative']:.2f} | {100 * b['positive']:.2f} |")
        out.append("")

    out += ["## Model metrics", ""]
    met = _read_json(directory / "metrics.json")
    if met is None:
        gaps.append("metrics.json")
        out += ["_Gap: metrics artifact not found._", ""]
    else:
        ks = sorted({k for m in met["models"].values() for k in m["precision_at_k"]}, key=int)
        out += [f"Threshold {met['tau']:.2f}; {met['n_holdout']} holdout clients; "
                f"cross-validated AUC {met['cv_mean_auc']:.4f}.", "",
                "| model | AUC | F1 | precision@0.5 | recall@0.5 | " +
                " | ".join(f"P@{k}" for k in ks) + " |",
                "|---|---|---|---|---|" + "---|" * len(ks)]
        for name, m in sorted(met["models"].items()):
            p = "n/a" if m["precision_at_half"] is None else f"{m['precision_at_half']:.4f}"
            out.append(f"| {name} | {m['auc']:.4f} | {m['f1']:.4f} | {p} | {m['recall_at_half']:.4f} | "
                       + " | ".join(f"{m['precision_at_k'][k]:.3f}" for k in ks) + " |")
        out.append("")

    out += [f"## Top {top_k} features by mean |SHAP|", ""]
    imp_path = directory / "importance.csv"
    if not imp_path.is_file():
        gaps.append("importance.csv")
        out += ["_Gap: importance artifact not found._", ""]
    else:
        out += ["| rank | feature | mean abs SHAP |", "|---|---|---|"]
        for r, (name, v) in enumerate(read_importance(imp_path)[:top_k], start=1):
            out.append(f"| {r} | {name} | {v:.6f} |")
        out.append("")

    out += ["## Allocation comparison", ""]
    alloc = _read_json(directory / "allocation_report.json")
    if alloc is None:
        gaps.append("allocation_report.json")
        out += ["_Gap: allocation artifact not found._", ""]
    else:
        econ = alloc["economics"]
        out += [f"Budget {econ['budget_coolers']} coolers at {econ['cooler_cost']:g} each; "
                f"margin {econ['margin_per_hl']:g} per hl.", "",
                "| policy | selected | hit rate | incremental margin | cost savings | ROI |",
                "|---|---|---|---|---|---|"]
        for p in alloc["policies"]:
            out.append(f"| {p['policy_name']} | {len(p['selected_clients'])} | {p['hit_rate']:.3f} | "
                       f"{p['incremental_margin']:.2f} | {p['cost_savings']:.2f} | {p['roi']:.4f} |")
        out += ["", f"_{alloc['caveat']}_", ""]

    if gaps:
        out += ["## Gaps", ""] + [f"- {g} missing; its section is incomplete" for g in gaps] + [""]
    return "\n".join(out), gaps


def cmd_report(args) -> int:
    st = Stage("report", args)
    for name in ("class_balance.json", "metrics.json", "importance.csv", "allocation_report.json"):
        st.optional(name)
    text, gaps = render_report(st.input_dir, args.top_k)
    st.out("report.md").write_text(text, encoding="utf-8")
    st.finish({"gaps": gaps})
    print(f"report written to {st.out_dir / 'report.md'}" + (f" (gaps: {', '.join(gaps)})" if gaps else ""))
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="growthtarget",
                                     description="Cooler growth-target modelling workflow")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--input-dir", help="defaults to --out-dir")
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
        return p

    p = add("generate", cmd_generate, "write a synthetic client book")
    p.add_argument("--n-clients", type=int)
    add("label", cmd_label, "compute growth labels")
    add("featurize", cmd_featurize, "build the raw feature matrix")
    p = add("train", cmd_train, "tune, eliminate features and fit the final model")
    p.add_argument("--tau", type=float, default=0.30)
    p.add_argument("--threads", type=int)
    p = add("explain", cmd_explain, "SHAP attributions on holdout clients")
    p.add_argument("--top-k", type=int, default=20)
    p = add("evaluate", cmd_evaluate, "holdout metrics")
    p.add_argument("--k", type=int, action="append", help="Precision@K cutoffs (repeatable)")
    p = add("simulate", cmd_simulate, "compare allocation policies on holdout clients")
    p.add_argument("--budget", type=int)
    p.add_argument("--margin-per-hl", type=float)
    p = add("report", cmd_report, "markdown summary of available artifacts")
    p.add_argument("--top-k", type=int, default=20)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
