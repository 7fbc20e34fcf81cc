"""Report files: selection summaries, operating-characteristic curves and a markdown digest."""
from __future__ import annotations

import json
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .metrics import BB_REF, NO_SOURCE, WB_REF, operating_characteristic
from .select import SCORE_GETTERS

if TYPE_CHECKING:
    from .pipeline import Pipeline

SINGLE_ROWS = ("best", "random", "modsim", "asr", "transq1", "transq2", "fit1", "fit2")
ENSEMBLE_ROWS = ("best", "random", "random-large", "modsim", "asr", "transq1", "transq2", "fit1", "fit2")


def _curves(pipe: "Pipeline", attack: str) -> dict:
    """OC curves per target: both references plus each single-source selection (draw 0)."""
    chosen: dict[tuple[str, str], dict[int, float]] = {}
    for r in pipe.selection_rows:
        if r["category"] == "single" and r["attack"] == attack and r["draw"] == 0:
            chosen.setdefault((r["target"], r["method"]), {})[r["sample"]] = r["d"]
    out = {}
    for t in pipe.ids:
        wb, bb = pipe.refs(t)
        entry = {"wb-ref": operating_characteristic(wb).curve(), "bb-ref": operating_characteristic(bb).curve()}
        for method in SINGLE_ROWS:
            ds = chosen.get((t, method))
            if ds:
                entry[method] = operating_characteristic(list(ds.values())).curve()
        out[t] = entry
    return out


def _not_found_fraction(pipe: "Pipeline", attack: str) -> float:
    rows = [r for r in pipe.table if r.attack == attack]
    return float(np.mean([r.status != "found" for r in rows])) if rows else 0.0


def _fmt(v: float) -> str:
    return f"{v:+.3f}"


def _table(pipe: "Pipeline", category: str, rows, attacks) -> list[str]:
    lines = ["| method | " + " | ".join(attacks) + " |", "|---|" + "---|" * len(attacks)]
    for method in rows:
        cells = []
        for a in attacks:
            try:
                cells.append(_fmt(pipe.summary_score(category, a, method)))
            except KeyError:
                cells.append("n/a")
        lines.append(f"| {method} | " + " | ".join(cells) + " |")
    return lines


def markdown_summary(pipe: "Pipeline") -> str:
    cfg = pipe.cfg
    lines = [
        "# Transferability run summary",
        "",
        f"- config hash: `{cfg.digest()}`",
        f"- models: {len(pipe.ids)} in {len(set(pipe.families.values()))} families; "
        f"attacked inputs: {len(pipe.attack_ids)}; fingerprint budget: {cfg.fingerprint_budget}",
        f"- kernel backend: {pipe.manifest.get('backend', '?')}",
        f"- not-found rows enter at d = cap = {cfg.line_search.cap:g}; fraction per attack: "
        + ", ".join(f"{a} {_not_found_fraction(pipe, a):.3f}" for a in cfg.attack_ids),
        "",
        "Scores are mean T-hat over targets (1 = white-box reference, 0 = black-box reference).",
        "",
        "## Single source",
        "",
        *_table(pipe, "single", SINGLE_ROWS, cfg.attack_ids),
        "",
        f"## Ensembles (top-{cfg.selection.ensemble_k}; random-large has {cfg.selection.large_ensemble} members)",
        "",
        *_table(pipe, "ensemble", ENSEMBLE_ROWS, cfg.transfer_ids),
        "",
        f"## Attack and source chosen together ({cfg.selection.single_method})",
        "",
        "| selection | mean T-hat |",
        "|---|---|",
    ]
    pooled = [e for e in pipe.summary if e["category"] == "pooled"]
    for e in pooled:
        lines.append(f"| pooled over {', '.join(cfg.selection.pooled_attacks)} | {_fmt(e['mean_score'])} |")
    for a in cfg.selection.pooled_attacks:
        lines.append(f"| {a} only | {_fmt(pipe.summary_score('single', a, cfg.selection.single_method))} |")

    res = pipe.results
    lines += ["", "## Studies", ""]
    if "matrices" in res:
        lines += ["| attack | valid cells | negative cells | min | mean | max | max asymmetry |",
                  "|---|---|---|---|---|---|---|"]
        for a, m in res["matrices"].items():
            lines.append(f"| {a} | {m['valid_cells']} | {m['negative_cells']} | {_fmt(m['min'])} | "
                         f"{_fmt(m['mean'])} | {_fmt(m['max'])} | {m['max_asymmetry']:.3f} |")
        lines.append("")
    if "bb_convergence" in res:
        c = res["bb_convergence"]
        lines.append(f"- black-box budget {c['budget']} -> {c['doubled']}: largest median improvement "
                     f"{c['max_improvement']:.3%}; smallest share of inputs with d_wb <= d_bb "
                     f"{min(v['wb_le_bb'] for v in c['per_target'].values()):.3f}")
    if "epsilon_sweep" in res:
        e = res["epsilon_sweep"]
        lines.append(f"- epsilon sweep ({e['attack']}, {', '.join(e['curves'])}): max vertical gap between "
                     f"success-rate curves {e['max_gap']:.3f}; largest per-target score spread "
                     f"{e.get('max_score_spread', float('nan')):.3f}")
    if "fingerprint_sweep" in res:
        f = res["fingerprint_sweep"]
        for a, by_method in f["scores"].items():
            parts = ", ".join(f"{m}: " + " ".join(_fmt(v) for v in vals) for m, vals in by_method.items())
            lines.append(f"- fingerprint budgets {f['budgets']} ({a}): {parts}")
    if "ensemble_size" in res:
        e = res["ensemble_size"]
        lines.append(f"- ensemble growth ({e['attack']}): random " + " ".join(_fmt(v) for v in e["random_growth"])
                     + f"; {e['method']} top-{cfg.selection.ensemble_k} line {_fmt(e['fit_line'][0])}")
    if "attack_dependence" in res:
        for pair, d in res["attack_dependence"].items():
            a, b = pair.split("|")
            wins = " ".join(f"{w:.2f}" for w in d["b_wins_by_group"])
            lines.append(f"- {b} vs {a} over {d['n']} triples: share where {b} needs less distortion, "
                         f"low to high distortion groups: {wins}")
    return "\n".join(lines) + "\n"


def export_reports(pipe: "Pipeline") -> list[Path]:
    out = pipe.out
    files = []
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for a in pipe.cfg.attack_ids:
        p = curves / f"oc_{a}.json"
        p.write_text(json.dumps(_curves(pipe, a), indent=1, sort_keys=True) + "\n")
        files.append(p)

    p = out / "selection_summary.json"
    p.write_text(json.dumps([{"category": e["category"], "attack": e["attack"], "method": e["method"],
                              "mean_score": e["mean_score"], "per_target": e["per_target"]}
                             for e in pipe.summary], indent=1) + "\n")
    files.append(p)

    refs = {}
    for t in pipe.ids:
        wb = pipe.table.lookup(WB_REF, NO_SOURCE, t, pipe.attack_ids)
        bb = pipe.table.lookup(BB_REF, NO_SOURCE, t, pipe.attack_ids)
        refs[t] = {"median_wb": float(np.median(wb)), "median_bb": float(np.median(bb)),
                   "wb_le_bb": float(np.mean(wb <= bb))}
    summary = {
        "config_hash": pipe.cfg.digest(),
        "models": pipe.ids,
        "families": pipe.families,
        "samples": len(pipe.attack_ids),
        "references": refs,
        "selection": {f"{e['category']}/{e['attack']}/{e['method']}": e["mean_score"] for e in pipe.summary},
        "methods": sorted(SCORE_GETTERS),
        "studies": pipe.results,
    }
    p = out / "summary.json"
    p.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    files.append(p)

    p = out / "summary.md"
    p.write_text(markdown_summary(pipe), encoding="utf-8")
    files.append(p)
    return files
