"""Config-driven end-to-end run with per-stage persistence and resumption.

Stages run in a fixed order. Each one writes its files, records their
sha256 in ``run_manifest.json`` and is skipped on a later run when its
digest (config sections plus upstream file hashes) and its files still
match. Within a stage the work items are spread over a process pool whose
size comes from ``FITBENCH_WORKERS``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import experiments as ex
from .blackbox import DecisionOracle, run_blackbox
from .config import RunConfig, load_config
from .errors import ConfigurationError, FitBenchError, InputError, StageError
from .fingerprint import SimilarityMatrix, decision_profile, similarity_from_profiles
from .geometry import min_distortion_along
from .kernels import BACKEND
from .metrics import (BB_REF, NO_SOURCE, WB_REF, DistortionRow, DistortionTable, matrix_to_csv,
                      transfer_matrix, transferability_score)
from .select import (SCORE_GETTERS, FitTable, build_fit_table, candidate_pool, select_attack_and_source,
                     select_source, select_topk)
from .sources import EnsembleSpec
from .transfer import run_transfer
from .whitebox import run_whitebox
from .zoo import ModelZoo, build_zoo, generate_dataset, load_zoo, save_zoo

logger = logging.getLogger(__name__)

WORKERS_ENV = "FITBENCH_WORKERS"
MANIFEST = "run_manifest.json"
STAGES = ("dataset", "zoo", "filter", "references", "transfer", "matrices", "fingerprints", "fit",
          "selections", "experiments", "report")

# config sections each stage depends on (upstream file hashes are chained in as well)
_SECTIONS = {
    "dataset": ("seed", "dataset"),
    "zoo": ("zoo", "training"),
    "filter": ("n", "query_pool"),
    "references": ("line_search", "whitebox", "blackbox", "convergence_budget"),
    "transfer": ("transfer",),
    "matrices": ("exclude_family",),
    "fingerprints": ("fingerprint_budget_set",),
    "fit": ("selection", "exclude_family", "fingerprint_budget"),
    "selections": ("selection",),
    "experiments": ("experiments",),
    "report": (),
}

SELECTION_HEADER = ("category", "attack", "method", "draw", "target", "sample", "choice", "d", "status",
                    "queries")
FINGERPRINT_METHODS = ("modsim", "fit1", "fit2")


def long_bb_ref(budget: int) -> str:
    return f"{BB_REF}@{budget}"


def epsilon_label(attack: str, epsilon: float) -> str:
    return f"{attack}@{epsilon * 255:.6g}/255"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def worker_count(explicit: int | None = None) -> int:
    if explicit is not None:
        n = explicit
    else:
        raw = os.environ.get(WORKERS_ENV, "1")
        try:
            n = int(raw)
        except ValueError as exc:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {n}")
    return n


# ---------------------------------------------------------------------------
# worker pool
# ---------------------------------------------------------------------------

_STATE: dict = {}


def _init_worker(state: dict) -> None:
    _STATE.clear()
    _STATE.update(state)


def pool_map(fn: Callable, items: Iterable, workers: int, state: dict) -> list:
    """Order-preserving map; results never depend on the worker count."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        _init_worker(state)
        try:
            return [fn(it) for it in items]
        finally:
            _STATE.clear()
    chunk = max(1, len(items) // (8 * workers))
    with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(state,)) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


def _direction(attack: str, source, sample, epsilon: float | None = None):
    cfg: RunConfig = _STATE["cfg"]
    if attack in cfg.transfer_ids:
        tc = cfg.transfer_config(attack)
        if epsilon is not None:
            tc = tc.with_epsilon(epsilon)
        return run_transfer(source, sample, tc)
    return run_whitebox(source, sample, cfg.whitebox_config(attack))


def _row(attack, source, target, sample, res) -> DistortionRow:
    return DistortionRow(attack, source, target, sample, res.d, res.status, res.clipped, res.queries)


def _reference_item(item):
    target_id, sample_id = item
    cfg: RunConfig = _STATE["cfg"]
    t, s = _STATE["models"][target_id], _STATE["samples"][sample_id]
    wb = [min_distortion_along(t, s, run_whitebox(t, s, c), cfg.line_search) for c in cfg.whitebox]
    best = min(range(len(wb)), key=lambda i: (wb[i].d, i))
    rows = [DistortionRow(WB_REF, NO_SOURCE, target_id, sample_id, wb[best].d, wb[best].status,
                          wb[best].clipped, sum(r.queries for r in wb))]
    budgets = [(BB_REF, None)]
    if "bb_convergence" in cfg.experiments.run:
        budgets.append((long_bb_ref(cfg.convergence_budget), cfg.convergence_budget))
    for label, budget in budgets:
        runs = [run_blackbox(t, s, c if budget is None else replace(c, budget=budget), cfg.line_search)
                for c in cfg.blackbox]
        b = min(range(len(runs)), key=lambda i: (runs[i].d, i))
        rows.append(DistortionRow(label, NO_SOURCE, target_id, sample_id, runs[b].d, runs[b].status, False,
                                  sum(r.queries for r in runs)))
    return rows


def _transfer_item(item):
    """One direction on one source, line-searched against every target."""
    attack, source_id, sample_id, epsilon, label = item
    cfg: RunConfig = _STATE["cfg"]
    models, s = _STATE["models"], _STATE["samples"][sample_id]
    u = _direction(attack, models[source_id], s, epsilon)
    return [_row(label, source_id, t, sample_id, min_distortion_along(m, s, u, cfg.line_search))
            for t, m in models.items()]


def _ensemble_item(item):
    attack, member_ids, sample_id, targets = item
    cfg: RunConfig = _STATE["cfg"]
    models, s = _STATE["models"], _STATE["samples"][sample_id]
    spec = EnsembleSpec(tuple(models[m] for m in member_ids))
    u = _direction(attack, spec, s)
    return [_row(attack, spec.id, t, sample_id, min_distortion_along(models[t], s, u, cfg.line_search))
            for t in targets]


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


class Pipeline:
    """Holds the run state; every ``_compute_*`` writes files, every ``_load_*`` reads them back."""

    def __init__(self, cfg: RunConfig, out_dir: Path, workers: int | None = None, config_text: str | None = None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.workers = worker_count(workers)
        self.config_text = config_text
        self.manifest = self._read_manifest()
        self.invocation: dict[str, str] = {}
        # run state
        self.dataset = None
        self.zoo: ModelZoo | None = None
        self.attack_ids: list[int] = []
        self.query_ids: list[int] = []
        self.table: DistortionTable | None = None
        self.matrices: dict[str, np.ndarray] = {}
        self.matrix_excluded: np.ndarray | None = None  # True where a cell is left out (same family)
        self.sims: dict[int, SimilarityMatrix] = {}
        self.fit: dict[str, FitTable] = {}
        self.selection_rows: list[dict] = []
        self.ensembles: DistortionTable | None = None
        self.summary: list[dict] = []
        self.results: dict = {}

    # -- manifest ---------------------------------------------------------------

    def _read_manifest(self) -> dict:
        path = self.out / MANIFEST
        fresh = {"config_hash": self.cfg.digest(), "stages": {}, "files": {}, "target_queries": {},
                 "timings": {}}
        if not path.exists():
            return fresh
        try:
            m = json.loads(path.read_text())
        except json.JSONDecodeError:
            logger.warning("unreadable manifest in %s, starting over", self.out)
            return fresh
        m["config_hash"] = self.cfg.digest()
        m.setdefault("stages", {})
        m.setdefault("files", {})
        m.setdefault("target_queries", {})
        m.setdefault("timings", {})
        return m

    def _write_manifest(self) -> None:
        self.manifest["backend"] = BACKEND
        self.manifest["workers"] = self.workers
        self.manifest["invocation"] = self.invocation
        self.manifest["files"] = {f: h for st in self.manifest["stages"].values()
                                  for f, h in st.get("files", {}).items()}
        tmp = self.out / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")
        tmp.replace(self.out / MANIFEST)

    def _digest(self, stage: str) -> str:
        i = STAGES.index(stage)
        upstream = self.manifest["stages"].get(STAGES[i - 1], {}) if i else {}
        payload = {
            "config": self.cfg.stage_digest(*_SECTIONS[stage]) if _SECTIONS[stage] else "",
            "upstream": upstream.get("digest", ""),
            "files": upstream.get("files", {}),
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def _files_ok(self, files: dict) -> bool:
        for rel, h in files.items():
            p = self.out / rel
            if not p.exists() or sha256_file(p) != h:
                return False
        return True

    def is_done(self, stage: str) -> bool:
        e = self.manifest["stages"].get(stage)
        return bool(e) and e.get("status") == "done" and e.get("digest") == self._digest(stage) \
            and self._files_ok(e.get("files", {}))

    # -- driver -----------------------------------------------------------------

    def run(self, force: Sequence[str] = (), only_load: bool = False) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        if self.config_text is not None:
            (self.out / "config.toml").write_text(self.config_text, encoding="utf-8")
        t_all = time.perf_counter()
        for stage in STAGES:
            self._stage(stage, stage in force, only_load)
        if not only_load:
            self.manifest["timings"]["total_invocation"] = round(time.perf_counter() - t_all, 3)
            self._write_manifest()
        return self.manifest

    def load_all(self) -> None:
        """Read every stage's files as they are, without checking digests."""
        for stage in STAGES:
            try:
                getattr(self, f"_load_{stage}")()
            except (FitBenchError, OSError, KeyError, ValueError) as exc:
                raise StageError(stage, exc) from exc

    def _stage(self, stage: str, force: bool, only_load: bool) -> None:
        load = getattr(self, f"_load_{stage}")
        if not force and self.is_done(stage):
            logger.info("stage %s: reusing persisted outputs", stage)
            try:
                load()
            except FitBenchError as exc:
                raise StageError(stage, exc) from exc
            self.invocation[stage] = "reused"
            return
        if only_load:
            raise StageError(stage, InputError("stage outputs are missing or stale"))
        logger.info("stage %s: computing", stage)
        entry = {"status": "running", "digest": self._digest(stage)}
        self.manifest["stages"][stage] = entry
        t0 = time.perf_counter()
        try:
            files = getattr(self, f"_compute_{stage}")()
            load()
        except Exception as exc:
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            self._write_manifest()
            raise StageError(stage, exc) from exc
        seconds = round(time.perf_counter() - t0, 3)
        entry.update(status="done", seconds=seconds,
                     files={str(p.relative_to(self.out)): sha256_file(p) for p in sorted(files)})
        entry.pop("error", None)
        self.manifest["timings"][stage] = seconds
        self.invocation[stage] = "computed"
        self._write_manifest()

    def _map(self, fn, items):
        state = {"cfg": self.cfg, "models": {m.id: m for m in self.zoo},
                 "samples": {i: self.dataset.sample(i) for i in self.attack_ids}}
        return pool_map(fn, items, self.workers, state)

    # -- helpers ---------------------------------------------------------------

    @property
    def ids(self) -> list[str]:
        return self.zoo.ids

    @property
    def families(self) -> dict[str, str]:
        return {m.id: m.family for m in self.zoo}

    def candidates(self, target: str) -> list[str]:
        return candidate_pool(self.ids, target, self.families, self.cfg.exclude_family)

    def refs(self, target: str):
        return self.table.references(target, self.attack_ids)

    def score(self, d, target: str) -> float:
        wb, bb = self.refs(target)
        return transferability_score(d, wb, bb).value

    # -- dataset ---------------------------------------------------------------

    def _dataset_digest(self, ds) -> str:
        h = hashlib.sha256()
        for a in (ds.x_train, ds.y_train, ds.x_eval, ds.y_eval):
            h.update(np.ascontiguousarray(a).astype("<f8").tobytes())
        return h.hexdigest()

    def _compute_dataset(self):
        d = self.cfg.dataset
        ds = generate_dataset(self.cfg.seed_for("dataset"), d.n_train, d.n_eval, d.K, d.N)
        p = self.out / "dataset.json"
        p.write_text(json.dumps({"seed": ds.seed, "n_train": d.n_train, "n_eval": d.n_eval, "K": d.K,
                                 "N": d.N, "sha256": self._dataset_digest(ds)}, indent=1) + "\n")
        return [p]

    def _load_dataset(self):
        info = json.loads((self.out / "dataset.json").read_text())
        ds = generate_dataset(info["seed"], info["n_train"], info["n_eval"], info["K"], info["N"])
        if self._dataset_digest(ds) != info["sha256"]:
            raise InputError("regenerated dataset does not match the recorded hash")
        self.dataset = ds

    # -- zoo -------------------------------------------------------------------

    def _compute_zoo(self):
        zoo = build_zoo(self.cfg.zoo, self.dataset, self.cfg.training, self.workers)
        zoo.validate()
        return save_zoo(zoo, self.out / "zoo")

    def _load_zoo(self):
        zoo = load_zoo(self.out / "zoo")
        if zoo.ids != self.cfg.model_ids:
            raise InputError(f"persisted zoo {zoo.ids} does not match the config {self.cfg.model_ids}")
        zoo.validate()
        self.zoo = zoo

    # -- filter ----------------------------------------------------------------

    def _compute_filter(self):
        ds, n = self.dataset, self.cfg.n
        attack, excluded = [], []
        for s in ds.samples("eval"):
            if len(attack) == n:
                break
            if all(m.kernel.predict(s.x) == s.y for m in self.zoo):
                attack.append(s.id)
            else:
                excluded.append(s.id)
        if len(attack) < n:
            raise ConfigurationError(f"only {len(attack)} eval samples are classified correctly by all models, "
                                     f"{n} requested")
        if excluded:
            logger.info("filtered out %d samples misclassified by some model: %s", len(excluded), excluded)
        taken = set(attack)
        pool = [int(i) for i in ds.eval_ids() if int(i) not in taken]
        need = max(self.cfg.fingerprint_budgets())
        if len(pool) < need:
            raise ConfigurationError(f"only {len(pool)} fingerprint queries left, {need} needed")
        p = self.out / "samples.json"
        p.write_text(json.dumps({"attack": attack, "excluded": excluded, "queries": pool[:need]}, indent=1) + "\n")
        return [p]

    def _load_filter(self):
        info = json.loads((self.out / "samples.json").read_text())
        self.attack_ids, self.query_ids = info["attack"], info["queries"]
        if set(self.attack_ids) & set(self.query_ids):
            raise InputError("fingerprint queries overlap the attacked samples")

    # -- references ------------------------------------------------------------

    def _compute_references(self):
        items = [(t, x) for t in self.ids for x in self.attack_ids]
        table = DistortionTable(r for rows in self._map(_reference_item, items) for r in rows)
        p = self.out / "references.csv"
        table.to_csv(p)
        return [p]

    def _load_references(self):
        self.table = DistortionTable.from_csv(self.out / "references.csv")
        self.table.validate_references()

    # -- transfer --------------------------------------------------------------

    def _compute_transfer(self):
        items = [(a, s, x, None, a) for a in self.cfg.attack_ids for s in self.ids for x in self.attack_ids]
        self.table.extend(r for rows in self._map(_transfer_item, items) for r in rows)
        p = self.out / "distortions.csv"
        self.table.to_csv(p)
        return [p]

    def _load_transfer(self):
        self.table = DistortionTable.from_csv(self.out / "distortions.csv")
        self.table.validate_references()

    # -- matrices --------------------------------------------------------------

    def _compute_matrices(self):
        files = []
        excluded = None
        for a in self.cfg.attack_ids:
            m, excluded = transfer_matrix(self.table, a, self.ids, self.ids, self.families)
            p = self.out / f"matrix_{a}.csv"
            matrix_to_csv(m, self.ids, self.ids, p)
            files.append(p)
        p = self.out / "matrix_excluded.csv"
        matrix_to_csv(excluded.astype(float), self.ids, self.ids, p)
        return files + [p]

    def _load_matrices(self):
        from .metrics import matrix_from_csv

        for a in self.cfg.attack_ids:
            m, sources, targets = matrix_from_csv(self.out / f"matrix_{a}.csv")
            if sources != self.ids or targets != self.ids:
                raise InputError(f"matrix_{a}.csv does not list the zoo models")
            self.matrices[a] = m
        self.matrix_excluded = matrix_from_csv(self.out / "matrix_excluded.csv")[0].astype(bool)

    # -- fingerprints ------------------------------------------------------------

    def _compute_fingerprints(self):
        files = []
        queries = np.array([self.dataset.sample(i).x for i in self.query_ids])
        counts = {}
        for b in self.cfg.fingerprint_budgets():
            qid = f"eval-first-{b}"
            profiles = []
            counts[str(b)] = {}
            for m in self.zoo:
                # every model is a target in turn; its profile is taken through a metered oracle
                oracle = DecisionOracle(m, b)
                profiles.append(decision_profile(oracle, queries[:b], qid))
                counts[str(b)][m.id] = oracle.queries
            p = self.out / f"similarity_{b}.csv"
            similarity_from_profiles(profiles, b).to_csv(p)
            files.append(p)
        p = self.out / "fingerprint_queries.json"
        p.write_text(json.dumps(counts, indent=1, sort_keys=True) + "\n")
        return files + [p]

    def _load_fingerprints(self):
        for b in self.cfg.fingerprint_budgets():
            s = SimilarityMatrix.from_csv(self.out / f"similarity_{b}.csv", f"eval-first-{b}", b)
            if s.ids != self.ids:
                raise InputError(f"similarity_{b}.csv does not list the zoo models")
            self.sims[b] = s
        counts = json.loads((self.out / "fingerprint_queries.json").read_text())
        self.manifest["target_queries"]["fingerprint"] = counts[str(self.cfg.fingerprint_budget)]

    # -- FiT tables ---------------------------------------------------------------

    def _fit_table(self, attack: str, sim: SimilarityMatrix) -> FitTable:
        tab = self.table
        sel = self.cfg.selection
        return build_fit_table(
            lambda s, sig, x: tab.row(attack, s, sig, x).d,
            lambda sig, x: (tab.row(WB_REF, NO_SOURCE, sig, x).d, tab.row(BB_REF, NO_SOURCE, sig, x).d),
            lambda s, t: sim[s, t],
            self.ids, self.families, self.ids, self.attack_ids, sel.asr_budget,
            self.cfg.exclude_family, sel.include_source,
        )

    def _compute_fit(self):
        files = []
        sim = self.sims[self.cfg.fingerprint_budget]
        for a in self.cfg.attack_ids:
            p = self.out / f"fit_{a}.csv"
            self._fit_table(a, sim).to_csv(p)
            files.append(p)
        return files

    def _load_fit(self):
        self.fit = {a: FitTable.from_csv(self.out / f"fit_{a}.csv") for a in self.cfg.attack_ids}

    # -- selections --------------------------------------------------------------

    def _pool_rng(self, kind: str, attack: str, target: str, draw: int) -> np.random.Generator:
        # keyed on the candidate pool, so targets sharing a pool share draws (and cached ensembles)
        pool = "|".join(self.candidates(target))
        return np.random.default_rng(self.cfg.seed_for(f"{kind}:{attack}:{pool}:{draw}"))

    def select_single(self, attack: str, method: str, fit: FitTable | None = None) -> dict[str, list[str]]:
        """Chosen source per attacked sample, for every target."""
        fit = fit or self.fit[attack]
        return {t: [select_source(fit.scores(t, x, self.candidates(t), method)) for x in self.attack_ids]
                for t in self.ids}

    def single_score(self, attack: str, method: str, fit: FitTable | None = None) -> dict[str, float]:
        out = {}
        for t, chosen in self.select_single(attack, method, fit).items():
            d = [self.table.row(attack, s, t, x).d for s, x in zip(chosen, self.attack_ids)]
            out[t] = self.score(d, t)
        return out

    def _ensemble_plan(self, attack: str) -> dict[tuple, tuple[str, ...]]:
        """(method, draw, target, sample) -> sorted member ids."""
        sel = self.cfg.selection
        plan = {}
        for t in self.ids:
            cands = self.candidates(t)
            for method in SCORE_GETTERS:
                for x in self.attack_ids:
                    top = select_topk(self.fit[attack].scores(t, x, cands, method), sel.ensemble_k)
                    plan[(method, 0, t, x)] = tuple(sorted(top))
            for kind, size in (("random", sel.ensemble_k), ("random-large", sel.large_ensemble)):
                for r in range(sel.random_draws):
                    rng = self._pool_rng(f"ensemble-{kind}", attack, t, r)
                    for x in self.attack_ids:
                        pick = rng.choice(len(cands), size=size, replace=False)
                        plan[(kind, r, t, x)] = tuple(sorted(cands[i] for i in pick))
        return plan

    def _run_ensembles(self, wanted: Iterable[tuple[str, tuple[str, ...], int, str]],
                       table: DistortionTable) -> None:
        """Fill ``table`` with (attack, members, sample, target) cases it does not hold yet."""
        grouped: dict[tuple, list[str]] = {}
        for attack, members, x, t in wanted:
            if (attack, "+".join(members), t, x) in table:
                continue
            targets = grouped.setdefault((attack, members, x), [])
            if t not in targets:
                targets.append(t)
        items = [(a, m, x, tuple(ts)) for (a, m, x), ts in sorted(grouped.items())]
        table.extend(r for rows in self._map(_ensemble_item, items) for r in rows)

    def _compute_selections(self):
        sel = self.cfg.selection
        rows = []

        def emit(category, attack, method, draw, t, x, choice, r):
            rows.append({"category": category, "attack": attack, "method": method, "draw": draw, "target": t,
                         "sample": x, "choice": choice, "d": r.d, "status": r.status, "queries": r.queries})

        # single source: oracle, random and every score
        for a in self.cfg.attack_ids:
            for t in self.ids:
                cands = self.candidates(t)
                for x in self.attack_ids:
                    best = min(cands, key=lambda s: (self.table.row(a, s, t, x).d, s))
                    emit("single", a, "best", 0, t, x, best, self.table.row(a, best, t, x))
                for r in range(sel.random_draws):
                    rng = self._pool_rng("single-random", a, t, r)
                    for x in self.attack_ids:
                        s = cands[int(rng.integers(len(cands)))]
                        emit("single", a, "random", r, t, x, s, self.table.row(a, s, t, x))
            for method in SCORE_GETTERS:
                for t, chosen in self.select_single(a, method).items():
                    for s, x in zip(chosen, self.attack_ids):
                        emit("single", a, method, 0, t, x, s, self.table.row(a, s, t, x))

        # attack and source chosen jointly
        for t in self.ids:
            cands = self.candidates(t)
            for x in self.attack_ids:
                per_attack = {a: self.fit[a].scores(t, x, cands, sel.single_method) for a in sel.pooled_attacks}
                a, s = select_attack_and_source(per_attack)
                emit("pooled", a, sel.single_method, 0, t, x, f"{a}:{s}", self.table.row(a, s, t, x))

        # ensembles of transfer attacks
        ens = DistortionTable()
        plans = {a: self._ensemble_plan(a) for a in self.cfg.transfer_ids}
        self._run_ensembles(((a, m, x, t) for a, plan in plans.items() for (_, _, t, x), m in plan.items()), ens)
        for a, plan in plans.items():
            options: dict[tuple[str, int], set[str]] = {}
            for (method, draw, t, x), members in plan.items():
                e = "+".join(members)
                emit("ensemble", a, method, draw, t, x, e, ens.row(a, e, t, x))
                options.setdefault((t, x), set()).add(e)
            for t in self.ids:
                for x in self.attack_ids:
                    best = min(sorted(options[(t, x)]), key=lambda e: (ens.row(a, e, t, x).d, e))
                    emit("ensemble", a, "best", 0, t, x, best, ens.row(a, best, t, x))

        p_ens = self.out / "ensembles.csv"
        ens.to_csv(p_ens)
        p = self.out / "selections.csv"
        _write_selections(rows, p)
        return [p, p_ens]

    def _load_selections(self):
        self.selection_rows = _read_selections(self.out / "selections.csv")
        self.ensembles = DistortionTable.from_csv(self.out / "ensembles.csv")
        self.summary = self._summarize()
        self.manifest["target_queries"].update(self._query_accounting())

    def _summarize(self) -> list[dict]:
        """Mean T-hat per (category, attack, method); random methods average their draws."""
        groups: dict[tuple, dict[tuple[str, int], dict[int, float]]] = {}
        for r in self.selection_rows:
            key = (r["category"], r["attack"] if r["category"] != "pooled" else "pooled", r["method"])
            groups.setdefault(key, {}).setdefault((r["target"], r["draw"]), {})[r["sample"]] = r["d"]
        out = []
        for (cat, attack, method), cells in groups.items():
            per_target: dict[str, list[float]] = {}
            for (t, _draw), ds in cells.items():
                per_target.setdefault(t, []).append(self.score([ds[x] for x in self.attack_ids], t))
            pt = {t: float(np.mean(v)) for t, v in sorted(per_target.items())}
            out.append({"category": cat, "attack": attack, "method": method,
                        "mean_score": float(np.mean(list(pt.values()))), "per_target": pt})
        out.sort(key=lambda e: (e["category"], e["attack"], e["method"]))
        return out

    def summary_score(self, category: str, attack: str, method: str) -> float:
        for e in self.summary:
            if (e["category"], e["attack"], e["method"]) == (category, attack, method):
                return e["mean_score"]
        raise KeyError((category, attack, method))

    def _query_accounting(self) -> dict:
        """Target queries per selection method: fingerprint budget (when used) plus final line searches."""
        B = self.cfg.fingerprint_budget
        acc: dict = {}
        draws: dict = {}
        for r in self.selection_rows:
            attack = r["attack"] if r["category"] != "pooled" else "pooled"
            key = (r["category"], attack, r["method"], r["target"])
            acc[key] = acc.get(key, 0) + r["queries"]
            draws.setdefault(key, set()).add(r["draw"])
        out: dict = {}
        for (cat, attack, method, t), q in sorted(acc.items()):
            fp = B if (method in FINGERPRINT_METHODS or cat == "pooled") else 0
            per_draw = q / len(draws[(cat, attack, method, t)])
            out.setdefault(cat, {}).setdefault(attack, {}).setdefault(method, {})[t] = fp + per_draw
        # the oracle rows only count the winning line search; exhaustive evaluation is not an attacker cost
        return out

    # -- experiments -------------------------------------------------------------

    def _compute_experiments(self):
        cfg, xp = self.cfg, self.cfg.experiments
        files = []
        res: dict = {}
        curves = self.out / "curves"
        curves.mkdir(exist_ok=True)
        cands = {t: self.candidates(t) for t in self.ids}
        smallest = min(len(c) for c in cands.values())
        sizes = list(range(1, smallest + 1))

        def dump(name, obj):
            p = curves / name
            p.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
            files.append(p)

        if "matrices" in xp.run:
            res["matrices"] = self._matrix_stats()
        if "best_worst" in xp.run:
            for a in cfg.attack_ids:
                dump(f"best_worst_{a}.json", ex.experiment_best_worst_curves(
                    self.table, a, cands, self.attack_ids, sizes, xp.repetitions, cfg.seed_for(f"best-worst:{a}")))
        if "best_source" in xp.run:
            for a in cfg.attack_ids:
                dump(f"best_source_{a}.json", ex.experiment_best_source_distribution(
                    self.table, a, cands, self.attack_ids, sizes, xp.repetitions, cfg.seed_for(f"best-source:{a}")))
        if "attack_dependence" in xp.run:
            triples = [(s, t, x) for t in self.ids for s in cands[t] for x in self.attack_ids]
            res["attack_dependence"] = {}
            for a, b in xp.dependence_pairs:
                h = ex.experiment_attack_dependence(self.table, a, b, triples, xp.dependence_bins)
                dump(f"dependence_{a}_{b}.json", h)
                res["attack_dependence"][f"{a}|{b}"] = {k: h[k] for k in ("n", "b_wins_by_group", "crossover")}
        if "epsilon_sweep" in xp.run:
            res["epsilon_sweep"], f = self._epsilon_sweep(cands)
            files.append(f)
            dump("epsilon_sweep.json", res["epsilon_sweep"])
        if "ensemble_size" in xp.run:
            res["ensemble_size"], f = self._ensemble_size(cands)
            files.append(f)
            dump("ensemble_size.json", res["ensemble_size"])
        if "fingerprint_sweep" in xp.run:
            res["fingerprint_sweep"] = self._fingerprint_sweep()
            dump("fingerprint_sweep.json", res["fingerprint_sweep"])
        if "bb_convergence" in xp.run:
            res["bb_convergence"] = self._bb_convergence()
        p = self.out / "experiments.json"
        p.write_text(json.dumps(res, indent=1, sort_keys=True) + "\n")
        return files + [p]

    def _load_experiments(self):
        self.results = json.loads((self.out / "experiments.json").read_text())

    def _matrix_stats(self) -> dict:
        ex_mask = self.matrix_excluded
        out = {}
        for a in self.cfg.attack_ids:
            m = self.matrices[a]
            valid = ~ex_mask
            neg = [(self.ids[i], self.ids[j]) for i, j in zip(*np.nonzero((m < 0) & valid))]
            asym = float(np.max(np.abs(m - m.T)[valid & valid.T])) if np.any(valid & valid.T) else 0.0
            out[a] = {"negative_cells": len(neg), "valid_cells": int(valid.sum()),
                      "min": float(m[valid].min()), "max": float(m[valid].max()),
                      "mean": float(m[valid].mean()), "diagonal": np.diag(m).tolist(), "max_asymmetry": asym}
        return out

    def _epsilon_sweep(self, cands):
        cfg, xp = self.cfg, self.cfg.experiments
        a = xp.epsilon_attack
        base = cfg.transfer_config(a).epsilon
        extra = [e for e in xp.epsilons if not np.isclose(e, base, rtol=0, atol=1e-12)]
        items = [(a, s, x, e, epsilon_label(a, e)) for e in extra for s in self.ids for x in self.attack_ids]
        sweep = DistortionTable(r for rows in self._map(_transfer_item, items) for r in rows)
        p = self.out / "epsilon_sweep.csv"
        sweep.to_csv(p)

        def lookup(e, s, t):
            if e in extra:
                return sweep.lookup(epsilon_label(a, e), s, t, self.attack_ids)
            return self.table.lookup(a, s, t, self.attack_ids)

        pooled, scores = {}, {}
        for e in xp.epsilons:
            lab = epsilon_label(a, e)
            pooled[lab] = np.concatenate([lookup(e, s, t) for t in self.ids for s in cands[t]]).tolist()
            scores[lab] = {t: float(np.mean([self.score(lookup(e, s, t), t) for s in cands[t]]))
                           for t in self.ids}
        out = ex.experiment_epsilon_sweep(pooled, scores)
        out["attack"] = a
        return out, p

    def _ensemble_size(self, cands):
        cfg, xp = self.cfg, self.cfg.experiments
        a = xp.ensemble_size_attack
        targets = list(xp.ensemble_size_targets) or self.ids
        orders = {}
        wanted = []
        for t in targets:
            rng = np.random.default_rng(cfg.seed_for(f"ensemble-size:{t}"))
            orders[t] = ex.nested_pools(cands[t], rng)
            for m in range(1, len(cands[t]) + 1):
                members = tuple(sorted(orders[t][:m]))
                wanted += [(a, members, x, t) for x in self.attack_ids]
        growth_table = DistortionTable(self.ensembles)
        self._run_ensembles(wanted, growth_table)
        growth = {}
        for t in targets:
            growth[t] = [self.score(growth_table.lookup(a, "+".join(sorted(orders[t][:m])), t, self.attack_ids), t)
                         for m in range(1, len(cands[t]) + 1)]
        fit_line = {}
        for e in self.summary:
            if (e["category"], e["attack"], e["method"]) == ("ensemble", a, cfg.selection.ensemble_method):
                fit_line = e["per_target"]
        out = ex.experiment_ensemble_size(growth, fit_line)
        out.update(attack=a, orders=orders, method=cfg.selection.ensemble_method)
        p = self.out / "ensemble_growth.csv"
        keep = {(a, "+".join(sorted(orders[t][:m])), t) for t in targets for m in range(1, len(cands[t]) + 1)}
        DistortionTable(r for r in growth_table if (r.attack, r.source, r.target) in keep).to_csv(p)
        return out, p

    def _fingerprint_sweep(self) -> dict:
        sel = self.cfg.selection
        methods = sorted({sel.single_method, "modsim"})
        out = {"budgets": self.cfg.fingerprint_budgets(), "methods": methods, "scores": {}}
        for a in self.cfg.transfer_ids:
            out["scores"][a] = {m: [] for m in methods}
            for b in out["budgets"]:
                sim = self.sims[b]
                fit = self.fit[a].with_modsim(lambda s, t: sim[s, t])
                for m in methods:
                    out["scores"][a][m].append(float(np.mean(list(self.single_score(a, m, fit).values()))))
        return out

    def _bb_convergence(self) -> dict:
        long = long_bb_ref(self.cfg.convergence_budget)
        out = {"budget": self.cfg.blackbox[0].budget, "doubled": self.cfg.convergence_budget, "per_target": {}}
        for t in self.ids:
            d1 = self.table.lookup(BB_REF, NO_SOURCE, t, self.attack_ids)
            d2 = self.table.lookup(long, NO_SOURCE, t, self.attack_ids)
            wb = self.table.lookup(WB_REF, NO_SOURCE, t, self.attack_ids)
            m1, m2 = float(np.median(d1)), float(np.median(d2))
            out["per_target"][t] = {"median": m1, "median_doubled": m2, "improvement": (m1 - m2) / m1,
                                    "wb_le_bb": float(np.mean(wb <= d1))}
        imp = [v["improvement"] for v in out["per_target"].values()]
        out["max_improvement"] = max(imp)
        return out

    # -- report ------------------------------------------------------------------

    def _compute_report(self):
        from .report import export_reports

        return export_reports(self)

    def _load_report(self):
        pass


def _write_selections(rows: list[dict], path: Path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SELECTION_HEADER)
        for r in rows:
            w.writerow([r["category"], r["attack"], r["method"], r["draw"], r["target"], r["sample"], r["choice"],
                        repr(float(r["d"])), r["status"], r["queries"]])


def _read_selections(path: Path) -> list[dict]:
    import csv

    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != SELECTION_HEADER:
            raise InputError(f"unexpected selections header {reader.fieldnames}")
        return [{**r, "draw": int(r["draw"]), "sample": int(r["sample"]), "d": float(r["d"]),
                 "queries": int(r["queries"])} for r in reader]


def run(config_path: str | Path, out_dir: str | Path | None = None, workers: int | None = None,
        force: Sequence[str] = ()) -> Pipeline:
    """Run (or resume) every stage for a config file; returns the pipeline with its state loaded."""
    cfg = load_config(config_path)
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    if out is None:
        raise ConfigurationError("no output directory given and none set in the config")
    pipe = Pipeline(cfg, out, workers, Path(config_path).read_text(encoding="utf-8"))
    pipe.run(force)
    return pipe


def open_run(out_dir: str | Path, workers: int | None = None) -> Pipeline:
    """Pipeline for an existing run directory, using the config copy stored inside it."""
    out = Path(out_dir)
    cfg_path = out / "config.toml"
    if not cfg_path.exists():
        raise InputError(f"{out} holds no config.toml; is it a run directory?")
    return Pipeline(load_config(cfg_path), out, workers)
