"""Run configuration: TOML loading, validation and named sub-seeds."""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

from .blackbox import BlackBoxConfig
from .errors import ConfigurationError
from .geometry import LineSearchParams
from .metrics import NO_SOURCE
from .select import SCORE_GETTERS
from .transfer import TRANSFER_ATTACKS, TransferConfig
from .whitebox import WHITEBOX_ATTACKS, WhiteBoxConfig
from .zoo import ArchSpec, ModelSpec, TrainingParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CONFIG_DIR = Path(__file__).parent / "configs"

EXPERIMENTS = (
    "matrices",
    "best_worst",
    "best_source",
    "attack_dependence",
    "epsilon_sweep",
    "ensemble_size",
    "fingerprint_sweep",
    "bb_convergence",
)


def sub_seed(root: int, name: str) -> int:
    """Stable 32-bit seed for a named stage or item, derived from the root seed."""
    h = hashlib.sha256(f"{int(root)}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")


def parse_real(value: Any, key: str = "value") -> float:
    """Number, or a string fraction such as ``"8/255"``."""
    if isinstance(value, bool):
        raise ConfigurationError(f"{key}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            pass
    raise ConfigurationError(f"{key}: cannot read {value!r} as a number")


@dataclass(frozen=True)
class DatasetParams:
    n_train: int = 1500
    n_eval: int = 1000
    K: int = 5
    N: int = 256


@dataclass(frozen=True)
class SelectionParams:
    include_source: bool = False
    asr_budget: float = 8 / 255
    ensemble_k: int = 3
    large_ensemble: int = 8
    random_draws: int = 5
    single_method: str = "fit1"
    ensemble_method: str = "fit2"
    pooled_attacks: tuple[str, ...] = TRANSFER_ATTACKS + WHITEBOX_ATTACKS


@dataclass(frozen=True)
class ExperimentParams:
    run: tuple[str, ...] = EXPERIMENTS
    repetitions: int = 20
    epsilons: tuple[float, ...] = (4 / 255, 8 / 255, 16 / 255)
    epsilon_attack: str = "di"
    dependence_pairs: tuple[tuple[str, str], ...] = (("di", "deepfool"), ("di", "taig"), ("di", "dwp"))
    dependence_bins: int = 24
    fingerprint_budgets: tuple[int, ...] = (25, 50, 100, 200, 400)
    ensemble_size_attack: str = "di"
    ensemble_size_targets: tuple[str, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: DatasetParams
    training: TrainingParams
    zoo: tuple[ModelSpec, ...]
    line_search: LineSearchParams
    whitebox: tuple[WhiteBoxConfig, ...]
    transfer: tuple[TransferConfig, ...]
    blackbox: tuple[BlackBoxConfig, ...]
    convergence_budget: int
    n: int
    exclude_family: bool
    fingerprint_budget: int
    selection: SelectionParams
    experiments: ExperimentParams
    output_dir: Path | None = None
    source_path: Path | None = field(default=None, compare=False)

    @property
    def model_ids(self) -> list[str]:
        return [m.id for m in self.zoo]

    @property
    def families(self) -> dict[str, str]:
        return {m.id: m.family for m in self.zoo}

    @property
    def attack_ids(self) -> list[str]:
        """Every direction generator, transfer attacks first."""
        return [c.attack_id for c in self.transfer] + [c.attack_id for c in self.whitebox]

    @property
    def transfer_ids(self) -> list[str]:
        return [c.attack_id for c in self.transfer]

    def transfer_config(self, attack_id: str) -> TransferConfig:
        return next(c for c in self.transfer if c.attack_id == attack_id)

    def whitebox_config(self, attack_id: str) -> WhiteBoxConfig:
        return next(c for c in self.whitebox if c.attack_id == attack_id)

    def seed_for(self, name: str) -> int:
        return sub_seed(self.seed, name)

    def fingerprint_budgets(self) -> list[int]:
        return sorted({self.fingerprint_budget, *self.experiments.fingerprint_budgets})

    def canonical(self) -> dict:
        """Resolved settings as plain JSON types; the output directory is not part of it."""
        d = asdict(self)
        d.pop("output_dir")
        d.pop("source_path")
        # derived values some stages depend on instead of the raw fields
        d["fingerprint_budget_set"] = self.fingerprint_budgets()
        d["query_pool"] = max(self.fingerprint_budgets())
        return json.loads(json.dumps(d, default=str))

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def stage_digest(self, *sections: str) -> str:
        """Hash over a subset of the canonical config, so unrelated edits keep a stage valid."""
        c = self.canonical()
        blob = json.dumps({k: c[k] for k in sections}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOP_KEYS = {"seed", "output_dir", "dataset", "training", "zoo", "line_search", "evaluation", "whitebox",
             "transfer", "blackbox", "fingerprint", "selection", "experiments"}


def _section(raw: Mapping, name: str, allowed: set[str]) -> dict:
    sec = raw.get(name, {})
    if not isinstance(sec, Mapping):
        raise ConfigurationError(f"[{name}] must be a table")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigurationError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return dict(sec)


def _int(v, key: str, lo: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigurationError(f"{key}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ConfigurationError(f"{key}: must be >= {lo}, got {v}")
    return v


def from_dict(raw: Mapping[str, Any]) -> RunConfig:
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigurationError(f"unknown top-level keys: {sorted(unknown)}")
    if "seed" not in raw:
        raise ConfigurationError("config needs a root seed")
    seed = _int(raw["seed"], "seed", 0)

    ds = _section(raw, "dataset", {"n_train", "n_eval", "classes", "features"})
    dataset = DatasetParams(
        _int(ds.get("n_train", 1500), "dataset.n_train", 1),
        _int(ds.get("n_eval", 1000), "dataset.n_eval", 1),
        _int(ds.get("classes", 5), "dataset.classes", 3),
        _int(ds.get("features", 256), "dataset.features", 2),
    )

    tr = _section(raw, "training", {"epochs", "learning_rate", "momentum", "weight_decay", "accuracy_floor"})
    d = TrainingParams()
    training = TrainingParams(
        _int(tr.get("epochs", d.epochs), "training.epochs", 1),
        parse_real(tr.get("learning_rate", d.learning_rate), "training.learning_rate"),
        parse_real(tr.get("momentum", d.momentum), "training.momentum"),
        parse_real(tr.get("weight_decay", d.weight_decay), "training.weight_decay"),
        parse_real(tr.get("accuracy_floor", d.accuracy_floor), "training.accuracy_floor"),
    )

    entries = raw.get("zoo", [])
    if not isinstance(entries, list) or not entries:
        raise ConfigurationError("config needs a non-empty [[zoo]] list")
    specs = []
    for i, e in enumerate(entries):
        bad = set(e) - {"id", "family", "hidden", "activation", "label_smoothing", "seed"}
        if bad or "id" not in e or "family" not in e:
            raise ConfigurationError(f"zoo entry {i}: needs id and family, unknown keys {sorted(bad)}")
        arch = ArchSpec(tuple(e.get("hidden", ())), e.get("activation", "identity"),
                        parse_real(e.get("label_smoothing", 0.0), "label_smoothing"))
        mseed = _int(e["seed"], f"zoo[{i}].seed", 0) if "seed" in e else sub_seed(seed, f"model:{e['id']}")
        specs.append(ModelSpec(str(e["id"]), str(e["family"]), arch, mseed))

    ls = _section(raw, "line_search", {"cap", "tol", "d0"})
    line_search = LineSearchParams(
        parse_real(ls.get("cap", 50.0), "line_search.cap"),
        parse_real(ls.get("tol", 1e-4), "line_search.tol"),
        parse_real(ls.get("d0", 1e-3), "line_search.d0"),
    )

    ev = _section(raw, "evaluation", {"n", "exclude_family"})
    n = _int(ev.get("n", 60), "evaluation.n", 1)
    exclude_family = bool(ev.get("exclude_family", True))

    wb = _section(raw, "whitebox", {"attacks", "epsilon", "steps", "step_size", "overshoot", "max_iter"})
    wb_step = wb.get("step_size")
    whitebox = tuple(
        WhiteBoxConfig(
            a,
            epsilon=parse_real(wb.get("epsilon", "4/255"), "whitebox.epsilon"),
            steps=_int(wb.get("steps", 20), "whitebox.steps", 1),
            step_size=None if wb_step is None else parse_real(wb_step, "whitebox.step_size"),
            seed=sub_seed(seed, f"whitebox:{a}"),
            overshoot=parse_real(wb.get("overshoot", 0.02), "whitebox.overshoot"),
            max_iter=_int(wb.get("max_iter", 50), "whitebox.max_iter", 1),
        )
        for a in wb.get("attacks", list(WHITEBOX_ATTACKS))
    )
    if not whitebox:
        raise ConfigurationError("at least one white-box attack is needed for the reference")

    tf = _section(raw, "transfer", {"attacks", "epsilon", "steps", "step_size", "di_prob", "di_max_pad",
                                    "taig_steps", "dwp_copies", "dwp_prune"})
    tf_step = tf.get("step_size")
    transfer = tuple(
        TransferConfig(
            a,
            epsilon=parse_real(tf.get("epsilon", "8/255"), "transfer.epsilon"),
            steps=_int(tf.get("steps", 10), "transfer.steps", 1),
            step_size=None if tf_step is None else parse_real(tf_step, "transfer.step_size"),
            di_prob=parse_real(tf.get("di_prob", 0.5), "transfer.di_prob"),
            di_max_pad=parse_real(tf.get("di_max_pad", 0.1), "transfer.di_max_pad"),
            taig_steps=_int(tf.get("taig_steps", 16), "transfer.taig_steps", 1),
            dwp_copies=_int(tf.get("dwp_copies", 4), "transfer.dwp_copies", 1),
            dwp_prune=parse_real(tf.get("dwp_prune", 0.3), "transfer.dwp_prune"),
            seed=sub_seed(seed, f"transfer:{a}"),
        )
        for a in tf.get("attacks", list(TRANSFER_ATTACKS))
    )
    if not transfer:
        raise ConfigurationError("at least one transfer attack is needed")

    bb = _section(raw, "blackbox", {"budget", "restarts", "runs", "convergence_budget"})
    budget = _int(bb.get("budget", 2000), "blackbox.budget", 100)
    runs = _int(bb.get("runs", 1), "blackbox.runs", 1)
    blackbox = tuple(
        BlackBoxConfig(budget=budget, restarts=_int(bb.get("restarts", 5), "blackbox.restarts", 1),
                       seed=sub_seed(seed, f"blackbox:{r}"))
        for r in range(runs)
    )
    convergence_budget = _int(bb.get("convergence_budget", 2 * budget), "blackbox.convergence_budget", 0)

    fp = _section(raw, "fingerprint", {"budget"})
    fingerprint_budget = _int(fp.get("budget", 200), "fingerprint.budget", 10)

    se = _section(raw, "selection", set(SelectionParams.__dataclass_fields__))
    sd = SelectionParams()
    selection = SelectionParams(
        bool(se.get("include_source", sd.include_source)),
        parse_real(se.get("asr_budget", "8/255"), "selection.asr_budget"),
        _int(se.get("ensemble_k", sd.ensemble_k), "selection.ensemble_k", 1),
        _int(se.get("large_ensemble", sd.large_ensemble), "selection.large_ensemble", 1),
        _int(se.get("random_draws", sd.random_draws), "selection.random_draws", 1),
        str(se.get("single_method", sd.single_method)),
        str(se.get("ensemble_method", sd.ensemble_method)),
        tuple(se.get("pooled_attacks", [a.attack_id for a in transfer + whitebox])),
    )

    ex = _section(raw, "experiments", {"run", "repetitions", "epsilons", "epsilon_attack", "dependence_pairs",
                                       "dependence_bins", "fingerprint_budgets", "ensemble_size_attack",
                                       "ensemble_size_targets"})
    xd = ExperimentParams()
    experiments = ExperimentParams(
        tuple(ex.get("run", xd.run)),
        _int(ex.get("repetitions", xd.repetitions), "experiments.repetitions", 1),
        tuple(parse_real(e, "experiments.epsilons") for e in ex.get("epsilons", xd.epsilons)),
        str(ex.get("epsilon_attack", xd.epsilon_attack)),
        tuple(tuple(p) for p in ex.get("dependence_pairs", xd.dependence_pairs)),
        _int(ex.get("dependence_bins", xd.dependence_bins), "experiments.dependence_bins", 2),
        tuple(_int(b, "experiments.fingerprint_budgets", 10) for b in ex.get("fingerprint_budgets",
                                                                             xd.fingerprint_budgets)),
        str(ex.get("ensemble_size_attack", xd.ensemble_size_attack)),
        tuple(ex.get("ensemble_size_targets", xd.ensemble_size_targets)),
    )

    # a relative output_dir is taken relative to the working directory
    out = raw.get("output_dir")
    output_dir = None if out is None else Path(out)

    cfg = RunConfig(seed, dataset, training, tuple(specs), line_search, whitebox, transfer, blackbox,
                    convergence_budget, n, exclude_family, fingerprint_budget, selection, experiments, output_dir)
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists() and path.suffix == "" and (CONFIG_DIR / f"{path.name}.toml").exists():
        path = CONFIG_DIR / f"{path.name}.toml"  # bare name of a bundled config
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    cfg = from_dict(raw)
    object.__setattr__(cfg, "source_path", path)
    return cfg


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package (``reference`` or ``minimal``)."""
    p = CONFIG_DIR / f"{name}.toml"
    if not p.exists():
        raise ConfigurationError(f"no bundled config named {name!r}")
    return p


def validate(cfg: RunConfig) -> None:
    """Cross-field checks; everything here fails before any compute."""
    ds = cfg.dataset
    if ds.n_train < ds.K or ds.n_eval < ds.K:
        raise ConfigurationError("each split needs at least K samples")
    if cfg.n > ds.n_eval:
        raise ConfigurationError(f"evaluation.n = {cfg.n} exceeds the eval split size {ds.n_eval}")
    if cfg.n + max(cfg.fingerprint_budgets()) > ds.n_eval:
        raise ConfigurationError(
            f"eval split of {ds.n_eval} cannot hold {cfg.n} attack samples plus "
            f"{max(cfg.fingerprint_budgets())} disjoint fingerprint queries")

    ids = cfg.model_ids
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate model ids in [[zoo]]")
    if any("+" in i or i in (NO_SOURCE, "") for i in ids):
        raise ConfigurationError("model ids may not be empty, contain '+', or be the reference marker")
    fams: dict[str, int] = {}
    for m in cfg.zoo:
        fams[m.family] = fams.get(m.family, 0) + 1
    if len(fams) < 3 or min(fams.values()) < 2:
        raise ConfigurationError(f"zoo needs >= 3 families with >= 2 members each, got {fams}")
    smallest_pool = min(sum(c for f, c in fams.items() if f != fam) for fam in fams) if cfg.exclude_family \
        else len(ids) - 1

    attacks = cfg.attack_ids
    if len(set(attacks)) != len(attacks):
        raise ConfigurationError(f"attack ids must be unique, got {attacks}")
    sel = cfg.selection
    for key, method in (("single_method", sel.single_method), ("ensemble_method", sel.ensemble_method)):
        if method not in SCORE_GETTERS:
            raise ConfigurationError(f"selection.{key}: unknown method {method!r}")
    for a in sel.pooled_attacks:
        if a not in attacks:
            raise ConfigurationError(f"selection.pooled_attacks: unknown attack {a!r}")
    if sel.ensemble_k > smallest_pool or sel.large_ensemble > smallest_pool:
        raise ConfigurationError(
            f"ensemble sizes ({sel.ensemble_k}, {sel.large_ensemble}) exceed the smallest source pool "
            f"({smallest_pool})")

    ex = cfg.experiments
    for e in ex.run:
        if e not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {e!r}; choose from {EXPERIMENTS}")
    if ex.epsilon_attack not in cfg.transfer_ids:
        raise ConfigurationError(f"experiments.epsilon_attack {ex.epsilon_attack!r} is not a transfer attack")
    if ex.ensemble_size_attack not in cfg.transfer_ids:
        raise ConfigurationError(f"experiments.ensemble_size_attack {ex.ensemble_size_attack!r} "
                                 "is not a transfer attack")
    for pair in ex.dependence_pairs:
        if len(pair) != 2 or any(a not in attacks for a in pair):
            raise ConfigurationError(f"experiments.dependence_pairs: bad pair {pair!r}")
    for t in ex.ensemble_size_targets:
        if t not in ids:
            raise ConfigurationError(f"experiments.ensemble_size_targets: unknown model {t!r}")
    if not ex.epsilons or any(e <= 0 for e in ex.epsilons):
        raise ConfigurationError("experiments.epsilons must be positive")
    if "bb_convergence" in ex.run and cfg.convergence_budget <= cfg.blackbox[0].budget:
        raise ConfigurationError("blackbox.convergence_budget must exceed the reference budget")
