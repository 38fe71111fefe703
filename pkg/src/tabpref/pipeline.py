"""Config-driven pipeline: every stage reads and writes files in one run directory.

Stages run in the order of :data:`STAGES`. Each stage only depends on
artifacts already on disk, so any suffix of the pipeline can be rerun after
deleting its outputs and reproduces them bit for bit.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from pathlib import Path

import numpy as np

from tabpref.augment import AugmentConfig, augment_within_buckets
from tabpref.classifiers import downstream_utility
from tabpref.constraints import DEFAULT_AUDIT_ROWS, parse_rules, violation_rate
from tabpref.dpo import DpoConfig, dpo_phase, sft_phase, split_steps
from tabpref.encoder import decode, encode, fit_bins
from tabpref.exceptions import DataError, SchemaError, TabprefError
from tabpref.metrics import fidelity_report
from tabpref.policy import TrainConfig, init_params, load_checkpoint, sample_rows, save_checkpoint
from tabpref.preference import build_preferences, correlated_pairs, read_jsonl, write_jsonl
from tabpref.privacy import AttackInput, audit
from tabpref.tabular import (
    Holdout,
    Imbalance,
    Schema,
    Shift,
    Table,
    downsample_minority,
    load_csv,
    split_holdout,
    split_shift,
)

log = logging.getLogger("tabpref.pipeline")


class ConfigError(TabprefError, ValueError):
    """Invalid or inconsistent pipeline configuration."""


DEFAULT_CONFIG = {
    "data": {
        "csv": None,
        "target": None,
        "schema": None,
        "split": {"kind": "holdout", "ratio": 0.8, "seed": 0, "train_cap": None},
    },
    "augment": {"enabled": True, "seed": 0, "k_neighbors": 5, "multiplier_override": None},
    "encoder": {"bins": 32},
    "model": {"d": 32, "h": 64, "seed": 0},
    "train": {
        "sft": {"learning_rate": 1e-2, "epochs": 3, "batch_size": 64, "seed": 0, "optimizer": "adam"},
        "dpo": {"beta": 0.1, "lam": 0.1, "learning_rate": 1e-2, "epochs": 3, "batch_size": 64, "optimizer": "adam"},
        "rho": 0.5,
        "total_steps": None,
        "seed": 0,
    },
    "preference": {
        "p_type1": 0.7,
        "pair_threshold": 0.3,
        "rules": None,
        "constraint_fraction": 0.5,
        "seed": 0,
    },
    "sample": {"n_samples": 1024, "seed": 0},
    "eval": {"metric": "auroc", "k": 5, "seed": 0},
    "privacy": {"enabled": True, "reference": None, "fpr": 0.01},
    "constraints": {"audit_rows": DEFAULT_AUDIT_ROWS, "seed": 0},
}

ARTIFACTS = {
    "train": "train.csv",
    "test": "test.csv",
    "schema": "schema.json",
    "augmented": "augmented.csv",
    "sft": "checkpoint.sft.json",
    "prefs": "prefs.jsonl",
    "dpo": "checkpoint.dpo.json",
    "synthetic": "synthetic.csv",
    "evaluation": "evaluation.json",
    "privacy": "privacy.json",
    "constraints": "constraints.json",
    "report": "report.json",
    "log": "training_log.jsonl",
    "config": "config.json",
}


# -- configuration -----------------------------------------------------------


def merge(base: dict, override: dict) -> dict:
    """Recursive dict update; unknown keys are rejected so typos do not pass silently."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "split":
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply ``"a.b.c=value"``; ``value`` is read as JSON when possible, else as a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, raw = assignment.split("=", 1)
    keys = path.strip().split(".")
    cfg = copy.deepcopy(cfg)
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {path!r}")
        node = node[k]
    if keys[-1] not in node and not (node is cfg["data"]["split"]):
        raise ConfigError(f"unknown config key {path!r}")
    node[keys[-1]] = _parse_value(raw)
    return cfg


def build_config(file_cfg: dict | None = None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the config file, then ``key=value`` overrides."""
    cfg = merge(DEFAULT_CONFIG, file_cfg or {})
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    validate_config(cfg)
    return cfg


def _sft_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"]["sft"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train.sft: {exc}") from None


def _dpo_config(cfg: dict) -> DpoConfig:
    try:
        return DpoConfig(**cfg["train"]["dpo"], rho=cfg["train"]["rho"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train.dpo: {exc}") from None


def _split_spec(cfg: dict):
    split = dict(cfg["data"]["split"])
    kind = split.pop("kind", "holdout")
    try:
        if kind == "holdout":
            return Holdout(**split)
        if kind == "imbalance":
            return Imbalance(**split)
        if kind == "shift":
            return Shift(split["split_column"], frozenset(split["train_values"]))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"data.split: {exc}") from None
    raise ConfigError(f"data.split.kind must be holdout, imbalance or shift, got {kind!r}")


def validate_config(cfg: dict) -> None:
    _sft_config(cfg)
    _dpo_config(cfg)
    _split_spec(cfg)
    if cfg["encoder"]["bins"] < 1:
        raise ConfigError("encoder.bins must be >= 1")
    if not 0.0 <= cfg["preference"]["p_type1"] <= 1.0:
        raise ConfigError("preference.p_type1 must lie in [0, 1]")
    if cfg["sample"]["n_samples"] < 1:
        raise ConfigError("sample.n_samples must be >= 1")
    if cfg["eval"]["metric"] not in ("auroc", "pr_auc"):
        raise ConfigError("eval.metric must be 'auroc' or 'pr_auc'")


# -- helpers -------------------------------------------------------------------


class Run:
    """A run directory plus its configuration."""

    def __init__(self, directory, cfg: dict):
        self.dir = Path(directory)
        self.cfg = cfg

    def path(self, name: str) -> Path:
        return self.dir / ARTIFACTS[name]

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise DataError(f"missing artifact {p.name}; run the stage that produces it first")
        return p

    def schema(self) -> Schema:
        return Schema.from_json(self.need("schema").read_text(encoding="utf-8"))

    def table(self, name: str) -> Table:
        return load_csv(self.need(name), schema=self.schema())

    def write_json(self, name: str, obj) -> None:
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def read_json(self, name: str):
        return json.loads(self.need(name).read_text(encoding="utf-8"))

    def rules(self, schema: Schema):
        path = self.cfg["preference"]["rules"]
        if not path:
            return []
        return parse_rules(Path(path).read_text(encoding="utf-8"), schema)

    def read_log(self) -> list[dict]:
        p = self.path("log")
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]

    def write_log(self, entries: list[dict]) -> None:
        with open(self.path("log"), "w", encoding="utf-8") as fh:
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")


def _finite(x):
    """JSON-safe float: NaN and infinities become ``None``."""
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_finite(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


# -- stages --------------------------------------------------------------------


def stage_ingest(run: Run) -> None:
    data = run.cfg["data"]
    if not data["csv"]:
        raise ConfigError("data.csv is required")
    schema = None
    if data["schema"]:
        schema = Schema.from_json(Path(data["schema"]).read_text(encoding="utf-8"))
    table = load_csv(data["csv"], schema=schema, target=data["target"])
    spec = _split_spec(run.cfg)
    if isinstance(spec, Holdout):
        train, test = split_holdout(table, spec)
    elif isinstance(spec, Shift):
        train, test = split_shift(table, spec)
    else:
        # downsample the training side only; the real test set keeps its prevalence
        train, test = split_holdout(table, Holdout(seed=spec.seed))
        train = downsample_minority(train, spec)
    run.path("schema").write_text(train.schema.to_json() + "\n", encoding="utf-8")
    train.to_csv(run.path("train"))
    test.to_csv(run.path("test"))
    log.info("ingest: %d train rows, %d test rows", train.n_rows, test.n_rows)


def stage_augment(run: Run) -> None:
    train = run.table("train")
    a = run.cfg["augment"]
    if a["enabled"]:
        out = augment_within_buckets(train, AugmentConfig(a["k_neighbors"], a["seed"], a["multiplier_override"]))
    else:
        out = train.dropna()
    out.to_csv(run.path("augmented"))
    log.info("augment: %d -> %d rows", train.n_rows, out.n_rows)


def _encoded(run: Run):
    table = run.table("augmented")
    if table.n_rows == 0:
        raise DataError("augmented table is empty")
    return table


def _steps(run: Run, n_rows: int) -> tuple[int, int]:
    dpo = _dpo_config(run.cfg)
    total = run.cfg["train"]["total_steps"]
    if total is None:
        total = dpo.epochs * math.ceil(n_rows / dpo.batch_size)
    return split_steps(int(total), dpo.rho)


def stage_train(run: Run) -> None:
    table = _encoded(run)
    spec = fit_bins(table, run.cfg["encoder"]["bins"])
    rows = encode(table.data, spec)
    m = run.cfg["model"]
    params = init_params(spec.vocab_sizes, m["d"], m["h"], seed=m["seed"])
    n_sft, _ = _steps(run, len(rows))
    rng = np.random.default_rng([run.cfg["train"]["seed"], 0])
    entries = sft_phase(params, rows, n_sft, _sft_config(run.cfg), rng)
    save_checkpoint(run.path("sft"), params, spec)
    run.write_log(entries)
    log.info("train: %d chain-likelihood steps", n_sft)


def stage_build_prefs(run: Run) -> None:
    table = _encoded(run)
    _, spec = load_checkpoint(run.need("sft"))
    rows = encode(table.data, spec)
    p = run.cfg["preference"]
    pairs = correlated_pairs(table, p["pair_threshold"])
    tuples, stats = build_preferences(
        rows, table, spec, p["p_type1"], pairs, run.rules(table.schema),
        seed=p["seed"], constraint_fraction=p["constraint_fraction"], return_stats=True,
    )
    write_jsonl(tuples, run.path("prefs"))
    log.info("build-prefs: %s (fallbacks: type2 %d, constraint %d)",
             stats.counts, stats.type2_fallbacks, stats.constraint_fallbacks)


def stage_dpo(run: Run) -> None:
    params, spec = load_checkpoint(run.need("sft"))
    tuples = read_jsonl(run.need("prefs"))
    _, n_dpo = _steps(run, _encoded(run).n_rows)
    entries = [e for e in run.read_log() if e.get("stage") == "sft"]
    if n_dpo:
        ref = params.copy()
        rng = np.random.default_rng([run.cfg["train"]["seed"], 1])
        entries += dpo_phase(params, ref, tuples, n_dpo, _dpo_config(run.cfg), rng)
    save_checkpoint(run.path("dpo"), params, spec)
    run.write_log(entries)
    log.info("dpo: %d preference steps", n_dpo)


def _sample(run: Run, n: int, seed: int) -> Table:
    params, spec = load_checkpoint(run.need("dpo"))
    rng = np.random.default_rng(seed)
    tokens = sample_rows(params, n, rng)
    return Table(spec.schema, decode(tokens, spec, rng))


def stage_sample(run: Run) -> None:
    s = run.cfg["sample"]
    _sample(run, s["n_samples"], s["seed"]).to_csv(run.path("synthetic"))
    log.info("sample: %d rows", s["n_samples"])


def stage_evaluate(run: Run) -> None:
    synth, train, test = run.table("synthetic"), run.table("train"), run.table("test")
    e = run.cfg["eval"]
    utility = downstream_utility(synth, test, e["metric"], seed=e["seed"])
    fidelity = fidelity_report(train.dropna(), synth, e["k"])
    run.write_json("evaluation", _finite({"utility": utility.to_dict(), "fidelity": fidelity.to_dict()}))
    log.info("evaluate: mean %s %.4f, shape %.4f", e["metric"], utility.mean, fidelity.shape)


def stage_audit_privacy(run: Run) -> None:
    p = run.cfg["privacy"]
    if not p["enabled"]:
        run.write_json("privacy", {"disabled": True})
        log.info("audit-privacy: disabled")
        return
    schema = run.schema()
    ref = load_csv(p["reference"], schema=schema) if p["reference"] else None
    data = AttackInput(run.table("synthetic").dropna(), run.table("train").dropna(), run.table("test").dropna(),
                       ref.dropna() if ref is not None else None)
    report = audit(data, fpr=p["fpr"])
    run.write_json("privacy", _finite(report.to_dict()))
    log.info("audit-privacy: leakage %.4f", report.leakage)


def stage_audit_constraints(run: Run) -> None:
    schema = run.schema()
    rules = run.rules(schema)
    if not rules:
        run.write_json("constraints", {"disabled": True})
        log.info("audit-constraints: no rules configured")
        return
    c = run.cfg["constraints"]
    rows = _sample(run, c["audit_rows"], c["seed"])
    rates = violation_rate(rows, rules)
    run.write_json("constraints", {"n_rows": rows.n_rows, "violation_rate": rates})
    log.info("audit-constraints: %s", rates)


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["config", "seeds", "utility", "fidelity", "privacy", "leakage", "constraints",
                 "plot_data", "reasons"],
    "properties": {
        "config": {"type": "object"},
        "seeds": {"type": "object", "additionalProperties": {"type": "integer"}},
        "utility": {
            "type": ["object", "null"],
            "required": ["metric", "per_classifier", "mean"],
        },
        "fidelity": {"type": ["object", "null"], "required": ["shape", "corr", "alpha_precision", "beta_recall"]},
        "privacy": {"type": ["object", "null"], "required": ["attacks", "leakage", "authenticity"]},
        "leakage": {"type": ["number", "null"]},
        "constraints": {"type": ["object", "null"], "required": ["violation_rate"]},
        "plot_data": {
            "type": "object",
            "required": ["sft_loss", "dpo_margin", "dpo_frac_positive", "rho_sweep"],
        },
        "reasons": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


def emit_report(run: Run) -> dict:
    """Merge the per-stage reports into one document; absent parts are ``null`` with a reason."""
    reasons = {}

    def part(name, key=None):
        p = run.path(name)
        if not p.exists():
            reasons[key or name] = f"missing: {p.name} not found"
            return None
        doc = json.loads(p.read_text(encoding="utf-8"))
        if doc.get("disabled"):
            reasons[key or name] = "disabled"
            return None
        return doc

    evaluation = part("evaluation")
    if evaluation is None:
        reasons["utility"] = reasons["fidelity"] = reasons.pop("evaluation")
    privacy = part("privacy")
    constraints = part("constraints")
    entries = run.read_log()
    cfg = run.cfg
    report = {
        "config": cfg,
        "seeds": {
            "split": cfg["data"]["split"].get("seed", 0),
            "augment": cfg["augment"]["seed"],
            "model": cfg["model"]["seed"],
            "train": cfg["train"]["seed"],
            "preference": cfg["preference"]["seed"],
            "sample": cfg["sample"]["seed"],
            "eval": cfg["eval"]["seed"],
            "constraints": cfg["constraints"]["seed"],
        },
        "utility": evaluation["utility"] if evaluation else None,
        "fidelity": evaluation["fidelity"] if evaluation else None,
        "privacy": privacy,
        "leakage": privacy["leakage"] if privacy else None,
        "constraints": constraints,
        "plot_data": {
            "sft_loss": [e["mean_loss"] for e in entries if e["stage"] == "sft"],
            "dpo_margin": [e["mean_margin"] for e in entries if e["stage"] == "dpo"],
            "dpo_frac_positive": [e["frac_positive"] for e in entries if e["stage"] == "dpo"],
            "rho_sweep": None,
        },
        "reasons": reasons,
    }
    if privacy is None:
        reasons["leakage"] = reasons["privacy"]
    reasons["plot_data.rho_sweep"] = "single run; sweeps are assembled by the caller"
    run.write_json("report", report)
    return report


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)


STAGES = {
    "ingest": stage_ingest,
    "augment": stage_augment,
    "train": stage_train,
    "build-prefs": stage_build_prefs,
    "dpo": stage_dpo,
    "sample": stage_sample,
    "evaluate": stage_evaluate,
    "audit-privacy": stage_audit_privacy,
    "audit-constraints": stage_audit_constraints,
    "report": emit_report,
}


def open_run(directory, cfg: dict) -> Run:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    run = Run(d, cfg)
    run.write_json("config", cfg)
    return run


def run_stage(run: Run, name: str) -> None:
    if name not in STAGES:
        raise ConfigError(f"unknown stage {name!r}")
    STAGES[name](run)


def run_pipeline(cfg: dict, directory) -> Path:
    """Execute every stage in order, persisting after each; returns the run directory."""
    run = open_run(directory, cfg)
    for name in STAGES:
        run_stage(run, name)
    return run.dir
