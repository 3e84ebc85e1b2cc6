"""Command line entry point: ``confaudit <command> --config run.json``.

Commands: ``calibrate``, ``predict``, ``audit``, ``drift``, ``anomaly``.
Exit codes: 0 success, 1 validation error, 2 runtime error.  Set
``CONFAUDIT_LOG`` (e.g. ``INFO`` or ``DEBUG``) for log output on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np

from . import audit as audit_mod
from .anomaly import batch_detect, verdict_lines
from .conditional import IfacmPredictor, Taxonomy, mondrian_predictor
from .core import Dataset, ValidationError
from .data_io import Splits, SplitConfig, SyntheticSpec, generate, load, split
from .icp import CalibrationSet, calibrate, conformal_predictor
from .monitor import BettingConfig, DriftMonitor
from .persist import load_predictor, save_predictor
from .scorers import ExternalScoreTable, KnnClassScorer, KnnDistanceScorer, ResidualScorer

log = logging.getLogger("confaudit")

_NUM01 = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}

CONFIG_SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": ["classification", "regression"]},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "path": {"type": "string"},
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "family": {"type": "string"},
                        "params": {"type": "object"},
                        "seed": {"type": "integer", "minimum": 0},
                    },
                    "required": ["family"],
                },
                "splits": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {k: {"type": "string"} for k in ("train", "calibration", "tuning", "test")},
                    "required": ["train", "calibration"],
                },
            },
            "oneOf": [{"required": ["path"]}, {"required": ["synthetic"]}, {"required": ["splits"]}],
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": _NUM01,
                "calibration": _NUM01,
                "tuning": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "scorer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["knn_class", "residual", "knn_distance", "external"]},
                "k": {"type": "integer", "minimum": 1},
                "normalize": {"type": "boolean"},
                "difficulty_k": {"type": "integer", "minimum": 1},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "table": {"type": "string"},
            },
            "required": ["kind"],
        },
        "method": {"enum": ["icp", "mondrian", "ifacm"]},
        "methods": {"type": "array", "items": {"enum": ["icp", "mondrian", "ifacm"]}, "minItems": 1, "uniqueItems": True},
        "levels": {"type": "array", "items": _NUM01, "minItems": 1},
        "grid": {"type": "array", "items": _NUM01, "minItems": 1},
        "smoothed": {"type": "boolean"},
        "taxonomy": {"type": ["string", "object"]},
        "mondrian": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"min_size": {"type": "integer", "minimum": 1}},
        },
        "ifacm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eta": {"type": "number", "minimum": 0},
                "iterations": {"type": "integer", "minimum": 0},
                "tolerance": {"type": "number", "minimum": 0},
            },
        },
        "monitor": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "false_alarm": _NUM01,
                "betting": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {"kind": {"enum": ["power", "mixture"]}, "epsilon": _NUM01},
                },
            },
        },
        "anomaly": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"epsilon": _NUM01},
        },
        "predictor": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
    },
    "required": ["scorer"],
}


class ConfigError(ValidationError):
    def __init__(self, field: str, message: str):
        super().__init__(f"config.{field}: {message}")
        self.field = field


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"--config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"--config: invalid JSON in {path}: {exc}") from None
    errors = sorted(jsonschema.Draft7Validator(CONFIG_SCHEMA).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(where, e.message)
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


class Run:
    """Resolved configuration shared by all commands."""

    def __init__(self, cfg: dict, seed: int | None, out: str | None):
        self.cfg = cfg
        self.base = Path(cfg.get("_base", "."))
        self.seed = int(seed if seed is not None else cfg.get("seed", 0))
        self.out = Path(out) if out else _resolve(self.base, cfg.get("output_dir", "out"))
        self.levels = [float(v) for v in cfg.get("levels", [0.9])]

    def path(self, field: str, value: str) -> Path:
        p = _resolve(self.base, value)
        if not p.exists():
            raise ConfigError(field, f"file not found: {p}")
        return p

    def _check_task(self, ds: Dataset) -> Dataset:
        task = self.cfg.get("task")
        if task and ds.task and ds.task != task:
            raise ConfigError("task", f"dataset is {ds.task}, config says {task}")
        return ds

    def dataset(self) -> Dataset:
        data = self.cfg.get("data")
        if data is None:
            raise ConfigError("data", "required for this command")
        if "path" in data:
            return self._check_task(load(self.path("data.path", data["path"])))
        syn = data["synthetic"]
        try:
            ds = generate(SyntheticSpec(syn["family"], syn.get("params", {}), syn.get("seed", self.seed)))
        except ValidationError as exc:
            raise ConfigError("data.synthetic", str(exc)) from None
        return self._check_task(ds)

    def splits(self, need_tuning: bool = False) -> Splits:
        data = self.cfg.get("data")
        if data is not None and "splits" in data:
            return self._explicit_splits(data["splits"], need_tuning)
        ds = self.dataset()
        s = self.cfg.get("split", {})
        try:
            sc = SplitConfig(s.get("train", 0.5), s.get("calibration", 0.25), s.get("tuning", 0.0), self.seed)
        except ValidationError as exc:
            raise ConfigError("split", str(exc)) from None
        if need_tuning and sc.tuning <= 0:
            raise ConfigError("split.tuning", "ifacm needs a positive tuning fraction")
        return split(ds, sc)

    def _explicit_splits(self, paths: dict, need_tuning: bool) -> Splits:
        if "split" in self.cfg:
            raise ConfigError("split", "fractions cannot be combined with data.splits")
        if need_tuning and "tuning" not in paths:
            raise ConfigError("data.splits.tuning", "ifacm needs a tuning split file")
        train = self._check_task(load(self.path("data.splits.train", paths["train"])))
        order = train.labels or None
        parts = {"train": train}
        for name in ("calibration", "tuning", "test"):
            if name in paths:
                parts[name] = self._check_task(load(self.path(f"data.splits.{name}", paths[name]), label_order=order))
            else:
                parts[name] = train.take([])
        seen: set = set()
        for name, part in parts.items():
            if part.ids == tuple(str(i) for i in range(len(part))):
                continue  # file had no example_id column
            if seen & set(part.ids):
                raise ConfigError(f"data.splits.{name}", "example ids overlap another split")
            seen |= set(part.ids)
        return Splits(**parts)

    def scorer(self, train: Dataset):
        s = self.cfg["scorer"]
        kind = s["kind"]
        try:
            if kind == "knn_class":
                return KnnClassScorer(s.get("k", 1)).fit(train)
            if kind == "residual":
                return ResidualScorer(s.get("k", 5), s.get("normalize", False), s.get("difficulty_k"), s.get("beta")).fit(train)
            if kind == "knn_distance":
                return KnnDistanceScorer(s.get("k", 5)).fit(train)
            if "table" not in s:
                raise ConfigError("scorer.table", "external scorer needs a table path")
            labels = train.labels if train.task == "classification" else None
            return ExternalScoreTable.from_csv(self.path("scorer.table", s["table"]), labels=labels or None)
        except ConfigError:
            raise
        except ValidationError as exc:
            raise ConfigError("scorer", str(exc)) from None

    def taxonomy(self) -> Taxonomy:
        t = self.cfg.get("taxonomy")
        if t is None:
            raise ConfigError("taxonomy", "required for mondrian/ifacm and subgroup audits")
        try:
            if isinstance(t, str):
                return Taxonomy.from_json(self.path("taxonomy", t))
            return Taxonomy.from_dict(t)
        except ConfigError:
            raise
        except ValidationError as exc:
            raise ConfigError("taxonomy", str(exc)) from None

    def build(self, method: str, scorer, parts, levels: Sequence[float]):
        if method == "icp":
            return conformal_predictor(scorer, calibrate(scorer, parts.calibration))
        if method == "mondrian":
            m = self.cfg.get("mondrian", {})
            return mondrian_predictor(scorer, self.taxonomy(), parts.calibration, m.get("min_size", 20))
        f = self.cfg.get("ifacm", {})
        if len(parts.tuning) == 0:
            raise ConfigError("split.tuning", "ifacm needs a nonempty tuning split")
        return IfacmPredictor.fit(
            scorer, self.taxonomy(), parts.calibration, parts.tuning, levels,
            f.get("eta", 1.0), f.get("iterations", 20), f.get("tolerance", 0.01),
        )

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        p.write_text(text, encoding="utf-8")
        return p


def cmd_calibrate(run: Run, args: argparse.Namespace) -> int:
    method = run.cfg.get("method", "icp")
    parts = run.splits(need_tuning=method == "ifacm")
    scorer = run.scorer(parts.train)
    predictor = run.build(method, scorer, parts, run.levels)
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / "predictor.json"
    save_predictor(predictor, path)
    print(json.dumps({"method": method, "predictor": str(path), "n_calibration": len(parts.calibration)}, sort_keys=True))
    return 0


def _prediction_records(preds, data: Dataset) -> list[dict]:
    recs = []
    for i, p in enumerate(preds):
        rec: dict[str, Any] = {"example_id": data.ids[i], "flags": sorted(p.flags)}
        if hasattr(p, "p_values"):
            rec["p_values"] = {str(k): v for k, v in p.p_values.items()}
            rec["set"] = [str(y) for y in p.p_values if y in p.labels]
        else:
            rec.update(lo=p.lo, hi=p.hi, unbounded=p.unbounded)
        recs.append(rec)
    return recs


def cmd_predict(run: Run, args: argparse.Namespace) -> int:
    if not args.input:
        raise ValidationError("--input: required for predict")
    ppath = run.cfg.get("predictor")
    path = run.path("predictor", ppath) if ppath else run.out / "predictor.json"
    if not path.exists():
        raise ConfigError("predictor", f"no calibrated predictor at {path}; run calibrate first")
    predictor = load_predictor(path)
    if not Path(args.input).exists():
        raise ValidationError(f"--input: file not found: {args.input}")
    labels = getattr(predictor.scorer, "labels", None) if predictor.scorer.task == "classification" else None
    data = load(args.input, label_order=labels or None)
    level = args.level if args.level is not None else run.levels[0]
    smoothed = run.cfg.get("smoothed", False)
    preds = predictor.predict(data, level, smoothed=smoothed, rng=_rng(run.seed, 3))
    doc = {"level": level, "smoothed": smoothed, "predictions": _prediction_records(preds, data)}
    text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    run.write("predictions.json", text)
    sys.stdout.write(text)
    return 0


def cmd_audit(run: Run, args: argparse.Namespace) -> int:
    methods = run.cfg.get("methods") or [run.cfg.get("method", "icp")]
    levels = [args.level] if args.level is not None else run.levels
    parts = run.splits(need_tuning="ifacm" in methods)
    if len(parts.test) == 0:
        raise ConfigError("split", "fractions leave no test data to audit")
    scorer = run.scorer(parts.train)
    smoothed = run.cfg.get("smoothed", False)
    grid = run.cfg.get("grid", list(audit_mod.DEFAULT_GRID))
    taxonomy = run.taxonomy() if "taxonomy" in run.cfg else None
    groups = taxonomy.assign(parts.test) if taxonomy else None
    variants = {}
    report: dict[str, Any] = {"seed": run.seed, "n_test": len(parts.test), "methods": {}}
    for method in methods:
        variant_levels = sorted(set(levels) | set(grid)) if method == "ifacm" else levels
        predictor = run.build(method, scorer, parts, variant_levels)
        variants[method] = predictor
        per_level = []
        for level in levels:
            rep = audit_mod.audit(predictor, parts.test, level, groups, None, smoothed, _rng(run.seed, 4))
            per_level.append(rep.to_dict())
        curve = audit_mod.calibration_curve(predictor, parts.test, grid, smoothed, _rng(run.seed, 5))
        run.write(f"calibration_curve_{method}.csv", curve.to_csv())
        report["methods"][method] = {"audits": per_level, "calibration_curve": [p.__dict__ for p in curve.points]}
    if taxonomy is not None:
        sub = audit_mod.subgroup_bias_report(variants, parts.test, taxonomy, levels, smoothed, _rng(run.seed, 6))
        run.write("subgroup_table.csv", sub.to_csv())
        report["subgroups"] = sub.to_dict()
        sys.stdout.write(sub.to_csv())
    run.write("audit_report.json", audit_mod.dumps(report) + "\n")
    return 0


def cmd_drift(run: Run, args: argparse.Namespace) -> int:
    if not args.stream:
        raise ValidationError("--stream: required for drift")
    if not Path(args.stream).exists():
        raise ValidationError(f"--stream: file not found: {args.stream}")
    parts = run.splits()
    scorer = run.scorer(parts.train)
    reference = scorer.scores(parts.calibration)
    mcfg = run.cfg.get("monitor", {})
    b = mcfg.get("betting", {})
    betting = BettingConfig(b.get("kind", "mixture"), b.get("epsilon", 0.5))
    monitor = DriftMonitor(scorer, mcfg.get("false_alarm", 0.05), betting, int(_rng(run.seed, 7).integers(2**63 - 1)), reference)
    labels = parts.train.labels if parts.train.task == "classification" else None
    stream = load(args.stream, label_order=labels or None)
    lines = [line + "\n" for line in monitor.run(iter(stream))]
    run.write("drift.jsonl", "".join(lines))
    sys.stdout.writelines(lines)
    return 0


def cmd_anomaly(run: Run, args: argparse.Namespace) -> int:
    if not args.input:
        raise ValidationError("--input: required for anomaly")
    if not Path(args.input).exists():
        raise ValidationError(f"--input: file not found: {args.input}")
    parts = run.splits()
    scorer = run.scorer(parts.train)
    if len(parts.calibration) == 0:
        raise ConfigError("split.calibration", "reference split is empty")
    reference = CalibrationSet.from_scores(scorer.scores(parts.calibration), ids=parts.calibration.ids)
    eps = run.cfg.get("anomaly", {}).get("epsilon", 0.05)
    labels = parts.train.labels if parts.train.task == "classification" else None
    batch = load(args.input, label_order=labels or None)
    verdicts, summary = batch_detect(reference, batch, scorer, eps, _rng(run.seed, 8))
    lines = [line + "\n" for line in verdict_lines(verdicts)]
    run.write("anomaly.jsonl", "".join(lines))
    run.write("anomaly_summary.json", json.dumps(summary.to_dict(), sort_keys=True) + "\n")
    sys.stdout.writelines(lines)
    return 0


COMMANDS = {
    "calibrate": cmd_calibrate,
    "predict": cmd_predict,
    "audit": cmd_audit,
    "drift": cmd_drift,
    "anomaly": cmd_anomaly,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="confaudit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides config output_dir)")
        if name in ("predict", "anomaly"):
            p.add_argument("--input", help="CSV of examples")
        if name == "drift":
            p.add_argument("--stream", help="CSV of stream rows in arrival order")
        if name in ("predict", "audit"):
            p.add_argument("--level", type=float, help="confidence level")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("CONFAUDIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ValidationError("--seed: must be a nonnegative integer")
        level = getattr(args, "level", None)
        if level is not None and not 0 < level < 1:
            raise ValidationError("--level: must lie in (0, 1)")
        run = Run(load_config(args.config), args.seed, args.out)
        return COMMANDS[args.command](run, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
