"""Versioned JSON files for calibrated predictors.

The file keeps everything needed to reproduce predictions: scorer
parameters (including the training data the k-NN scorers search, or the
path of an external score table), sorted calibration scores, the taxonomy
and any IFACM adjustments.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .conditional import (
    IfacmPredictor,
    IfacmState,
    MondrianClassifier,
    MondrianPredictor,
    MondrianRegressor,
    Taxonomy,
)
from .core import ValidationError
from .icp import CalibrationSet, ConformalClassifier, ConformalRegressor
from .scorers import scorer_from_dict

FORMAT = "confaudit-predictor"
VERSION = 1


def predictor_to_dict(predictor: Any) -> dict:
    d: dict = {"format": FORMAT, "version": VERSION, "scorer": predictor.scorer.to_dict()}
    if isinstance(predictor, (ConformalClassifier, ConformalRegressor)):
        d["method"] = "icp"
        d["calibration"] = predictor.calibration.scores.tolist()
    elif isinstance(predictor, (MondrianClassifier, MondrianRegressor)):
        d["method"] = "mondrian"
        d["taxonomy"] = predictor.taxonomy.to_dict()
        d["mondrian"] = predictor.mondrian.to_dict()
    elif isinstance(predictor, IfacmPredictor):
        d["method"] = "ifacm"
        d["taxonomy"] = predictor.taxonomy.to_dict()
        d["ifacm"] = {repr(lv): st.to_dict() for lv, st in sorted(predictor.states.items())}
    else:
        raise ValidationError(f"cannot persist {type(predictor).__name__}")
    d["task"] = predictor.scorer.task
    return d


def predictor_from_dict(d: dict) -> Any:
    if d.get("format") != FORMAT:
        raise ValidationError("not a calibrated-predictor file")
    if d.get("version") != VERSION:
        raise ValidationError(f"unsupported predictor file version {d.get('version')!r}")
    scorer = scorer_from_dict(d["scorer"])
    method = d.get("method")
    if method == "icp":
        cal = CalibrationSet(np.asarray(d["calibration"], dtype=float))
        return ConformalClassifier(scorer, cal) if scorer.task == "classification" else ConformalRegressor(scorer, cal)
    taxonomy = Taxonomy.from_dict(d["taxonomy"])
    if method == "mondrian":
        mp = MondrianPredictor.from_dict(d["mondrian"])
        cls = MondrianClassifier if scorer.task == "classification" else MondrianRegressor
        return cls(scorer, taxonomy, mp)
    if method == "ifacm":
        states = {float(lv): IfacmState.from_dict(st) for lv, st in d["ifacm"].items()}
        return IfacmPredictor(scorer, taxonomy, states)
    raise ValidationError(f"unknown method {method!r}")


def save_predictor(predictor: Any, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(predictor_to_dict(predictor), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_predictor(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return predictor_from_dict(json.load(fh))
