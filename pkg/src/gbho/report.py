"""Uniform run report shared by GBHO and the baselines, with JSON round-tripping."""

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

SCHEMA_VERSION = 1


def _plain(value):
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if math.isfinite(v) else repr(v)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class RunReport:
    method: str
    problem: str
    lambda_star: np.ndarray
    beta_star: Optional[np.ndarray]
    train_loss: float
    valid_loss: float
    test_loss: float
    llo_count: float
    al_iters: int = 0
    history: list = field(default_factory=list)
    status: str = "done"
    seed: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_beta: bool = False) -> dict:
        d = asdict(self)
        if not include_beta:
            d.pop("beta_star")
        d["schema_version"] = SCHEMA_VERSION
        return _plain(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        beta = d.get("beta_star")
        return cls(
            method=d["method"],
            problem=d["problem"],
            lambda_star=np.asarray(d["lambda_star"], dtype=np.float64),
            beta_star=None if beta is None else np.asarray(beta, dtype=np.float64),
            train_loss=float(d["train_loss"]),
            valid_loss=float(d["valid_loss"]),
            test_loss=float(d["test_loss"]),
            llo_count=d["llo_count"],
            al_iters=d.get("al_iters", 0),
            history=d.get("history", []),
            status=d.get("status", "done"),
            seed=d.get("seed"),
            extra=d.get("extra", {}),
        )


def write_json_atomic(path, payload):
    """Write JSON via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_report(report: RunReport, path, include_beta: bool = False):
    write_json_atomic(path, report.to_dict(include_beta=include_beta))


def load_report(path) -> RunReport:
    with open(path) as fh:
        return RunReport.from_dict(json.load(fh))
