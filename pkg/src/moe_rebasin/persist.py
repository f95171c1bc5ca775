"""Checkpoint files, report export and run manifests.

Checkpoints are JSON documents; every float array is stored as base64 of
its little-endian IEEE-754 float64 bytes together with its shape, so a
save/load round trip is bitwise exact.

CSV reports have one row per grid point (or per permutation) followed by
a single ``summary`` row whose remaining cells are ``key=value`` pairs.
Floats are written with ``repr`` and parse back exactly.
"""
from __future__ import annotations

import base64
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .lmc import BarrierReport, RankReport
from .model import MoEConfig, MoEParams, ShapeError

SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MalformedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict, name: str = "array") -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedCheckpointError(f"{name}: cannot decode array ({exc})") from None
    if len(raw) != 8 * math.prod(shape):
        raise CheckpointShapeError(
            f"{name}: {len(raw)} bytes do not fill shape {shape}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


@dataclass(eq=False)
class Checkpoint:
    params: MoEParams
    backbone_seed: int
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    @property
    def config(self) -> MoEConfig:
        return self.params.config

    def to_dict(self) -> dict:
        p = self.params
        return {
            "schema_version": self.schema_version,
            "config": p.config.to_dict(),
            "backbone_seed": self.backbone_seed,
            "gates": {"W": encode_array(p.W), "b": encode_array(p.b)},
            "experts": {k: encode_array(getattr(p, k)) for k in ("A", "u", "B", "v")},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Checkpoint":
        if not isinstance(doc, dict) or "schema_version" not in doc:
            raise MalformedCheckpointError("checkpoint has no schema_version")
        if doc["schema_version"] != SCHEMA_VERSION:
            raise CheckpointVersionError(
                f"checkpoint schema version {doc['schema_version']} is not supported "
                f"(expected {SCHEMA_VERSION})")
        try:
            config = MoEConfig.from_dict(doc["config"])
            arrays = {k: decode_array(doc["gates"][k], k) for k in ("W", "b")}
            arrays.update({k: decode_array(doc["experts"][k], k) for k in ("A", "u", "B", "v")})
            backbone_seed = int(doc["backbone_seed"])
        except (KeyError, TypeError) as exc:
            raise MalformedCheckpointError(f"checkpoint is missing field {exc}") from None
        except ValueError as exc:
            if isinstance(exc, CheckpointError):
                raise
            raise MalformedCheckpointError(str(exc)) from None
        try:
            params = MoEParams(config, **arrays)
        except ShapeError as exc:
            raise CheckpointShapeError(str(exc)) from None
        return cls(params, backbone_seed, doc.get("provenance", {}), SCHEMA_VERSION)

    def equals(self, other: "Checkpoint") -> bool:
        return (self.params.equals(other.params) and self.backbone_seed == other.backbone_seed
                and self.provenance == other.provenance)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.write_text(json.dumps(ckpt.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> Checkpoint:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedCheckpointError(f"{path}: not valid JSON ({exc})") from None
    return Checkpoint.from_dict(doc)


# -- reports ----------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _parse(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        return float(text)


def report_to_dict(report) -> dict:
    return report.to_dict()


def report_from_dict(doc: dict):
    kind = doc.get("type")
    if kind == "barrier":
        return BarrierReport.from_dict(doc)
    if kind == "rank":
        return RankReport.from_dict(doc)
    raise ValueError(f"unknown report type {kind!r}")


def _barrier_rows(report: BarrierReport):
    c = report.curve
    ch = report.chord()
    header = ["t", "loss", "chord", "accuracy", "barrier"]
    rows = []
    for j, t in enumerate(c.ts):
        acc = None if c.accuracies is None else c.accuracies[j]
        rows.append([_fmt(t), _fmt(c.losses[j]), _fmt(ch[j]), _fmt(acc), _fmt(c.losses[j] - ch[j])])
    summary = {"loss_barrier": report.loss_barrier, "loss_auc": report.loss_auc,
               "acc_barrier": report.acc_barrier, "acc_auc": report.acc_auc,
               "loss_A": report.endpoints[0], "loss_B": report.endpoints[1]}
    return header, rows, summary


def _rank_rows(report: RankReport):
    header = ["tau", "barrier", "chosen", "best"]
    rows = [[" ".join(map(str, p)), _fmt(b), str(int(p == report.chosen_tau)),
             str(int(p == report.best_tau))]
            for p, b in zip(report.permutations, report.barriers)]
    summary = {"rank": report.rank, "L_hat": report.L_hat, "L_method": report.L_method,
               "L_naive": report.L_naive, "L_top1": report.L_top1}
    return header, rows, summary


def export_report(path, report, fmt: str = "json") -> Path:
    path = Path(path)
    if fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=1), encoding="utf-8")
        return path
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    if isinstance(report, BarrierReport):
        header, rows, summary = _barrier_rows(report)
    elif isinstance(report, RankReport):
        header, rows, summary = _rank_rows(report)
    else:
        raise TypeError(f"cannot export {type(report).__name__}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
        w.writerow(["summary"] + [f"{k}={_fmt(v)}" for k, v in summary.items()])
    return path


def read_report_csv(path) -> tuple[list[dict], dict]:
    """Data rows as dicts of parsed values, plus the summary mapping."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows, summary = [], {}
        for row in reader:
            if row and row[0] == "summary":
                for cell in row[1:]:
                    key, _, value = cell.partition("=")
                    summary[key] = _parse(value)
            elif row:
                rows.append({k: (v if k == "tau" else _parse(v)) for k, v in zip(header, row)})
    return rows, summary


def write_ratio_csv(path, ratios: list[dict]) -> Path:
    """One row per model pair with the four aligned/naive ratios (x100)."""
    keys = ["pair", "loss_barrier", "loss_auc", "acc_barrier", "acc_auc"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for i, r in enumerate(ratios):
            w.writerow([str(r.get("pair", i))] + [_fmt(r.get(k)) for k in keys[1:]])
    return Path(path)


# -- manifests --------------------------------------------------------------

@dataclass
class RunManifest:
    experiment_id: str
    checkpoints: list[str]
    grid: int = 25
    method: str | None = None
    outputs: list[str] = field(default_factory=list)

    def validate(self):
        missing = [p for p in self.checkpoints if not Path(p).is_file()]
        if missing:
            raise FileNotFoundError(f"manifest {self.experiment_id}: missing checkpoints {missing}")

    def to_dict(self) -> dict:
        return {"experiment_id": self.experiment_id, "checkpoints": list(self.checkpoints),
                "grid": self.grid, "method": self.method, "outputs": list(self.outputs)}

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(doc["experiment_id"], list(doc["checkpoints"]), int(doc.get("grid", 25)),
                   doc.get("method"), list(doc.get("outputs", [])))
