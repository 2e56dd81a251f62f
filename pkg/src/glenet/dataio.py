"""Line-delimited persistence for datasets, detections, and merged boxes.

Every file is UTF-8 JSON-lines: the first line is a header object naming
the schema (``{"schema": "glenet/dataset@1"}``), each following line one
record.  Writers emit canonical JSON (sorted keys, no whitespace) through
a temp file and an atomic rename, so identical inputs produce identical
bytes.  Readers fail with the offending line number, and a wrong schema
gets an explicit message naming both versions rather than a parse error.
"""

from __future__ import annotations

import json
import os
import tempfile
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DataError
from .geom import OrientedBox
from .model import LabelUncertainty, OFFSET_DIM
from .postproc import Detection
from .synth import ObjectSample

__all__ = [
    "DATASET_SCHEMA",
    "DETECTIONS_SCHEMA",
    "BOXES_SCHEMA",
    "write_jsonl",
    "read_jsonl",
    "save_dataset",
    "load_dataset",
    "save_detections",
    "load_detections",
    "save_boxes",
    "load_boxes",
]

DATASET_SCHEMA = "glenet/dataset@1"
DETECTIONS_SCHEMA = "glenet/detections@1"
BOXES_SCHEMA = "glenet/boxes@1"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def atomic_write_text(path: str, text: str) -> None:
    """Write a file through a same-directory temp name and an atomic rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_jsonl(path: str, schema: str, records: Iterable[dict]) -> None:
    lines = [_dumps({"schema": schema})]
    lines.extend(_dumps(rec) for rec in records)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_jsonl(path: str, schema: str) -> list[dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty file; expected a {schema} header line")
    records = []
    for i, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {i}: invalid JSON ({exc.msg})") from exc
        if i == 1:
            found = obj.get("schema") if isinstance(obj, dict) else None
            if found != schema:
                raise DataError(
                    f"{path}: schema mismatch: expected {schema!r}, found {found!r}; "
                    f"regenerate the file with a writer of this version or convert it")
            continue
        if not isinstance(obj, dict):
            raise DataError(f"{path}: line {i}: expected an object, got {type(obj).__name__}")
        records.append(obj)
    return records


def _floats(x, n: int, where: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape != (n,):
        raise DataError(f"{where}: expected {n} numbers, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def _sample_record(sample: ObjectSample, uncertainty: Optional[LabelUncertainty]) -> dict:
    rec = {
        "points": [[float(v) for v in p] for p in sample.points],
        "box": [float(v) for v in sample.box.as_array()],
        "metadata": {
            "seed": int(sample.seed),
            "occlusion_fraction": float(sample.occlusion_fraction),
            "distance": float(sample.distance),
            "n_original": int(sample.n_original),
            "family": int(sample.family),
        },
    }
    if uncertainty is not None:
        rec["uncertainty"] = [float(v) for v in uncertainty.variance]
    return rec


def save_dataset(path: str, samples: Sequence[ObjectSample],
                 uncertainties: Optional[Sequence[LabelUncertainty]] = None) -> None:
    """Write one record per object, with per-dimension variances when given."""
    if uncertainties is not None and len(uncertainties) != len(samples):
        raise DataError("need exactly one uncertainty per sample")
    unc = uncertainties if uncertainties is not None else [None] * len(samples)
    write_jsonl(path, DATASET_SCHEMA,
                (_sample_record(s, u) for s, u in zip(samples, unc)))


def load_dataset(path: str) -> tuple[list[ObjectSample], Optional[list[LabelUncertainty]]]:
    """Samples plus their uncertainties (None unless every record carries one)."""
    samples: list[ObjectSample] = []
    uncertainties: list[Optional[LabelUncertainty]] = []
    for i, rec in enumerate(read_jsonl(path, DATASET_SCHEMA), start=2):
        where = f"{path}: line {i}"
        try:
            meta = rec.get("metadata", {})
            points = np.asarray(rec["points"], dtype=np.float64)
            if points.ndim != 2 or points.shape[1] != 3:
                raise DataError(f"{where}: points must be a list of [x, y, z] triples")
            box = OrientedBox.from_array(_floats(rec["box"], 7, where))
            samples.append(ObjectSample(
                points=points,
                box=box,
                occlusion_fraction=float(meta["occlusion_fraction"]),
                distance=float(meta["distance"]),
                seed=int(meta["seed"]),
                n_original=int(meta["n_original"]),
                family=int(meta.get("family", -1)),
            ))
            raw_unc = rec.get("uncertainty")
            uncertainties.append(
                None if raw_unc is None
                else LabelUncertainty(_floats(raw_unc, OFFSET_DIM, where)))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: invalid record ({exc})") from exc
    carrying = sum(u is not None for u in uncertainties)
    if carrying == 0:
        return samples, None
    if carrying != len(uncertainties):
        raise DataError(
            f"{path}: {carrying} of {len(uncertainties)} records carry an uncertainty; "
            f"either all records have one or none do")
    return samples, [u for u in uncertainties if u is not None]


# ---------------------------------------------------------------------------
# Detections and merged boxes
# ---------------------------------------------------------------------------


def save_detections(path: str, dets: Sequence[Detection]) -> None:
    def record(d: Detection) -> dict:
        if d.variance is None:
            var = None
        elif np.ndim(d.variance) == 0:
            var = float(d.variance)
        else:
            var = [float(v) for v in np.asarray(d.variance)]
        return {"box": [float(v) for v in d.box.as_array()], "score": d.score,
                "variance": var}

    write_jsonl(path, DETECTIONS_SCHEMA, (record(d) for d in dets))


def load_detections(path: str) -> list[Detection]:
    out = []
    for i, rec in enumerate(read_jsonl(path, DETECTIONS_SCHEMA), start=2):
        where = f"{path}: line {i}"
        try:
            var = rec.get("variance")
            if isinstance(var, list):
                var = _floats(var, 7, where)
            out.append(Detection(
                box=OrientedBox.from_array(_floats(rec["box"], 7, where)),
                score=float(rec["score"]),
                variance=var,
            ))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: invalid record ({exc})") from exc
    return out


def save_boxes(path: str, boxes_scores: Sequence[tuple[OrientedBox, float]]) -> None:
    write_jsonl(path, BOXES_SCHEMA,
                ({"box": [float(v) for v in b.as_array()], "score": float(s)}
                 for b, s in boxes_scores))


def load_boxes(path: str) -> list[tuple[OrientedBox, float]]:
    out = []
    for i, rec in enumerate(read_jsonl(path, BOXES_SCHEMA), start=2):
        where = f"{path}: line {i}"
        try:
            out.append((OrientedBox.from_array(_floats(rec["box"], 7, where)),
                        float(rec["score"])))
        except DataError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{where}: invalid record ({exc})") from exc
    return out
