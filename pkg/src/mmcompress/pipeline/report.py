"""Versioned JSON run reports and the cross-stage summary table."""

from __future__ import annotations

import json
import math
from pathlib import Path

import jsonschema
import numpy as np

REPORT_VERSION = 1

_NUM = {"type": "number"}
_CURVE = {"type": "array", "items": _NUM}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["report_version", "command", "stage", "seed", "config"],
    "additionalProperties": False,
    "properties": {
        "report_version": {"const": REPORT_VERSION},
        "command": {"type": "string"},
        "stage": {"type": ["string", "null"]},
        "seed": {"type": "integer"},
        "config": {"type": "object"},
        "inputs": {"type": "object", "additionalProperties": {"type": "string"}},
        "provenance": {"type": "array", "items": {"type": "string"}},
        "checkpoint_sha256": {"type": "string"},
        "model_config": {"type": "object"},
        "params_before": {"type": "integer", "minimum": 0},
        "params_after": {"type": "integer", "minimum": 0},
        "losses": {"type": "object", "additionalProperties": {"anyOf": [_CURVE, {"type": "array", "items": _CURVE}]}},
        "eval": {"type": "object", "additionalProperties": {"type": ["number", "integer", "string", "boolean", "null"]}},
        "routing": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["step", "t", "low_res"],
                "properties": {"step": {"type": "integer"}, "t": _NUM, "low_res": {"type": "boolean"}},
            },
        },
        "flops": {"type": "object"},
        "info": {"type": "object"},
        "table": {"type": "array", "items": {"type": "object"}},
    },
}


class ReportError(Exception):
    pass


def _clean(obj):
    """Plain JSON types; non-finite floats become strings so they survive a round trip."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else repr(f)
    return obj


def build(command: str, stage: str | None, seed: int, config: dict, **fields) -> dict:
    run = {"report_version": REPORT_VERSION, "command": command, "stage": stage, "seed": int(seed), "config": config}
    run.update({k: v for k, v in fields.items() if v is not None})
    return _clean(run)


def emit_report(run: dict, path=None) -> str:
    """Validate ``run`` and serialize it; writes ``path`` when given.

    A schema violation means a command assembled a bad report, so it is an
    assertion rather than a user-facing error.
    """
    run = _clean(run)
    try:
        jsonschema.validate(run, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise AssertionError(f"report violates schema: {exc.message}") from exc
    if run.get("command") == "compress" and not run["params_after"] < run["params_before"]:
        raise AssertionError("compression stage did not reduce parameters")
    text = json.dumps(run, indent=2, sort_keys=True) + "\n"
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def load_report(path) -> dict:
    run = json.loads(Path(path).read_text())
    jsonschema.validate(run, SCHEMA)
    return run


SUMMARY_STAGES = ("teacher", "C1", "C2", "C3", "C4", "PTD", "textdistill")


def summarize(reports: list[dict]) -> list[dict]:
    """One row per stage: size, shape, held-out distillation loss and accuracy."""
    rows = []
    for stage in SUMMARY_STAGES:
        for r in reports:
            if r.get("stage") != stage:
                continue
            mc = r.get("model_config", {})
            ev = r.get("eval", {})
            rows.append({
                "stage": stage,
                "params": r.get("params_after"),
                "n_ds": mc.get("n_ds"),
                "n_ss": mc.get("n_ss"),
                "H": mc.get("H"),
                "d_H": mc.get("d_H"),
                "d": mc.get("d"),
                "steps": ev.get("N"),
                "heldout_distill": ev.get("heldout_distill"),
                "accuracy": ev.get("accuracy"),
            })
    return rows


def format_table(rows: list[dict], keys=None) -> str:
    if not rows:
        return "(empty)"
    keys = keys or list(rows[0])

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return "-" if v is None else str(v)

    grid = [[str(k) for k in keys]] + [[cell(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(row[i]) for row in grid) for i in range(len(keys))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in grid]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
