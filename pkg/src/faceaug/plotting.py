"""Deterministic plots of loss logs and accuracy-versus-dataset-size records."""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .face_model import ContractError  # noqa: E402

LOSS_KEYS = ("adv", "cls", "id", "pose", "sym", "cycle", "total")
# Fixed metadata keeps the PNG bytes identical across runs.
_PNG_META = {"Software": None}


def read_records(path: Path) -> list[dict]:
    """Line-delimited JSON objects; any malformed line aborts with its line number."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ContractError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ContractError(f"{path}:{lineno}: record is not an object")
            for k, v in rec.items():
                if isinstance(v, float) and not math.isfinite(v):
                    raise ContractError(f"{path}:{lineno}: non-finite value for {k!r}")
            records.append(rec)
    if not records:
        raise ContractError(f"{path}: log holds no records")
    return records


def _check_numeric(records, keys, path):
    for i, rec in enumerate(records, 1):
        for k in keys:
            if not isinstance(rec.get(k), (int, float)) or isinstance(rec.get(k), bool):
                raise ContractError(f"{path}: record {i} lacks a numeric {k!r}")


def plot_losses(records: list[dict], out: Path, path="log") -> Path:
    _check_numeric(records, ["step"], path)
    keys = [k for k in LOSS_KEYS if all(k in r for r in records)]
    if not keys:
        raise ContractError(f"{path}: records carry none of the loss keys {LOSS_KEYS}")
    _check_numeric(records, keys, path)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    steps = [r["step"] for r in records]
    for k in keys:
        ax.plot(steps, [r[k] for r in records], label=k, marker="." if len(records) < 20 else None)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, ax, steps, out / "loss_curves.png")


def plot_accuracy(records: list[dict], out: Path, path="log") -> Path:
    _check_numeric(records, ["size", "accuracy"], path)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    series = sorted({str(r.get("series", "accuracy")) for r in records})
    for name in series:
        pts = sorted((r["size"], r["accuracy"]) for r in records if str(r.get("series", "accuracy")) == name)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("training images")
    ax.set_ylabel("verification accuracy")
    ax.legend(fontsize=7)
    return _save(fig, ax, [r["size"] for r in records], out / "accuracy_vs_size.png")


def _save(fig, ax, xs, target: Path) -> Path:
    lo, hi = min(xs), max(xs)
    pad = 0.5 if lo == hi else 0.02 * (hi - lo)
    ax.set_xlim(lo - pad, hi + pad)
    fig.tight_layout()
    fig.savefig(target, format="png", metadata=_PNG_META)
    plt.close(fig)
    return target


def plot_file(path: Path, out: Path) -> list[Path]:
    """Loss logs (records with ``step``) or accuracy records (``size`` and ``accuracy``)."""
    records = read_records(path)
    if "step" in records[0]:
        return [plot_losses(records, out, path)]
    if "size" in records[0]:
        return [plot_accuracy(records, out, path)]
    raise ContractError(f"{path}:1: record has neither 'step' nor 'size'")
