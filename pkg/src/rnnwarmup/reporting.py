"""CSV/JSON artifact emission with stable, re-runnable formatting."""

from __future__ import annotations

import csv
import json

import numpy as np


def _format(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows):
    """UTF-8, newline-terminated CSV with a stable column order.

    Refuses an empty trace so a failed run cannot leave a plausible-looking
    artifact behind.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("refusing to write an empty trace")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format(v) for v in row])


def read_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def summarize(values):
    """Mean and population std over seeds; None entries are dropped."""
    clean = [v for v in values if v is not None]
    entry = {"values": list(values), "count": len(clean)}
    if clean:
        entry["mean"] = float(np.mean(clean))
        entry["std"] = float(np.std(clean))
    else:
        entry["mean"] = None
        entry["std"] = None
    return entry
