"""Report writers: JSON records, CSV curves and PGM heatmaps with a scale sidecar."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import pnm


def _jsonable(x):
    if isinstance(x, dict):
        return {(",".join(map(str, k)) if isinstance(k, tuple) else str(k)): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, set, frozenset)):
        items = sorted(x) if isinstance(x, (set, frozenset)) else x
        return [_jsonable(v) for v in items]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def write_json(path, kind: str, config: dict, records, **extra) -> Path:
    """``{"kind", "config", "records", ...}`` with tuple keys flattened to "l,h"."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"kind": kind, "config": _jsonable(config), "records": _jsonable(records), **_jsonable(extra)}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_curve_csv(path, curves: dict[str, list[float]], x_name: str = "layer", start: int = 1) -> Path:
    """Long-format CSV ``layer,group,value`` for per-layer curves."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow([x_name, "group", "value"])
        for g, vals in curves.items():
            for i, v in enumerate(vals):
                w.writerow([i + start, g, repr(float(v))])
    return path


def write_heatmap(path, matrix, cell: int = 8, label: str = "") -> Path:
    """Grayscale PGM (dark = high) with each matrix entry drawn as a ``cell``-pixel square.

    The sidecar ``<path>.json`` records the linear value range so pixel intensity
    can be mapped back to values.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError("heatmap needs a 2-D matrix")
    lo, hi = float(np.nanmin(m)), float(np.nanmax(m))
    span = hi - lo if hi > lo else 1.0
    norm = np.nan_to_num((m - lo) / span)
    img = 1.0 - np.kron(norm, np.ones((cell, cell)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pnm.write(path, np.round(img * 255) / 255.0)
    side = {"label": label, "colormap": "gray_r", "vmin": lo, "vmax": hi, "rows": m.shape[0], "cols": m.shape[1],
            "cell_px": cell, "pixel_to_value": "value = vmin + (1 - pixel/255) * (vmax - vmin)"}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1))
    return path
