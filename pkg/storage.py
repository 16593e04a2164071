"""
Artifact storage: CSV tables, JSON summaries, SVG figures and measure files.

Every writer is byte-deterministic for identical inputs: floats are written with
repr, JSON keys are sorted and SVG output carries no timestamp.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from errors import InvalidMeasureError  # noqa: E402
from limit import GridDensity  # noqa: E402
from model import ModelParams  # noqa: E402
from transport import DiscreteMeasure  # noqa: E402

logger = logging.getLogger(__name__)

matplotlib.rcParams["svg.hashsalt"] = "chaoskit"
matplotlib.rcParams["svg.fonttype"] = "none"

Series = Dict[str, Tuple[Sequence[float], Sequence[float]]]


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """RFC-4180 CSV with CRLF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    logger.info(f"wrote {path}")
    return path


def _jsonable(value):
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_summary(path: Path, summary: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")
    logger.info(f"wrote {path}")
    return path


def plot_series(
    path: Path,
    series: Series,
    xlabel: str,
    ylabel: str,
    title: str = "",
    logx: bool = False,
    logy: bool = False,
    scatter: bool = False,
) -> Path:
    """One line (or point cloud with scatter=True) per entry of series; SVG without a date stamp."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (x, y) in series.items():
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if scatter:
            ax.plot(x, y, label=label, linestyle="none", marker=".", markersize=3)
        else:
            ax.plot(x, y, label=label, marker="." if len(x) < 50 else None)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"wrote {path}")
    return path


def save_grid_density(path: Path, mu: GridDensity, params: Optional[ModelParams] = None) -> Path:
    """Header comment `# L=..., n_cells=..., time=..., a=..., eps=...`, then x_center,value rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    a = repr(params.a) if params else "nan"
    eps = repr(params.eps) if params else "nan"
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# L={mu.half_width!r}, n_cells={mu.n_cells}, time={mu.time!r}, a={a}, eps={eps}\r\n")
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(["x_center", "value"])
        for x, v in zip(mu.centers, mu.values):
            writer.writerow([repr(float(x)), repr(float(v))])
    logger.info(f"wrote {path}")
    return path


def _parse_header(line: str) -> Dict[str, str]:
    fields = {}
    for part in line.lstrip("#").split(","):
        if "=" in part:
            key, value = part.split("=", 1)
            fields[key.strip()] = value.strip()
    return fields


def load_grid_density(path: Path) -> GridDensity:
    with open(path, "r", encoding="utf-8", newline="") as f:
        header = _parse_header(f.readline())
        rows = list(csv.reader(f))
    try:
        half_width = float(header["L"])
        n_cells = int(header["n_cells"])
        time = float(header["time"])
    except (KeyError, ValueError) as e:
        raise InvalidMeasureError(f"{path}: malformed density header ({e})") from e
    values = np.array([float(row[1]) for row in rows[1:]])
    return GridDensity(half_width=half_width, n_cells=n_cells, values=values, time=time)


def save_discrete_measure(path: Path, measure: DiscreteMeasure) -> Path:
    header = ["weight"] + [f"x{k}" for k in range(measure.dim)]
    rows = ([w, *p] for w, p in zip(measure.weights, measure.points))
    return write_csv(path, header, rows)


def load_discrete_measure(path: Path) -> DiscreteMeasure:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    data = np.array([[float(v) for v in row] for row in rows[1:]])
    if data.ndim != 2 or data.shape[1] < 2:
        raise InvalidMeasureError(f"{path}: expected weight and at least one coordinate column")
    return DiscreteMeasure(points=data[:, 1:], weights=data[:, 0])
