import csv
import json
import logging
import os
import platform
from importlib import metadata

import numpy as np

from .errors import ContractViolation
from .svgd import TrajectoryRecord

logger = logging.getLogger(__name__)


def _number(value) -> str:
    """Shortest round-tripping text for a float; the same value always yields the same bytes."""
    return repr(float(value))


def _time(value) -> str:
    """A step * dt time, rounded to 12 decimals."""
    return _number(round(float(value), 12))


def _ensure_parent(path: str):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_trajectory_csv(path: str, record: TrajectoryRecord):
    """
    Writes one row per recorded step. Header: iteration (or time),epsilon,ksd,kl.
    The kl cell is empty when no KL was recorded for that row.
    """
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["time" if record.time_based else "iteration", "epsilon", "ksd", "kl"])
        for row in record.rows:
            first = _time(row.time) if record.time_based else str(row.step)
            kl = "" if row.kl is None else _number(row.kl)
            writer.writerow([first, _number(row.epsilon), _number(row.ksd), kl])
    logger.info("Wrote %d trajectory rows to %s", len(record.rows), path)


def write_particles_csv(path: str, positions: np.ndarray):
    """One row per particle, columns x0..x{d-1}."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"x{i}" for i in range(positions.shape[1])])
        for point in positions:
            writer.writerow([_number(v) for v in point])
    logger.debug("Wrote %d particles to %s", positions.shape[0], path)


def read_points_csv(path: str) -> np.ndarray:
    """
    Reads an (n, d) point set. A first line that does not parse as numbers is taken as a header.
    """
    if not os.path.exists(path):
        raise ContractViolation(f"Points file not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        for line_no, cells in enumerate(csv.reader(f), start=1):
            cells = [c.strip() for c in cells]
            if not cells or all(c == "" for c in cells):
                continue
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                if line_no == 1:
                    continue
                raise ContractViolation(f"{path}:{line_no}: non-numeric value in {cells}")
    if not rows:
        raise ContractViolation(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ContractViolation(f"{path}: rows have differing numbers of columns {sorted(widths)}")
    return np.array(rows, dtype=float)


def package_versions() -> dict:
    versions = {"python": platform.python_version()}
    for name in ("steinflow", "numpy", "scipy"):
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def write_meta_json(path: str, config_text: str, values: dict, seed: int, extra: dict | None = None):
    """Echoes the config text and its parsed values together with the seed and package versions."""
    meta = {
        "seed": seed,
        "config": config_text,
        "values": values,
        "versions": package_versions(),
    }
    if extra:
        meta.update(extra)
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("Wrote metadata to %s", path)


def write_report_json(path: str, results: list):
    """Writes check results (objects with ``to_dict``) as a JSON array."""
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([r.to_dict() for r in results], f, indent=2)
        f.write("\n")
    logger.info("Wrote %d check result(s) to %s", len(results), path)
