"""Dice overlap and average symmetric surface distance for 2D label maps."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import DimensionError, UndefinedMetricError


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|a∩b| / (|a| + |b|); two empty masks score 1."""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


_CROSS = ndimage.generate_binary_structure(2, 1)


def boundary_mask(m) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Pixels outside the image count as background.
    """
    m = np.asarray(m, dtype=bool)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return m & ~interior


def extract_boundary(m) -> np.ndarray:
    """Boundary pixel coordinates as a K×2 array of (row, col)."""
    return np.argwhere(boundary_mask(m))


def _surface_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from every pixel to the nearest dst boundary pixel, read at src
    field_ = ndimage.distance_transform_edt(~dst)
    return field_[src]


def assd(a, b) -> float:
    """Average symmetric surface distance in pixels (4-connected boundaries)."""
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        raise UndefinedMetricError("ASSD is undefined when either mask is empty")
    sa, sb = boundary_mask(a), boundary_mask(b)
    d_ab = _surface_distances(sa, sb)
    d_ba = _surface_distances(sb, sa)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


@dataclass
class MetricsReport:
    """Per-image, per-class Dice/ASSD with mean and population std.

    ASSD entries are ``None`` where undefined; they are left out of the
    aggregate and counted in ``assd_undefined``.
    """

    classes: list[int]
    ids: list[str]
    dice: dict[int, list[float]] = field(default_factory=dict)
    assd: dict[int, list[float | None]] = field(default_factory=dict)
    seconds: list[float] | None = None

    def summary(self) -> dict[str, dict[str, float | int | None]]:
        out = {}
        for k in self.classes:
            d = np.asarray(self.dice[k], dtype=float)
            s = np.asarray([v for v in self.assd[k] if v is not None], dtype=float)
            out[str(k)] = {
                "dice_mean": float(d.mean()) if d.size else None,
                "dice_std": float(d.std()) if d.size else None,
                "assd_mean": float(s.mean()) if s.size else None,
                "assd_std": float(s.std()) if s.size else None,
                "assd_undefined": int(sum(v is None for v in self.assd[k])),
                "n": int(d.size),
            }
        return out

    def to_dict(self) -> dict:
        images = []
        for i, ident in enumerate(self.ids):
            row = {"id": ident, "dice": {}, "assd": {}}
            for k in self.classes:
                row["dice"][str(k)] = self.dice[k][i]
                row["assd"][str(k)] = self.assd[k][i]
            if self.seconds is not None:
                row["seconds"] = self.seconds[i]
            images.append(row)
        return {"classes": self.classes, "summary": self.summary(), "images": images}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        """One row per image and class: id, class, Dice(%), ASSD(pix)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "class", "dice_pct", "assd_pix"])
        for i, ident in enumerate(self.ids):
            for k in self.classes:
                a = self.assd[k][i]
                w.writerow([ident, k, f"{100 * self.dice[k][i]:.4f}", "" if a is None else f"{a:.6f}"])
        return buf.getvalue()

    def table(self) -> str:
        """Mean±std lines in the Dice(%) / ASSD(pix) layout."""
        lines = ["class  Dice(%)         ASSD(pix)"]
        for k, s in self.summary().items():
            d = f"{100 * s['dice_mean']:.2f}±{100 * s['dice_std']:.2f}" if s["dice_mean"] is not None else "n/a"
            a = f"{s['assd_mean']:.2f}±{s['assd_std']:.2f}" if s["assd_mean"] is not None else "n/a"
            lines.append(f"{k:<6} {d:<15} {a}")
        return "\n".join(lines)


def report(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray], classes: Sequence[int],
           ids: Sequence[str] | None = None, seconds: Sequence[float] | None = None) -> MetricsReport:
    """Evaluate label maps ``pred`` against ``gt`` for each class in ``classes``."""
    if len(pred) != len(gt):
        raise DimensionError(f"prediction batch has {len(pred)} images, ground truth {len(gt)}")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pred))]
    rep = MetricsReport(list(int(k) for k in classes), ids,
                        seconds=list(seconds) if seconds is not None else None)
    for k in rep.classes:
        rep.dice[k], rep.assd[k] = [], []
        for p, g in zip(pred, gt):
            a, b = np.asarray(p) == k, np.asarray(g) == k
            rep.dice[k].append(dice(a, b))
            try:
                rep.assd[k].append(assd(a, b))
            except UndefinedMetricError:
                rep.assd[k].append(None)
    return rep
