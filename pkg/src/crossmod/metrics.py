"""Per-class volumetric Dice and average symmetric surface distance, aggregated as mean +/- std."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

_SIX = ndimage.generate_binary_structure(3, 1)


def _arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(pred, "data", pred))
    g = np.asarray(getattr(gt, "data", gt))
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def dice_score(pred, gt, c: int) -> float:
    """Dice in percent for class ``c``; 100 when the class is absent from both maps."""
    p, g = _arrays(pred, gt)
    pm, gm = p == c, g == c
    denom = int(pm.sum()) + int(gm.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int((pm & gm).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask (array border counts as outside)."""
    mask = mask.astype(bool)
    if mask.ndim != 3:
        mask = mask.reshape((1,) * (3 - mask.ndim) + mask.shape)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def asd(pred, gt, c: int, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float | None:
    """Average symmetric surface distance for class ``c``; ``None`` (N/A) if either mask is empty."""
    p, g = _arrays(pred, gt)
    pm, gm = p == c, g == c
    if not pm.any() or not gm.any():
        return None
    bp, bg = boundary(pm), boundary(gm)
    spacing = tuple(float(s) for s in spacing)[-bp.ndim:]
    d_to_g = ndimage.distance_transform_edt(~bg, sampling=spacing)[bp]
    d_to_p = ndimage.distance_transform_edt(~bp, sampling=spacing)[bg]
    return float((d_to_g.sum() + d_to_p.sum()) / (d_to_g.size + d_to_p.size))


def evaluate_case(pred, gt, classes: Sequence[int], spacing=(1.0, 1.0, 1.0)) -> dict[int, dict]:
    return {c: {"dice": dice_score(pred, gt, c), "asd": asd(pred, gt, c, spacing)} for c in classes}


@dataclass
class ClassSummary:
    dice_mean: float
    dice_std: float
    asd_mean: float | None
    asd_std: float | None
    asd_na: int
    n_cases: int


@dataclass
class MetricsReport:
    classes: dict[int, ClassSummary] = field(default_factory=dict)
    class_names: dict[int, str] = field(default_factory=dict)

    @property
    def mean_dice(self) -> float:
        """Dice averaged over the reported (foreground) classes."""
        return float(np.mean([s.dice_mean for s in self.classes.values()]))

    def name(self, c: int) -> str:
        return self.class_names.get(c, str(c))

    def rows(self) -> list[dict]:
        out = []
        for c, s in self.classes.items():
            out.append(
                {
                    "class": self.name(c),
                    "dice_mean": round(s.dice_mean, 4),
                    "dice_std": round(s.dice_std, 4),
                    "asd_mean": "N/A" if s.asd_mean is None else round(s.asd_mean, 4),
                    "asd_std": "N/A" if s.asd_std is None else round(s.asd_std, 4),
                    "asd_na": s.asd_na,
                    "n_cases": s.n_cases,
                }
            )
        return out

    def to_csv(self, path: Path | str) -> None:
        rows = self.rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def aggregate(case_reports: Sequence[Mapping[int, Mapping]], class_names: Mapping[int, str] | None = None) -> MetricsReport:
    """Mean and population std per class across cases; N/A ASDs are excluded and counted."""
    if not case_reports:
        raise ValueError("need at least one case report")
    report = MetricsReport(class_names=dict(class_names or {}))
    for c in case_reports[0]:
        dice = np.array([r[c]["dice"] for r in case_reports], dtype=np.float64)
        asds = [r[c]["asd"] for r in case_reports]
        valid = np.array([a for a in asds if a is not None], dtype=np.float64)
        report.classes[c] = ClassSummary(
            dice_mean=float(dice.mean()),
            dice_std=float(dice.std()),
            asd_mean=float(valid.mean()) if valid.size else None,
            asd_std=float(valid.std()) if valid.size else None,
            asd_na=len(asds) - valid.size,
            n_cases=len(case_reports),
        )
    return report


def _cell(mean: float | None, std: float | None) -> str:
    return "N/A" if mean is None else f"{mean:.1f}±{std:.1f}"


def comparison_rows(reports: Mapping[str, MetricsReport]) -> tuple[list[str], list[list[str]]]:
    """Table rows: one per method, columns = (Dice, ASD) per structure."""
    first = next(iter(reports.values()))
    header = ["method"]
    for c in first.classes:
        header += [f"{first.name(c)} Dice", f"{first.name(c)} ASD"]
    body = []
    for method, rep in reports.items():
        row = [method]
        for s in rep.classes.values():
            row += [_cell(s.dice_mean, s.dice_std), _cell(s.asd_mean, s.asd_std)]
        body.append(row)
    return header, body


def format_table(reports: Mapping[str, MetricsReport]) -> str:
    header, body = comparison_rows(reports)
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_table_csv(reports: Mapping[str, MetricsReport], path: Path | str) -> None:
    header, body = comparison_rows(reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(body)
