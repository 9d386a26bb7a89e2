"""Dice metric, per-patient aggregation, and model-comparison report tables."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cyclegan import DatasetStats
from .dataio import Manifest
from .errors import DataError, DimensionMismatchError, ParameterError
from .imaging import BinaryMask, Domain, Image2D
from .segmentation import UNet, predict_mask


def dice(pred: BinaryMask | np.ndarray, gt: BinaryMask | np.ndarray) -> float:
    """2|P n T| / (|P| + |T|); two empty masks score 1 by convention, so a
    correctly empty prediction on a non-lung slice is rewarded."""
    p = pred.values if isinstance(pred, BinaryMask) else np.asarray(pred, dtype=bool)
    t = gt.values if isinstance(gt, BinaryMask) else np.asarray(gt, dtype=bool)
    if p.shape != t.shape:
        raise DimensionMismatchError(f"pred {p.shape} vs gt {t.shape}")
    total = int(p.sum()) + int(t.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / total


def pathology_amount(pathology_mask: BinaryMask, lung_mask: BinaryMask) -> float:
    """Pathological area as a percentage of lung area (0 for empty lungs)."""
    if pathology_mask.shape != lung_mask.shape:
        raise DimensionMismatchError(f"{pathology_mask.shape} vs {lung_mask.shape}")
    if np.any(pathology_mask.values & ~lung_mask.values):
        raise ParameterError("pathology mask is not contained in the lung mask")
    lung = lung_mask.count
    if lung == 0:
        return 0.0
    return 100.0 * pathology_mask.count / lung


@dataclass
class DiceResult:
    """Per-patient evaluation row."""

    patient_id: str
    mean_dice: float
    n_slices: int
    pathology_amount_pct: float

    def __post_init__(self):
        if not 0.0 <= self.mean_dice <= 1.0:
            raise ParameterError(f"mean_dice out of [0, 1]: {self.mean_dice}")


def evaluate_model(
    model: UNet,
    test_manifest: Manifest,
    stats: DatasetStats,
    threshold: float = 0.5,
) -> list[DiceResult]:
    """Per-patient mean of per-slice Dice against the manifest's lung masks.

    Pathology amount aggregates pixel counts across the patient's slices;
    slices without a recorded pathology mask count as zero pathology.
    """
    patients = test_manifest.patients()
    if not patients:
        raise DataError("test manifest has no slices")
    results = []
    for patient_id, records in patients.items():
        scores = []
        path_px = 0
        lung_px = 0
        for rec in records:
            img = test_manifest.load_image(rec)
            gt = test_manifest.load_lung_mask(rec)
            z = Image2D(stats.normalize(img.values), Domain.ZSCORED)
            pred = predict_mask(z, model, threshold)
            scores.append(dice(pred, gt))
            lung_px += gt.count
            if rec.pathology_mask is not None:
                path_px += test_manifest.load_pathology_mask(rec).count
        results.append(
            DiceResult(
                patient_id=patient_id,
                mean_dice=float(np.mean(scores)),
                n_slices=len(records),
                pathology_amount_pct=(100.0 * path_px / lung_px) if lung_px else 0.0,
            )
        )
    return results


@dataclass
class ReportRow:
    dataset: str
    patient_id: str
    model: str
    n_slices: int
    pathology_amount_pct: float
    mean_dice: float


@dataclass
class ReportTable:
    """Per-(patient, model) Dice rows plus per-model dataset means."""

    rows: list[ReportRow]

    def model_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.rows:
            seen.setdefault(r.model)
        return list(seen)

    def summary(self) -> dict[tuple[str, str], float]:
        """(dataset, model) -> mean of the row Dice scores."""
        acc: dict[tuple[str, str], list[float]] = {}
        for r in self.rows:
            acc.setdefault((r.dataset, r.model), []).append(r.mean_dice)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def to_csv(self, path: Path | str):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh,
                fieldnames=[
                    "dataset",
                    "patient_id",
                    "model",
                    "n_slices",
                    "pathology_amount_pct",
                    "mean_dice",
                ],
            )
            writer.writeheader()
            for r in self.rows:
                writer.writerow(asdict(r))

    def to_markdown(self, path: Path | str):
        """Summary table (models as columns) plus a per-patient appendix."""
        models = self.model_names()
        datasets: dict[str, dict[str, list[ReportRow]]] = {}
        for r in self.rows:
            datasets.setdefault(r.dataset, {}).setdefault(r.model, []).append(r)
        summary = self.summary()

        lines = ["# Dice score comparison", "", "## Per-dataset means", ""]
        header = ["Dataset", "Slices", "Patients"] + models
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for ds, per_model in datasets.items():
            any_rows = next(iter(per_model.values()))
            n_slices = sum(r.n_slices for r in any_rows)
            n_patients = len({r.patient_id for r in any_rows})
            cells = [ds, str(n_slices), str(n_patients)]
            for m in models:
                cells.append(f"{100.0 * summary[(ds, m)]:.2f}" if (ds, m) in summary else "/")
            lines.append("| " + " | ".join(cells) + " |")

        lines += ["", "## Per-patient scores", ""]
        header = ["Dataset", "Patient", "Pathology amount %"] + models
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for ds, per_model in datasets.items():
            by_patient: dict[str, dict[str, ReportRow]] = {}
            for m, rows in per_model.items():
                for r in rows:
                    by_patient.setdefault(r.patient_id, {})[m] = r
            for pid in sorted(by_patient):
                entry = by_patient[pid]
                any_row = next(iter(entry.values()))
                cells = [ds, pid, f"{any_row.pathology_amount_pct:.2f}"]
                for m in models:
                    cells.append(f"{100.0 * entry[m].mean_dice:.2f}" if m in entry else "/")
                lines.append("| " + " | ".join(cells) + " |")
        Path(path).write_text("\n".join(lines) + "\n")


def compare_models(
    models: list[tuple[str, UNet, DatasetStats]],
    test_manifest: Manifest,
    dataset_name: str = "phantom-test",
    threshold: float = 0.5,
) -> ReportTable:
    """Evaluate each named model on the same manifest; rows ordered by
    patient_id within each model."""
    rows: list[ReportRow] = []
    for name, model, stats in models:
        for res in sorted(
            evaluate_model(model, test_manifest, stats, threshold), key=lambda r: r.patient_id
        ):
            rows.append(
                ReportRow(
                    dataset=dataset_name,
                    patient_id=res.patient_id,
                    model=name,
                    n_slices=res.n_slices,
                    pathology_amount_pct=res.pathology_amount_pct,
                    mean_dice=res.mean_dice,
                )
            )
    return ReportTable(rows=rows)
