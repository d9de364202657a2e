"""Segmentation evaluation: per-class Dice and average symmetric surface
distance, plus report aggregation for experiment tables.

Boundary convention: a pixel belongs to the boundary of a class mask when
it is in the mask and at least one of its 4-neighbors is not; positions
outside the image count as non-class, so masks touching the border have
boundary pixels there. Surface distances are exact Euclidean point-set
distances between the two boundaries.

Empty masks have no surface, so their ASD is reported as missing and
excluded from aggregation rather than mapped onto a sentinel value that
would silently poison the means.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import dtns
from .losses import TISSUE_CLASSES
from .segnet import NetConfig, forward_logits
from .tensorcore import Tensor, no_grad

CLASS_NAMES = ("CSF", "GM", "WM")


def _class_mask(labels: np.ndarray, class_id: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-d, got shape {labels.shape}")
    return labels == class_id


def _check_extents(pred: np.ndarray, gt: np.ndarray) -> None:
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"extent mismatch: {np.shape(pred)} vs {np.shape(gt)}")


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Overlap ratio 2|P∩G| / (|P|+|G|); 1.0 when both empty, 0.0 when one is."""
    _check_extents(pred, gt)
    p = _class_mask(pred, class_id)
    g = _class_mask(gt, class_id)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one non-mask 4-neighbor (border is non-mask)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def asd(pred: np.ndarray, gt: np.ndarray, class_id: int, spacing: float = 1.0) -> float:
    """Average symmetric surface distance in pixel units times `spacing`."""
    _check_extents(pred, gt)
    if spacing <= 0.0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    bp = boundary_mask(_class_mask(pred, class_id))
    bg = boundary_mask(_class_mask(gt, class_id))
    if not bp.any() or not bg.any():
        raise ValueError(f"class {class_id} empty in "
                         f"{'prediction' if not bp.any() else 'reference'}")
    dist_to_g = ndimage.distance_transform_edt(~bg)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    total = float(np.sum(dist_to_g[bp]) + np.sum(dist_to_p[bg]))
    return spacing * total / (int(bp.sum()) + int(bg.sum()))


def subject_metrics(pred: np.ndarray, gt: np.ndarray,
                    classes=TISSUE_CLASSES, spacing: float = 1.0) -> dict:
    """Per-class dice and asd for one subject; asd is None when undefined."""
    out = {}
    for c in classes:
        d = dice_score(pred, gt, c)
        try:
            a = asd(pred, gt, c, spacing)
        except ValueError:
            a = None
        out[c] = {"dice": d, "asd": a}
    return out


@dataclass
class EvalReport:
    """Mean ± std of each metric across subjects, per tissue class."""

    class_names: tuple
    dice_mean: dict
    dice_std: dict
    asd_mean: dict          # None when the class had no valid subject
    asd_std: dict
    asd_missing: dict       # subjects excluded per class
    n_subjects: int
    fingerprint: str
    spacing: float = 1.0

    def mean_foreground_dice(self) -> float:
        return float(np.mean([self.dice_mean[n] for n in self.class_names]))

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return dtns.canonical_json(self.as_dict()) + "\n"

    def table(self) -> str:
        buf = io.StringIO()
        head = f"{'class':<8}{'Dice↑':>18}{'ASD↓':>22}"
        buf.write(head + "\n")
        buf.write("-" * len(head) + "\n")
        for name in self.class_names:
            dice = f"{self.dice_mean[name]:.4f} ± {self.dice_std[name]:.4f}"
            if self.asd_mean[name] is None:
                dist = f"n/a ({self.asd_missing[name]} missing)"
            else:
                dist = f"{self.asd_mean[name]:.4f} ± {self.asd_std[name]:.4f}"
                if self.asd_missing[name]:
                    dist += f" ({self.asd_missing[name]} missing)"
            buf.write(f"{name:<8}{dice:>18}{dist:>22}\n")
        buf.write(f"subjects: {self.n_subjects}\n")
        return buf.getvalue()


def _aggregate(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def report_from_pairs(pairs, fingerprint: str, spacing: float = 1.0,
                      classes=TISSUE_CLASSES, class_names=CLASS_NAMES) -> EvalReport:
    """Aggregate (prediction, reference) label-map pairs into a report."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("dataset is empty")
    dice = {n: [] for n in class_names}
    dists = {n: [] for n in class_names}
    missing = {n: 0 for n in class_names}
    for pred, labels in pairs:
        for c, name in zip(classes, class_names):
            dice[name].append(dice_score(pred, labels, c))
            try:
                dists[name].append(asd(pred, labels, c, spacing))
            except ValueError:
                missing[name] += 1
    dice_stats = {n: _aggregate(dice[n]) for n in class_names}
    asd_stats = {n: _aggregate(dists[n]) for n in class_names}
    return EvalReport(
        class_names=tuple(class_names),
        dice_mean={n: dice_stats[n][0] for n in class_names},
        dice_std={n: dice_stats[n][1] for n in class_names},
        asd_mean={n: asd_stats[n][0] for n in class_names},
        asd_std={n: asd_stats[n][1] for n in class_names},
        asd_missing=missing,
        n_subjects=len(pairs),
        fingerprint=fingerprint,
        spacing=spacing,
    )


def evaluate(net: NetConfig, theta, omega, dataset,
             spacing: float = 1.0,
             classes=TISSUE_CLASSES, class_names=CLASS_NAMES) -> EvalReport:
    """Argmax of the finest-scale logits per subject, aggregated per class."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    pairs = []
    for image, labels in dataset:
        with no_grad():
            logits = forward_logits(net, theta, omega, Tensor(np.asarray(image)[None]))
        pairs.append((np.argmax(logits[-1].data[0], axis=0), labels))
    digest = hashlib.sha256(dtns.canonical_json(
        {"net": asdict(net), "n_subjects": len(dataset), "spacing": spacing}
    ).encode()).hexdigest()[:12]
    return report_from_pairs(pairs, digest, spacing, classes, class_names)


def write_report_files(report: EvalReport, directory, stem: str = "report") -> list:
    """Emit JSON, aligned table, CSV, and a bar-chart figure for one report."""
    from pathlib import Path

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = []

    jp = root / f"{stem}.json"
    dtns.atomic_write(jp, report.to_json().encode())
    paths.append(jp)

    tp = root / f"{stem}.txt"
    dtns.atomic_write(tp, report.table().encode())
    paths.append(tp)

    rows = ["class,dice_mean,dice_std,asd_mean,asd_std,asd_missing"]
    for n in report.class_names:
        am = "" if report.asd_mean[n] is None else f"{report.asd_mean[n]:.6f}"
        as_ = "" if report.asd_std[n] is None else f"{report.asd_std[n]:.6f}"
        rows.append(f"{n},{report.dice_mean[n]:.6f},{report.dice_std[n]:.6f},"
                    f"{am},{as_},{report.asd_missing[n]}")
    cp = root / f"{stem}.csv"
    dtns.atomic_write(cp, ("\n".join(rows) + "\n").encode())
    paths.append(cp)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(report.class_names)
    x = np.arange(len(names))
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    axes[0].bar(x, [report.dice_mean[n] for n in names],
                yerr=[report.dice_std[n] for n in names],
                color="#4878a8", capsize=4)
    axes[0].set_xticks(x, names)
    axes[0].set_ylim(0.0, 1.05)
    axes[0].set_title("Dice↑")
    have = [n for n in names if report.asd_mean[n] is not None]
    hx = np.arange(len(have))
    axes[1].bar(hx, [report.asd_mean[n] for n in have],
                yerr=[report.asd_std[n] for n in have],
                color="#a85448", capsize=4)
    axes[1].set_xticks(hx, have)
    axes[1].set_title("ASD↓ (pixels)")
    fig.suptitle(f"{report.n_subjects} subjects  [{report.fingerprint}]")
    fig.tight_layout()
    fp = root / f"{stem}.png"
    # metadata stripped so reruns produce byte-identical figures
    fig.savefig(fp, dpi=120, metadata={"Software": None})
    plt.close(fig)
    paths.append(fp)
    return paths


def brute_force_asd(pred: np.ndarray, gt: np.ndarray, class_id: int,
                    spacing: float = 1.0) -> float:
    """All-pairs reference implementation; only sensible at toy sizes."""
    _check_extents(pred, gt)
    bp = boundary_mask(_class_mask(pred, class_id))
    bg = boundary_mask(_class_mask(gt, class_id))
    if not bp.any() or not bg.any():
        raise ValueError(f"class {class_id} empty")
    pp = np.argwhere(bp).astype(np.float64)
    gg = np.argwhere(bg).astype(np.float64)

    def directed(src, dst):
        d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(-1)
        return np.sqrt(d2.min(axis=1))

    total = float(np.sum(directed(pp, gg)) + np.sum(directed(gg, pp)))
    return spacing * total / (len(pp) + len(gg))


def mean_std(values) -> tuple:
    """Population mean and std used throughout report aggregation."""
    return _aggregate(list(values))
