"""Saliency faithfulness and localization metrics.

Every metric takes a *probability oracle*: a callable mapping one input tensor
to a probability vector over the classes.  Saliency maps are (H, W) at input
resolution; masking a pixel replaces it in every channel.
"""

from __future__ import annotations

import csv
import io as _io
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ArgumentError, ShapeError
from .io import BoundingBox
from .model import TpamModel, forward
from .train import softmax

ProbabilityOracle = Callable[[np.ndarray], np.ndarray]

PROB_EPS = 1e-12
MASS_EPS = 1e-12
TOP_FRACTION = 0.25

CSV_HEADER = ["id", "ad", "ai", "ins_auc", "del_auc", "proportion"]


class DegenerateSaliencyWarning(UserWarning):
    """An all-zero saliency map was scored."""


def tpam_oracle(model: TpamModel) -> ProbabilityOracle:
    return lambda x: softmax(forward(model, x))


def cam_oracle(head: TpamModel, extractor) -> ProbabilityOracle:
    """Probabilities of the (extractor -> head) pipeline."""
    from .cam import extract

    return lambda x: softmax(forward(head, extract(extractor, x).maps))


def _spatial(image: np.ndarray) -> tuple[int, int]:
    return image.shape[-2], image.shape[-1]


def _check_saliency(image, saliency):
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.shape != _spatial(image):
        raise ShapeError(f"saliency {saliency.shape} does not match image spatial size {_spatial(image)}")
    return saliency


def _baseline_like(image: np.ndarray, baseline) -> np.ndarray:
    if np.isscalar(baseline):
        return np.full_like(image, float(baseline))
    baseline = np.asarray(baseline, dtype=np.float64)
    if baseline.shape != image.shape:
        raise ShapeError(f"baseline {baseline.shape} does not match image {image.shape}")
    return baseline


def top_mask(saliency: np.ndarray, fraction: float = TOP_FRACTION) -> np.ndarray:
    """Pixels whose saliency reaches the (1 - fraction) quantile."""
    return saliency >= np.percentile(saliency, 100.0 * (1.0 - fraction))


def keep_top(image: np.ndarray, saliency: np.ndarray, baseline=0.0) -> np.ndarray:
    """The image on its top-25% salient pixels, the baseline everywhere else."""
    image = np.asarray(image, dtype=np.float64)
    saliency = _check_saliency(image, saliency)
    return np.where(top_mask(saliency), image, _baseline_like(image, baseline))


def _lengths(images, saliencies, classes):
    n = len(images)
    if len(saliencies) != n or len(classes) != n:
        raise ArgumentError(
            f"length mismatch: {n} images, {len(saliencies)} saliencies, {len(classes)} classes"
        )
    return n


def drop_and_increase(oracle: ProbabilityOracle, image, saliency, c: int, baseline=0.0) -> tuple[float, int]:
    """Per-image AD contribution (percent) and AI indicator."""
    image = np.asarray(image, dtype=np.float64)
    y = float(oracle(image)[c])
    o = float(oracle(keep_top(image, saliency, baseline))[c])
    ad = max(0.0, y - o) / max(y, PROB_EPS) * 100.0
    return ad, int(y < o)


def average_drop(oracle, images, saliencies, classes, baseline=0.0) -> float:
    n = _lengths(images, saliencies, classes)
    if n == 0:
        raise ArgumentError("no images to score")
    total = 0.0
    for img, sal, c in zip(images, saliencies, classes):
        total += drop_and_increase(oracle, img, sal, c, baseline)[0]
    return total / n


def average_increase(oracle, images, saliencies, classes, baseline=0.0) -> float:
    """Percentage of images whose top-25% reinsertion raises the class probability."""
    n = _lengths(images, saliencies, classes)
    if n == 0:
        raise ArgumentError("no images to score")
    hits = sum(drop_and_increase(oracle, img, sal, c, baseline)[1] for img, sal, c in zip(images, saliencies, classes))
    return 100.0 * hits / n


@dataclass
class InsDelResult:
    ins_auc: float
    del_auc: float
    fractions: np.ndarray
    ins_curve: np.ndarray
    del_curve: np.ndarray


def insertion_deletion(
    oracle: ProbabilityOracle,
    image,
    saliency,
    c: int,
    step_fraction: float = 0.01,
    baseline=0.0,
) -> InsDelResult:
    """Insertion and deletion curves over pixels ranked by descending saliency.

    Ties keep row-major order.  Each step moves ``ceil(step_fraction * pixels)``
    pixels; AUCs are trapezoidal over the fraction of pixels moved, so lie in
    [0, 1].
    """
    if not 0.0 < step_fraction <= 1.0:
        raise ArgumentError(f"step_fraction must be in (0, 1], got {step_fraction}")
    image = np.asarray(image, dtype=np.float64)
    saliency = _check_saliency(image, saliency)
    base = _baseline_like(image, baseline)
    H, W = saliency.shape
    npix = H * W
    order = np.argsort(-saliency.ravel(), kind="stable")
    per_step = max(1, int(np.ceil(step_fraction * npix - 1e-9)))

    deleting = image.copy()
    inserting = base.copy()
    flat_del = deleting.reshape(-1, npix)
    flat_ins = inserting.reshape(-1, npix)
    flat_img = image.reshape(-1, npix)
    flat_base = base.reshape(-1, npix)

    fractions = [0.0]
    del_curve = [float(oracle(deleting)[c])]
    ins_curve = [float(oracle(inserting)[c])]
    done = 0
    while done < npix:
        idx = order[done : done + per_step]
        flat_del[:, idx] = flat_base[:, idx]
        flat_ins[:, idx] = flat_img[:, idx]
        done += len(idx)
        fractions.append(done / npix)
        del_curve.append(float(oracle(deleting)[c]))
        ins_curve.append(float(oracle(inserting)[c]))
    fr = np.array(fractions)
    ins = np.array(ins_curve)
    dele = np.array(del_curve)
    return InsDelResult(float(np.trapezoid(ins, fr)), float(np.trapezoid(dele, fr)), fr, ins, dele)


def proportion(saliency, bbox: BoundingBox) -> float:
    """Percentage of (nonnegative) saliency mass inside the box; x indexes columns."""
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.ndim != 2:
        raise ShapeError(f"saliency must be (H, W), got shape {saliency.shape}")
    if saliency.min() < 0:
        raise ArgumentError("proportion needs a nonnegative saliency map")
    bbox.check(*saliency.shape)
    total = float(saliency.sum())
    if total == 0.0:
        warnings.warn("all-zero saliency map; proportion reported as 0", DegenerateSaliencyWarning)
        return 0.0
    inside = float(saliency[bbox.y_min : bbox.y_max, bbox.x_min : bbox.x_max].sum())
    return 100.0 * inside / (total + MASS_EPS)


@dataclass
class SaliencyRecord:
    image_id: str
    ad: float
    ai: int
    ins_auc: float
    del_auc: float
    proportion: Optional[float] = None


@dataclass
class SaliencyReport:
    records: list[SaliencyRecord] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        if not self.records:
            return {}
        out = {
            "ad": float(np.mean([r.ad for r in self.records])),
            "ai": 100.0 * float(np.mean([r.ai for r in self.records])),
            "ins_auc": float(np.mean([r.ins_auc for r in self.records])),
            "del_auc": float(np.mean([r.del_auc for r in self.records])),
        }
        props = [r.proportion for r in self.records if r.proportion is not None]
        out["proportion"] = float(np.mean(props)) if props else float("nan")
        return out

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.records:
            prop = "" if r.proportion is None else f"{r.proportion:.6f}"
            w.writerow([r.image_id, f"{r.ad:.6f}", r.ai, f"{r.ins_auc:.6f}", f"{r.del_auc:.6f}", prop])
        return buf.getvalue()

    def table(self) -> str:
        m = self.means()
        lines = [f"images: {len(self.records)}"]
        lines += [f"{k:>11}: {v:.4f}" for k, v in m.items()]
        return "\n".join(lines)


def evaluate_saliency(
    oracle: ProbabilityOracle,
    images: Sequence[np.ndarray],
    saliencies: Sequence[np.ndarray],
    classes: Sequence[int],
    ids: Optional[Sequence[str]] = None,
    bboxes: Optional[dict[str, BoundingBox]] = None,
    step_fraction: float = 0.01,
    baseline=0.0,
) -> SaliencyReport:
    n = _lengths(images, saliencies, classes)
    ids = [str(i) for i in range(n)] if ids is None else [str(i) for i in ids]
    report = SaliencyReport()
    for i in range(n):
        ad, ai = drop_and_increase(oracle, images[i], saliencies[i], classes[i], baseline)
        curves = insertion_deletion(oracle, images[i], saliencies[i], classes[i], step_fraction, baseline)
        prop = None
        if bboxes is not None and ids[i] in bboxes:
            prop = proportion(np.maximum(saliencies[i], 0.0), bboxes[ids[i]])
        report.records.append(SaliencyRecord(ids[i], ad, ai, curves.ins_auc, curves.del_auc, prop))
    return report
