"""Mask-weighted Tenengrad sharpness, curve normalisation and sharpness traces."""
import csv
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


@dataclass(frozen=True, eq=False)
class GradientKernels:
    gx: np.ndarray = field(default_factory=lambda: _kernels.GX.copy())
    gy: np.ndarray = field(default_factory=lambda: _kernels.GY.copy())


SOBEL = GradientKernels()


def tenengrad(image, weight_Y=None):
    """Weighted mean gradient magnitude: sum(Y * |G*I|) / sum(Y).

    ``weight_Y=None`` means uniform weights.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    mag = _kernels.gradient_magnitude(image)
    if weight_Y is None:
        return float(mag.mean())
    weight_Y = np.asarray(weight_Y, dtype=np.float64)
    if weight_Y.shape != image.shape:
        raise ValueError(f"weight map shape {weight_Y.shape} != image shape {image.shape}")
    total = weight_Y.sum()
    if not total > 0:
        raise ValueError("weight map must have a positive sum")
    return float((weight_Y * mag).sum() / total)


def normalize_curve(values):
    """Affine map onto [0, 1]; constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalise an empty curve")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def normalize_against(value, lo, hi):
    """Place ``value`` on the [lo, hi] scale, clipped to [0, 1]."""
    if hi <= lo:
        return 0.0
    return float(min(max((value - lo) / (hi - lo), 0.0), 1.0))


def sharpness_curve(frames, weight_Y=None):
    return np.array([tenengrad(fr, weight_Y) for fr in frames])


def best_focus_index(stack, weight_Y=None):
    """Index of the sharpest frame; ties go to the lower index."""
    if weight_Y is None:
        weight_Y = stack.object_mask
    # np.argmax returns the first maximum
    return int(np.argmax(sharpness_curve(stack.frames, weight_Y)))


def count_local_maxima(values):
    """Number of local maxima, counting a flat run as one point."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return 0
    keep = np.concatenate([[True], np.diff(v) != 0])
    v = v[keep]
    if v.size == 1:
        return 1
    d = np.diff(v)
    rising = np.concatenate([[True], d > 0])
    falling = np.concatenate([d < 0, [True]])
    return int(np.sum(rising & falling))


@dataclass
class TraceRecord:
    step: int
    focus_dpt: float
    tenengrad: float
    normalized: float


@dataclass
class SharpnessTrace:
    episode: int
    controller: str
    records: list = field(default_factory=list)
    error: str = None

    def append(self, step, focus_dpt, tenengrad_value, normalized):
        if not 0.0 <= normalized <= 1.0:
            raise ValueError(f"normalized sharpness {normalized} outside [0, 1]")
        self.records.append(TraceRecord(step, float(focus_dpt), float(tenengrad_value), float(normalized)))

    def normalized(self):
        return np.array([r.normalized for r in self.records])

    def focus(self):
        return np.array([r.focus_dpt for r in self.records])


CSV_COLUMNS = ("episode", "controller", "step", "focus_dpt", "tenengrad", "normalized")


def write_traces_csv(path, traces):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for tr in traces:
            for r in tr.records:
                w.writerow([tr.episode, tr.controller, r.step, repr(r.focus_dpt),
                            repr(r.tenengrad), repr(r.normalized)])


def read_traces_csv(path):
    traces = {}
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
        for row in rd:
            key = (int(row["episode"]), row["controller"])
            tr = traces.setdefault(key, SharpnessTrace(key[0], key[1]))
            tr.append(int(row["step"]), float(row["focus_dpt"]), float(row["tenengrad"]),
                      float(row["normalized"]))
    return list(traces.values())
