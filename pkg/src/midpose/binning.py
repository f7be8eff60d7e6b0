"""Overlapping angular bins for azimuth/elevation classification.

A bin has a nominal width ``range / n`` and is widened by ``overlap`` degrees
on each side, so its effective width is ``range / n + 2 * overlap``.  Labels
are always the nearest-centre bin; a prediction counts as correct when the
ground-truth angle lies inside the predicted bin's widened interval.

Azimuth layouts wrap around 360 degrees and centre bin 0 on the frontal view
(0 degrees).  Elevation layouts do not wrap; their centres sit in the middle
of each nominal interval so the bins tile ``[start, start + range]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

_EPS = 1e-9


@dataclass(frozen=True)
class BinSpec:
    n_bins: int
    overlap_deg: float
    range_deg: float
    wraparound: bool
    start_deg: float = 0.0
    centers: tuple = field(default=(), compare=False)

    @property
    def nominal_width(self):
        return self.range_deg / self.n_bins

    @property
    def effective_width(self):
        return self.nominal_width + 2 * self.overlap_deg

    @property
    def stop_deg(self):
        return self.start_deg + self.range_deg

    def to_dict(self):
        return {"n_bins": self.n_bins, "overlap_deg": self.overlap_deg,
                "range_deg": self.range_deg, "wraparound": self.wraparound,
                "start_deg": self.start_deg}


def make_binspec(n_bins, overlap_deg, range_deg, wraparound, start_deg=0.0):
    """Build a bin layout; only odd bin counts of at least 3 are accepted.

    Odd counts keep mirror-symmetric objects from producing identical
    silhouettes in two different bins.
    """
    if int(n_bins) != n_bins or n_bins < 3 or n_bins % 2 == 0:
        raise ConfigurationError(f"bin count must be an odd integer >= 3, got {n_bins}")
    if overlap_deg < 0:
        raise ConfigurationError("overlap must be non-negative")
    if range_deg <= 0:
        raise ConfigurationError("range must be positive")
    n_bins = int(n_bins)
    w = range_deg / n_bins
    offset = 0.0 if wraparound else 0.5
    centers = tuple(float(start_deg + (k + offset) * w) for k in range(n_bins))
    return BinSpec(n_bins, float(overlap_deg), float(range_deg), bool(wraparound), float(start_deg), centers)


def azimuth_spec(n_bins=9, overlap_deg=2.5):
    return make_binspec(n_bins, overlap_deg, 360.0, True)


def elevation_spec(n_bins=5, overlap_deg=0.0):
    return make_binspec(n_bins, overlap_deg, 90.0, False)


def _distances(angle, spec):
    c = np.asarray(spec.centers)
    if spec.wraparound:
        d = np.abs(angle - c) % spec.range_deg
        return np.minimum(d, spec.range_deg - d)
    return np.abs(angle - c)


def wrap_angle(angle, spec):
    return (angle - spec.start_deg) % spec.range_deg + spec.start_deg


def assign_bin(angle_deg, spec, clamp_log=None):
    """Index of the nearest bin centre; ties go to the lower index.

    Angles outside a non-wrapping range are clamped to the range.  Each clamp
    is logged and, when ``clamp_log`` (a list) is given, recorded there.
    """
    a = float(angle_deg)
    if spec.wraparound:
        a = wrap_angle(a, spec)
    elif a < spec.start_deg or a > spec.stop_deg:
        clamped = min(max(a, spec.start_deg), spec.stop_deg)
        log.warning("angle %.4f outside [%g, %g], clamped", a, spec.start_deg, spec.stop_deg)
        if clamp_log is not None:
            clamp_log.append(a)
        a = clamped
    d = _distances(a, spec)
    best = d.min()
    return int(np.flatnonzero(d <= best + _EPS)[0])


def covering_bins(angle_deg, spec):
    """All bins whose widened interval contains the angle."""
    a = wrap_angle(float(angle_deg), spec) if spec.wraparound else float(angle_deg)
    half = spec.effective_width / 2
    return [int(k) for k in np.flatnonzero(_distances(a, spec) <= half + _EPS)]


def is_correct(pred_bin, gt_angle_deg, spec):
    """True iff the ground-truth angle falls in the predicted bin's widened interval."""
    if not 0 <= pred_bin < spec.n_bins:
        raise ConfigurationError(f"bin {pred_bin} out of range for {spec.n_bins} bins")
    a = float(gt_angle_deg)
    if spec.wraparound:
        a = wrap_angle(a, spec)
    else:
        a = min(max(a, spec.start_deg), spec.stop_deg)
    return bool(_distances(a, spec)[pred_bin] <= spec.effective_width / 2 + _EPS)


def training_labels(angle_deg, spec, duplicate_overlap=False):
    """Training targets for one angle.

    By default the single nearest-centre bin.  With ``duplicate_overlap`` an
    angle in an overlap region yields both covering bins, so the caller can
    emit one sample per label.
    """
    if duplicate_overlap:
        return covering_bins(angle_deg, spec)
    return [assign_bin(angle_deg, spec)]
