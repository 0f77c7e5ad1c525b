"""Thin-lens defocus model: image distance, circle of confusion, Gaussian PSF, blur.

Focus positions on the public surface are in diopters of the tunable element.
The physical focal length seen by the thin-lens formulas is
``1 / (base_power_dpt + focus_dpt)``.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import _kernels

DEGENERATE_EPS = 1e-9  # metres; |p - f| below this means the image is at infinity


class DegenerateGeometryError(ValueError):
    """Object sits at (or numerically on) the focal point."""


@dataclass(frozen=True)
class LensConfig:
    """Physical camera description.

    The defaults are fabricated for simulation, not measured values: the
    source hardware never publishes aperture, sensor distance or pixel pitch.
    Only the -2..+3 dpt tuning range comes from the lens datasheet. With these
    values the blur radius grows by ``D * L / pixel_pitch = 3.5`` px per diopter
    of focus error, and an object at distance p is in focus at ``1/p - 2`` dpt.
    """

    aperture_radius_D: float = 0.0035
    image_plane_L: float = 0.1
    focus_min_dpt: float = -2.0
    focus_max_dpt: float = 3.0
    pixel_pitch: float = 1e-4
    base_power_dpt: float = 12.0

    def __post_init__(self):
        if not (self.aperture_radius_D > 0 and self.image_plane_L > 0 and self.pixel_pitch > 0):
            raise ValueError("aperture_radius_D, image_plane_L and pixel_pitch must be > 0")
        if not self.focus_min_dpt < self.focus_max_dpt:
            raise ValueError("focus_min_dpt must be < focus_max_dpt")
        if self.base_power_dpt + self.focus_min_dpt <= 0:
            raise ValueError("total optical power must stay positive over the focus range")

    def clamp(self, focus_dpt):
        return min(max(float(focus_dpt), self.focus_min_dpt), self.focus_max_dpt)

    def focal_length(self, focus_dpt):
        """Focal length in metres for a focus command in diopters."""
        return 1.0 / (self.base_power_dpt + focus_dpt)

    def in_focus_dpt(self, distance_p):
        """Focus command that images an object at ``distance_p`` onto the sensor."""
        return 1.0 / self.image_plane_L + 1.0 / distance_p - self.base_power_dpt

    def distance_for_focus(self, focus_dpt):
        """Inverse of :meth:`in_focus_dpt`."""
        vergence = focus_dpt + self.base_power_dpt - 1.0 / self.image_plane_L
        if vergence <= 0:
            raise ValueError(f"no finite object distance is in focus at {focus_dpt} dpt")
        return 1.0 / vergence

    def blur_px_per_dpt(self):
        return self.aperture_radius_D * self.image_plane_L / self.pixel_pitch


@dataclass(frozen=True)
class ObjectPose:
    distance_p: float
    lateral_x: int = 0
    lateral_y: int = 0

    def __post_init__(self):
        if not self.distance_p > 0:
            raise ValueError("distance_p must be > 0")


@dataclass(frozen=True, eq=False)
class PsfKernel:
    radius_R_px: float
    taps: np.ndarray
    # 1-D factor when taps == outer(profile, profile); enables the separable path
    profile: np.ndarray = None

    @property
    def size(self):
        return self.taps.shape[0]


def image_distance(f, p):
    """Thin-lens conjugate q = f p / (p - f)."""
    if f <= 0 or p <= 0:
        raise ValueError("focal length and object distance must be > 0")
    if abs(p - f) < DEGENERATE_EPS:
        raise DegenerateGeometryError(f"object at the focal point (p={p}, f={f}): image at infinity")
    return f * p / (p - f)


def coc_radius(lens, f, p):
    """Blur-circle radius in metres for focal length ``f`` and object distance ``p``."""
    if f <= 0 or p <= 0:
        raise ValueError("focal length and object distance must be > 0")
    L = lens.image_plane_L
    return lens.aperture_radius_D * abs(L * p - f * (L + p)) / (f * p)


def coc_radius_px(lens, focus_dpt, distance_p):
    return coc_radius(lens, lens.focal_length(focus_dpt), distance_p) / lens.pixel_pitch


def auto_kernel_size(radius_R_px):
    return 2 * int(math.ceil(3.0 * radius_R_px)) + 1


def psf_kernel(radius_R_px, size=None):
    """Sampled Gaussian exp(-(x^2+y^2)/R^2), renormalised to unit sum.

    The continuous prefactor 1/sqrt(pi R^2) does not give unit mass, so it is
    dropped and the discrete taps are rescaled to sum to 1 instead.

    ``size`` defaults to the smallest odd support covering 3R on each side.
    """
    if radius_R_px < 0:
        raise ValueError("radius must be >= 0")
    if size is None:
        size = auto_kernel_size(radius_R_px)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    if radius_R_px == 0:
        profile = (x == 0).astype(np.float64)
    else:
        # (x/R)^2 rather than x^2/R^2: R^2 underflows for subnormal radii
        with np.errstate(over="ignore", divide="ignore"):
            profile = np.exp(-np.square(x / radius_R_px))
        profile /= profile.sum()
    taps = np.outer(profile, profile)
    return PsfKernel(float(radius_R_px), taps, profile)


def apply_defocus(image, kernel):
    """Convolve with the PSF using edge replication; output keeps the input range."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    if kernel.size == 1:
        return image.copy()
    if kernel.profile is not None:
        out = _kernels.separable_convolve(image, kernel.profile)
    else:
        out = _kernels.convolve2d(image, kernel.taps)
    return np.clip(out, image.min(), image.max())
