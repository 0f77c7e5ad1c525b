"""Procedural sharp scenes with an eye-like target and its ground-truth mask."""
import numpy as np

from . import _kernels
from .optics import psf_kernel


def _smooth_noise(rng, size, radius):
    noise = rng.standard_normal((size, size))
    out = _kernels.separable_convolve(noise, psf_kernel(radius).profile)
    out -= out.mean()
    return out / (out.std() + 1e-12)


def make_scene(size=64, seed=0):
    """Return ``(image, mask)`` with intensities in [0, 1] and a binary mask.

    The target is an elliptical iris-like patch (striated texture, dark pupil)
    on a weakly textured background. Mask = 1 inside the ellipse.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # background texture fades to a flat level at the border so that edge
    # replication under heavy blur adds no spurious gradients
    edge = np.minimum(np.arange(size), np.arange(size)[::-1]) / max(0.15 * size, 1.0)
    ramp = np.clip(edge, 0.0, 1.0)
    bg_level = rng.uniform(0.35, 0.65)
    image = bg_level + 0.04 * _smooth_noise(rng, size, 3.0) * np.outer(ramp, ramp)

    ax = rng.uniform(0.18, 0.28) * size
    ay = ax * rng.uniform(0.75, 1.0)
    margin = 0.12 * size
    cx = rng.uniform(ax + margin, size - ax - margin)
    cy = rng.uniform(ay + margin, size - ay - margin)
    ex, ey = (xx - cx) / ax, (yy - cy) / ay
    rho = np.sqrt(ex * ex + ey * ey)
    theta = np.arctan2(ey, ex)
    inside = rho <= 1.0

    n_spokes = rng.integers(8, 13)
    phase = rng.uniform(0, 2 * np.pi)
    striation = np.sin(n_spokes * theta + phase + 3.0 * rho)
    texture = 0.55 * striation + 0.45 * _smooth_noise(rng, size, rng.uniform(2.0, 3.0))
    iris_level = rng.uniform(0.35, 0.6)
    contrast = rng.uniform(0.12, 0.2)
    iris = np.clip(iris_level + contrast * texture, 0.0, 1.0)

    pupil = rho <= rng.uniform(0.3, 0.45)
    iris[pupil] = rng.uniform(0.03, 0.1)
    image = np.where(inside, iris, image)
    return np.clip(image, 0.0, 1.0), inside.astype(np.float64)
