"""Focal-plane forward model for point sources seen through a Gaussian PSF.

Coordinates are in pixel units with the origin at the sensor corner: pixel
``(i, j)`` covers ``[i*D, (i+1)*D) x [j*D, (j+1)*D)``. Images are stored as
arrays indexed ``[i, j]`` (x first), shape ``(U, V)``, and flatten row-major.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf, erfc

_SQRT2 = math.sqrt(2.0)


class ConfigError(ValueError):
    """Inconsistent sensor or grid configuration."""


@dataclass(frozen=True)
class SensorConfig:
    width_px: int = 11
    height_px: int = 11
    pixel_width: float = 1.0
    sigma_psf: float = 0.5
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise ConfigError("sensor needs at least one pixel per side")
        if not self.pixel_width > 0:
            raise ConfigError("pixel_width must be positive")
        if not self.sigma_psf > 0:
            raise ConfigError("sigma_psf must be positive")
        if not self.noise_sigma >= 0:
            raise ConfigError("noise_sigma must be non-negative")

    @property
    def num_pixels(self) -> int:
        return self.width_px * self.height_px

    def pixel_centers(self) -> np.ndarray:
        """Pixel centers as an array of shape (U*V, 2), row-major."""
        d = self.pixel_width
        xs = (np.arange(self.width_px) + 0.5) * d
        ys = (np.arange(self.height_px) + 0.5) * d
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def to_dict(self) -> dict:
        return {
            "U": self.width_px,
            "V": self.height_px,
            "D": self.pixel_width,
            "sigma_psf": self.sigma_psf,
            "noise_sigma": self.noise_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorConfig":
        return cls(int(d["U"]), int(d["V"]), float(d["D"]), float(d["sigma_psf"]), float(d["noise_sigma"]))


@dataclass(frozen=True)
class Target:
    x: float
    y: float
    intensity: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.intensity)):
            raise ValueError("target fields must be finite")
        if not self.intensity > 0:
            raise ValueError("target intensity must be positive")


@dataclass(frozen=True)
class TargetScene:
    targets: tuple[Target, ...] = ()
    sensor: SensorConfig = field(default_factory=SensorConfig)

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        xmax = self.sensor.width_px * self.sensor.pixel_width
        ymax = self.sensor.height_px * self.sensor.pixel_width
        for t in self.targets:
            if not (0 <= t.x < xmax and 0 <= t.y < ymax):
                raise ValueError(f"target ({t.x}, {t.y}) lies outside the sensor")

    def __len__(self):
        return len(self.targets)


@dataclass(frozen=True)
class SubPixelGrid:
    """Regular ``n x n`` subdivision of every pixel; L = U*V*n**2 cells."""

    sensor: SensorConfig
    n: int = 3

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("grid factor must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.sensor.width_px * self.n, self.sensor.height_px * self.n)

    @property
    def size(self) -> int:
        a, b = self.shape
        return a * b

    def cell_centers(self) -> np.ndarray:
        """Cell centers Omega, shape (L, 2), in the same row-major order as
        the flattened high-resolution grid."""
        step = self.sensor.pixel_width / self.n
        a, b = self.shape
        xs = (np.arange(a) + 0.5) * step
        ys = (np.arange(b) + 0.5) * step
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite input")


def psf_value(x, y, center, sigma_psf: float):
    """Isotropic 2-D Gaussian PSF density at ``(x, y)``."""
    _check_finite(x, y, center[0], center[1], sigma_psf)
    if not sigma_psf > 0:
        raise ValueError("sigma_psf must be positive")
    r2 = (np.asarray(x) - center[0]) ** 2 + (np.asarray(y) - center[1]) ** 2
    return np.exp(-r2 / (2.0 * sigma_psf**2)) / (2.0 * math.pi * sigma_psf**2)


def _interval_mass(lo, hi, sigma):
    """Standard-normal mass of [lo, hi] (offsets already centred on the
    source), computed with erfc in the tails to keep relative accuracy."""
    a = np.asarray(lo, dtype=float) / (_SQRT2 * sigma)
    b = np.asarray(hi, dtype=float) / (_SQRT2 * sigma)
    out = 0.5 * (erf(b) - erf(a))
    right = a > 0
    left = b < 0
    out = np.where(right, 0.5 * (erfc(a) - erfc(b)), out)
    out = np.where(left, 0.5 * (erfc(-b) - erfc(-a)), out)
    return out


def pixel_response(pixel_center, target_xy, pixel_width: float, sigma_psf: float):
    """Fraction of a unit source's energy falling on one pixel.

    ``pixel_center`` and ``target_xy`` are ``(x, y)`` pairs and broadcast
    against each other, so whole steering columns can be evaluated at once.
    """
    if not pixel_width > 0 or not sigma_psf > 0:
        raise ValueError("pixel_width and sigma_psf must be positive")
    px, py = (np.asarray(v, dtype=float) for v in pixel_center)
    tx, ty = (np.asarray(v, dtype=float) for v in target_xy)
    _check_finite(px, py, tx, ty)
    h = 0.5 * pixel_width
    fx = _interval_mass(px - h - tx, px + h - tx, sigma_psf)
    fy = _interval_mass(py - h - ty, py + h - ty, sigma_psf)
    return fx * fy


def build_steering_matrix(grid: SubPixelGrid, sensor: SensorConfig | None = None) -> np.ndarray:
    """Dense steering matrix of shape (U*V, L).

    Column ``l`` is the pixel response of a unit source at ``Omega[l]``. The
    2-D integral factorises, so the matrix is assembled from two 1-D tables.
    """
    if sensor is not None and sensor != grid.sensor:
        raise ConfigError("sub-pixel grid and sensor disagree on geometry")
    s = grid.sensor
    d = s.pixel_width
    a, b = grid.shape
    step = d / grid.n
    px = (np.arange(s.width_px) + 0.5) * d
    py = (np.arange(s.height_px) + 0.5) * d
    cx = (np.arange(a) + 0.5) * step
    cy = (np.arange(b) + 0.5) * step
    # (U, a) and (V, b) tables of 1-D interval masses
    tx = _interval_mass(px[:, None] - 0.5 * d - cx[None, :], px[:, None] + 0.5 * d - cx[None, :], s.sigma_psf)
    ty = _interval_mass(py[:, None] - 0.5 * d - cy[None, :], py[:, None] + 0.5 * d - cy[None, :], s.sigma_psf)
    # G[(i, j), (k, m)] = tx[i, k] * ty[j, m]
    G = np.einsum("ik,jm->ijkm", tx, ty).reshape(s.num_pixels, a * b)
    return np.ascontiguousarray(G)


def steering_fingerprint(G: np.ndarray) -> str:
    """Short content hash identifying a steering matrix."""
    import hashlib

    arr = np.ascontiguousarray(G, dtype="<f8")
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:16]


def render_scene(scene: TargetScene, rng_seed: int | None = None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Noisy focal-plane image of ``scene`` with shape (U, V).

    Targets are rendered at their exact continuous positions. Noise is drawn
    from ``rng`` when given, otherwise from a generator seeded by ``rng_seed``.
    """
    s = scene.sensor
    centers = s.pixel_centers()
    z = np.zeros(s.num_pixels)
    for t in scene.targets:
        z += t.intensity * pixel_response((centers[:, 0], centers[:, 1]), (t.x, t.y), s.pixel_width, s.sigma_psf)
    if s.noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(rng_seed)
        z += rng.normal(0.0, s.noise_sigma, size=z.shape)
    return z.reshape(s.width_px, s.height_px)
