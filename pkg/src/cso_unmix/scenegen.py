"""Synthetic closely-spaced target datasets and their high-resolution labels.

On-disk layout of a dataset directory::

    manifest.json
    train.bin  val.bin  test.bin

Each ``.bin`` file is a sequence of fixed-size records of little-endian
float32 values: the focal-plane image (U*V), the high-resolution label grid
(U*c * V*c), the target count, then ``max_targets`` slots of (x, y, g) with
unused slots zero-filled.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import crcmod
import numpy as np

from .imaging import SensorConfig, Target, TargetScene, render_scene

FORMAT_VERSION = "csist-1"
SPLITS = ("train", "val", "test")
REJECTION_BUDGET = 10_000
# consecutive rejections tolerated for one target before the scene restarts
_RESTART_AFTER = 200

# CRC-64/XZ (ECMA-182 polynomial, reflected)
_crc64 = crcmod.mkCrcFun(0x142F0E1EBA9EA3693, initCrc=0, rev=True, xorOut=0xFFFFFFFFFFFFFFFF)


class GenerationError(RuntimeError):
    pass


class EncodingError(ValueError):
    pass


def rayleigh_unit(sigma_psf: float) -> float:
    """Resolution limit of a Gaussian PSF in pixel units (1.9 sigma)."""
    if not sigma_psf > 0:
        raise ValueError("sigma_psf must be positive")
    return 1.9 * sigma_psf


def default_min_separation(sigma_psf: float = 0.5) -> float:
    return 0.52 * rayleigh_unit(sigma_psf)


def central_pixel(sensor: SensorConfig) -> tuple[float, float, float, float]:
    d = sensor.pixel_width
    i, j = sensor.width_px // 2, sensor.height_px // 2
    return (i * d, j * d, (i + 1) * d, (j + 1) * d)


@dataclass(frozen=True)
class DatasetConfig:
    num_samples: int = 6000
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    count_distribution: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    intensity_range: tuple[float, float] = (220.0, 250.0)
    min_separation: float = field(default_factory=default_min_separation)
    # (x0, y0, x1, y1); the default is the central pixel of the 11x11 sensor
    placement_region: tuple[float, float, float, float] = (5.0, 5.0, 6.0, 6.0)
    grid_factor: int = 3
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("split_fractions", "count_distribution", "intensity_range", "placement_region"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.num_samples < 0:
            raise ValueError("num_samples must be non-negative")
        if len(self.split_fractions) != 3 or any(f < 0 for f in self.split_fractions):
            raise ValueError("split_fractions must be three non-negative numbers")
        if abs(sum(self.split_fractions) - 1.0) > 1e-12:
            raise ValueError("split_fractions must sum to 1")
        if not self.count_distribution or any(p < 0 for p in self.count_distribution):
            raise ValueError("count_distribution must be non-empty and non-negative")
        if abs(sum(self.count_distribution) - 1.0) > 1e-9:
            raise ValueError("count_distribution must sum to 1")
        g0, g1 = self.intensity_range
        if not 0 < g0 <= g1:
            raise ValueError("intensity_range must satisfy 0 < g_min <= g_max")
        if not self.min_separation >= 0:
            raise ValueError("min_separation must be non-negative")
        x0, y0, x1, y1 = self.placement_region
        if not (x1 > x0 and y1 > y0):
            raise ValueError("placement_region must have positive area")
        if self.grid_factor < 1:
            raise ValueError("grid_factor must be >= 1")

    @property
    def max_targets(self) -> int:
        return len(self.count_distribution)

    def split_counts(self) -> dict[str, int]:
        n_train = round(self.num_samples * self.split_fractions[0])
        n_val = round(self.num_samples * self.split_fractions[1])
        return {"train": n_train, "val": n_val, "test": self.num_samples - n_train - n_val}

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(**d)


def desk_scale_config(rng_seed: int = 0, **overrides) -> DatasetConfig:
    """6000 samples split 5000/500/500."""
    return DatasetConfig(num_samples=6000, split_fractions=(5 / 6, 1 / 12, 1 / 12), rng_seed=rng_seed, **overrides)


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent generator for sample ``index``, derived from the master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([master_seed, index])))


def _f32(v: float) -> float:
    # stored records are float32; keep truth exactly representable
    return float(np.float32(v))


def sample_scene(config: DatasetConfig, rng: np.random.Generator, sensor: SensorConfig | None = None) -> TargetScene:
    """Draw one scene: target count, separated positions, intensities.

    Targets are placed one at a time by rejection against those already
    placed; a stuck partial scene is discarded and restarted. Every candidate
    draw counts against ``REJECTION_BUDGET``. A candidate that would share a
    label cell with a placed target is also rejected, which only matters for
    separations below the cell diagonal.
    """
    sensor = sensor or SensorConfig()
    x0, y0, x1, y1 = config.placement_region
    n = 1 + int(rng.choice(config.max_targets, p=np.asarray(config.count_distribution)))
    sep2 = config.min_separation**2
    draws = 0
    while True:
        pts: list[tuple[float, float]] = []
        cells: set[tuple[int, int]] = set()
        misses = 0
        while len(pts) < n and misses < _RESTART_AFTER:
            if draws >= REJECTION_BUDGET:
                raise GenerationError(
                    f"could not place {n} targets with min_separation={config.min_separation} "
                    f"inside placement_region={config.placement_region} within {REJECTION_BUDGET} draws"
                )
            draws += 1
            x = _f32(x0 + (x1 - x0) * rng.random())
            y = _f32(y0 + (y1 - y0) * rng.random())
            cell = _cell(x, y, config.grid_factor, sensor.pixel_width)
            if all((x - px) ** 2 + (y - py) ** 2 >= sep2 for px, py in pts) and cell not in cells:
                pts.append((x, y))
                cells.add(cell)
                misses = 0
            else:
                misses += 1
        if len(pts) == n:
            break
    g0, g1 = config.intensity_range
    targets = [Target(x, y, _f32(g0 + (g1 - g0) * rng.random())) for x, y in pts]
    return TargetScene(tuple(targets), sensor)


def hires_index(x: float, c: int) -> int:
    """Nearest high-resolution cell for a coordinate in the pixel-centred
    frame (pixel k centred at k): ``round(c*x + (c-1)/2)``."""
    return int(math.floor(c * x + (c - 1) / 2 + 0.5))


def _cell(x: float, y: float, c: int, pixel_width: float) -> tuple[int, int]:
    return hires_index(x / pixel_width - 0.5, c), hires_index(y / pixel_width - 0.5, c)


def encode_ground_truth(scene: TargetScene, c: int) -> np.ndarray:
    """Sparse (U*c, V*c) label grid holding each target's intensity at its cell.

    Target coordinates use the corner-origin sensor frame and are shifted by
    half a pixel into the pixel-centred frame before indexing.
    """
    if c < 1:
        raise EncodingError("grid factor must be >= 1")
    s = scene.sensor
    shape = (s.width_px * c, s.height_px * c)
    out = np.zeros(shape)
    for t in scene.targets:
        a, b = _cell(t.x, t.y, c, s.pixel_width)
        if not (0 <= a < shape[0] and 0 <= b < shape[1]):
            raise EncodingError(f"target ({t.x}, {t.y}) maps outside the grid at cell ({a}, {b})")
        if out[a, b] != 0:
            raise EncodingError(f"two targets collide in cell ({a}, {b})")
        out[a, b] = t.intensity
    return out


@dataclass
class DatasetManifest:
    version: str
    sensor: SensorConfig
    dataset: DatasetConfig
    counts: dict[str, int]
    checksum: str

    @property
    def record_floats(self) -> int:
        return record_floats(self.sensor, self.dataset)

    @property
    def record_bytes(self) -> int:
        return 4 * self.record_floats

    def offsets(self, split: str) -> np.ndarray:
        """Byte offset of every record inside ``<split>.bin``."""
        return np.arange(self.counts[split], dtype=np.int64) * self.record_bytes

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "sensor": self.sensor.to_dict(),
            "dataset": self.dataset.to_dict(),
            "counts": dict(self.counts),
            "checksum": self.checksum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(
            d["version"],
            SensorConfig.from_dict(d["sensor"]),
            DatasetConfig.from_dict(d["dataset"]),
            {k: int(v) for k, v in d["counts"].items()},
            d["checksum"],
        )


def record_floats(sensor: SensorConfig, config: DatasetConfig) -> int:
    c = config.grid_factor
    return sensor.num_pixels + sensor.num_pixels * c * c + 1 + 3 * config.max_targets


def make_record(scene: TargetScene, z: np.ndarray, label: np.ndarray, max_targets: int) -> np.ndarray:
    tail = np.zeros(1 + 3 * max_targets)
    tail[0] = len(scene.targets)
    for k, t in enumerate(scene.targets):
        tail[1 + 3 * k : 4 + 3 * k] = (t.x, t.y, t.intensity)
    return np.concatenate([z.ravel(), label.ravel(), tail]).astype("<f4")


def generate_sample(config: DatasetConfig, sensor: SensorConfig, index: int):
    rng = sample_rng(config.rng_seed, index)
    scene = sample_scene(config, rng, sensor)
    z = render_scene(scene, rng=rng)
    label = encode_ground_truth(scene, config.grid_factor)
    return scene, z, label


def generate_dataset(config: DatasetConfig, sensor: SensorConfig, output_path) -> DatasetManifest:
    """Write a full dataset directory and return its manifest.

    Sample ``i`` is generated from its own derived seed, so the output does
    not depend on generation order. Splits take consecutive index ranges.
    """
    out = Path(output_path)
    out.mkdir(parents=True, exist_ok=True)
    counts = config.split_counts()
    crc = None
    index = 0
    for split in SPLITS:
        path = out / f"{split}.bin"
        with open(path, "wb") as fh:
            for _ in range(counts[split]):
                scene, z, label = generate_sample(config, sensor, index)
                rec = make_record(scene, z, label, config.max_targets).tobytes()
                fh.write(rec)
                crc = _crc64(rec) if crc is None else _crc64(rec, crc)
                index += 1
    checksum = f"{(crc if crc is not None else _crc64(b'')):016x}"
    manifest = DatasetManifest(FORMAT_VERSION, sensor, config, counts, checksum)
    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return manifest


def dataset_checksum(path) -> str:
    """CRC-64/XZ of the concatenated split files of a dataset directory."""
    crc = _crc64(b"")
    for split in SPLITS:
        crc = _crc64((Path(path) / f"{split}.bin").read_bytes(), crc)
    return f"{crc:016x}"


@dataclass
class Split:
    name: str
    z: np.ndarray  # (n, U, V)
    labels: np.ndarray  # (n, U*c, V*c)
    targets: list[list[Target]]

    def __len__(self):
        return len(self.targets)


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads((Path(path) / "manifest.json").read_text()))


def load_split(path, split: str, manifest: DatasetManifest | None = None) -> Split:
    manifest = manifest or load_manifest(path)
    s, cfg = manifest.sensor, manifest.dataset
    c = cfg.grid_factor
    n = manifest.counts[split]
    raw = np.fromfile(Path(path) / f"{split}.bin", dtype="<f4")
    if raw.size != n * manifest.record_floats:
        raise ValueError(f"{split}.bin holds {raw.size} floats, expected {n * manifest.record_floats}")
    raw = raw.reshape(n, manifest.record_floats).astype(np.float64)
    npx = s.num_pixels
    z = raw[:, :npx].reshape(n, s.width_px, s.height_px)
    labels = raw[:, npx : npx * (1 + c * c)].reshape(n, s.width_px * c, s.height_px * c)
    tail = raw[:, npx * (1 + c * c) :]
    targets = []
    for row in tail:
        k = int(row[0])
        targets.append([Target(*row[1 + 3 * i : 4 + 3 * i]) for i in range(k)])
    return Split(split, z, labels, targets)
