"""Multi-stage network assembly, loss, training loop, checkpoints and inference."""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import AdamState, Graph, TrainingError, adam_update
from ..imaging import SubPixelGrid, build_steering_matrix, steering_fingerprint
from ..scenegen import Split, load_manifest, load_split
from ..solvers import LinearInit, apply_init, estimate_step_size, fit_linear_init
from .stage import add_dynamic_transform, add_inverse_transform, add_stage, init_stage_params, stage_param_names

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DISTACK1"


class FingerprintError(ValueError):
    def __init__(self, expected: str, got: str):
        super().__init__(f"steering matrix fingerprint mismatch: checkpoint has {expected}, data gives {got}")
        self.expected, self.got = expected, got


class TrainingAborted(TrainingError):
    """Loss went non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class ModelConfig:
    num_stages: int = 6
    channels: int = 32
    grid_factor: int = 3
    gamma: float = 0.01
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    alpha: float = 0.7
    # network works on intensities divided by this
    intensity_scale: float = 255.0

    def __post_init__(self):
        if self.num_stages < 0:
            raise ValueError("num_stages must be >= 0")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not self.intensity_scale > 0:
            raise ValueError("intensity_scale must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Checkpoint:
    config: ModelConfig
    fingerprint: str
    init: LinearInit
    params: dict[str, np.ndarray]
    trace: list[dict] = field(default_factory=list)

    def param_order(self) -> list[str]:
        return [n for k in range(self.config.num_stages) for n in stage_param_names(k)]

    def save(self, path) -> None:
        order = self.param_order()
        header = {
            "config": asdict(self.config),
            "fingerprint": self.fingerprint,
            "trace": self.trace,
            "seed": self.config.seed,
            "arrays": [["Q_init", list(self.init.Q.shape)]] + [[n, list(self.params[n].shape)] for n in order],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.init.Q, dtype="<f8").tobytes())
            for n in order:
                fh.write(np.ascontiguousarray(self.params[n], dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16 : 16 + n])
        offset = 16 + n
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
            offset += 8 * count
        if offset != len(data):
            raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
        config = ModelConfig.from_dict(header["config"])
        init = LinearInit(arrays.pop("Q_init"))
        ckpt = cls(config, header["fingerprint"], init, arrays, header["trace"])
        if set(arrays) != set(ckpt.param_order()):
            raise ValueError(f"{path}: parameter set does not match {config.num_stages} stages")
        return ckpt


class Network:
    """Holds the steering matrix and parameters; caches one graph per batch size."""

    def __init__(self, config: ModelConfig, G: np.ndarray, params: dict, grid_shape: tuple[int, int]):
        self.config = config
        self.G = G
        self.params = params
        self.grid_shape = grid_shape
        self._graphs: dict = {}

    def graph(self, batch: int, training: bool) -> Graph:
        key = (batch, training)
        if key not in self._graphs:
            self._graphs[key] = build_network_graph(self.config, self.G, self.params, batch, self.grid_shape, training)
        return self._graphs[key]

    def run(self, z_scaled, s0_scaled, gt_scaled=None):
        B = z_scaled.shape[0]
        g = self.graph(B, gt_scaled is not None)
        inputs = {"z": z_scaled, "s0": s0_scaled.reshape(B, 1, *self.grid_shape)}
        if gt_scaled is not None:
            inputs["gt"] = gt_scaled.reshape(B, 1, *self.grid_shape)
        return g, g.forward(inputs)


def build_network_graph(config: ModelConfig, G, params, batch: int, grid_shape, training: bool) -> Graph:
    """Graph with inputs ``z`` (B, UV), ``s0`` and (training) ``gt`` (B, 1, H, W).

    Outputs ``s_final``; in training mode also ``loss``, ``discrepancy`` and
    ``constraint``.
    """
    H, W = grid_shape
    g = Graph(params)
    z = g.input("z")
    s = g.input("s0")
    G_t, G_mat = g.const(G.T), g.const(G)
    C, alpha = config.channels, config.alpha
    for k in range(config.num_stages):
        s = add_stage(g, k, s, z, G_t, G_mat, (batch, H, W), C, alpha)
    g.output("s_final", s)
    if training:
        gt = g.input("gt")
        disc = g.mse(s, gt)
        g.output("discrepancy", disc)
        terms = []
        for k in range(config.num_stages):
            ident = add_inverse_transform(g, k, add_dynamic_transform(g, k, gt, gt, C, alpha))
            terms.append(g.mse(ident, gt))
        if terms:
            cons = terms[0]
            for t in terms[1:]:
                cons = g.add(cons, t)
            g.output("constraint", cons)
            loss = g.add(disc, g.mul_const(cons, config.gamma))
        else:
            loss = disc
        g.output("loss", loss)
    return g


def loss(final, gt, identity_maps, gamma: float):
    """Discrepancy plus ``gamma`` times the identity constraint, numpy form.

    ``final`` and ``gt`` are (M, ...) arrays; ``identity_maps`` holds one
    array per stage with the inverse transform applied to the forward
    transform of ``gt``. Both terms are normalised by ``M * N_s``.
    """
    final = np.asarray(final, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if final.shape != gt.shape:
        raise ValueError(f"N_s mismatch: prediction {final.shape} vs ground truth {gt.shape}")
    denom = gt.size
    disc = float(np.sum((final - gt) ** 2)) / denom
    cons = 0.0
    for m in identity_maps:
        m = np.asarray(m, dtype=float)
        if m.shape != gt.shape:
            raise ValueError(f"N_s mismatch: identity map {m.shape} vs ground truth {gt.shape}")
        cons += float(np.sum((m - gt) ** 2)) / denom
    return disc + gamma * cons, {"discrepancy": disc, "constraint": cons}


def _flat_z(split: Split) -> np.ndarray:
    return split.z.reshape(len(split), -1)


def _flat_s(split: Split) -> np.ndarray:
    return split.labels.reshape(len(split), -1)


def _batches(n, size, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield order[start : start + size]


def evaluate_loss(net: Network, init: LinearInit, split: Split, batch_size: int) -> dict:
    scale = net.config.intensity_scale
    z = _flat_z(split) / scale
    s = _flat_s(split) / scale
    totals = {"loss": 0.0, "discrepancy": 0.0, "constraint": 0.0}
    for idx in _batches(len(split), batch_size):
        s0 = apply_init(init, z[idx].T).T
        g, out = net.run(z[idx], s0, s[idx])
        g.release()
        for key in totals:
            if key in out:
                totals[key] += float(out[key]) * len(idx)
    return {k: v / max(len(split), 1) for k, v in totals.items()}


def prepare(data_dir, config: ModelConfig):
    """Load dataset pieces and derive the steering matrix for ``config``."""
    manifest = load_manifest(data_dir)
    if manifest.dataset.grid_factor != config.grid_factor:
        raise ValueError(
            f"dataset grid factor {manifest.dataset.grid_factor} differs from model grid factor {config.grid_factor}"
        )
    grid = SubPixelGrid(manifest.sensor, config.grid_factor)
    G = build_steering_matrix(grid)
    return manifest, grid, G


def train(data_dir, config: ModelConfig, on_epoch=None) -> Checkpoint:
    """Train from scratch on the dataset in ``data_dir``.

    Deterministic for a fixed ``config.seed``. ``on_epoch(epoch, record,
    checkpoint)`` is called after each epoch when given.
    """
    manifest, grid, G = prepare(data_dir, config)
    train_split = load_split(data_dir, "train", manifest)
    val_split = load_split(data_dir, "val", manifest)
    init = fit_linear_init(_flat_z(train_split).T, _flat_s(train_split).T)
    rho = estimate_step_size(G)
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}
    for k in range(config.num_stages):
        params.update(init_stage_params(k, config.channels, rho, rng))
    fingerprint = steering_fingerprint(G)
    net = Network(config, G, params, grid.shape)
    state = AdamState()
    scale = config.intensity_scale
    z = _flat_z(train_split) / scale
    s = _flat_s(train_split) / scale
    s0_all = apply_init(init, z.T).T
    trace: list[dict] = []
    good = Checkpoint(config, fingerprint, init, copy.deepcopy(params), [])
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_split))
        total = 0.0
        for idx in _batches(len(order), config.batch_size, order):
            g, out = net.run(z[idx], s0_all[idx], s[idx])
            value = float(out["loss"])
            if not np.isfinite(value):
                raise TrainingAborted(f"non-finite loss in epoch {epoch}", good)
            grads = g.backward("loss") if config.num_stages else {}
            g.release()
            grads = {n: grads[n] for n in sorted(grads) if n in params}
            try:
                adam_update(params, grads, state, lr=config.learning_rate)
            except TrainingError as e:
                raise TrainingAborted(f"epoch {epoch}: {e}", good) from None
            total += value * len(idx)
        record = {"epoch": epoch, "train_loss": total / len(order)}
        record["val_loss"] = evaluate_loss(net, init, val_split, config.batch_size)["loss"] if len(val_split) else float("nan")
        if not np.isfinite(record["train_loss"]):
            raise TrainingAborted(f"non-finite loss in epoch {epoch}", good)
        trace.append(record)
        log.info("epoch %d train %.6g val %.6g", epoch, record["train_loss"], record["val_loss"])
        good = Checkpoint(config, fingerprint, init, copy.deepcopy(params), list(trace))
        if on_epoch is not None:
            on_epoch(epoch, record, good)
    return Checkpoint(config, fingerprint, init, params, trace)


def infer(checkpoint: Checkpoint, z, G, batch_size: int = 64) -> np.ndarray:
    """Reconstruct high-resolution grids for measurements ``z`` (n, U, V).

    Returns (n, U*c, V*c) in intensity units.
    """
    got = steering_fingerprint(G)
    if got != checkpoint.fingerprint:
        raise FingerprintError(checkpoint.fingerprint, got)
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    U, V = z.shape[1], z.shape[2]
    c = checkpoint.config.grid_factor
    shape = (U * c, V * c)
    scale = checkpoint.config.intensity_scale
    zf = z.reshape(n, -1) / scale
    s0 = apply_init(checkpoint.init, zf.T).T
    if checkpoint.config.num_stages == 0:
        return (s0 * scale).reshape(n, *shape)
    net = Network(checkpoint.config, G, checkpoint.params, shape)
    out = np.empty((n, *shape))
    for idx in _batches(n, batch_size):
        g, res = net.run(zf[idx], s0[idx])
        g.release()
        out[idx] = res["s_final"][:, 0] * scale
    return out
