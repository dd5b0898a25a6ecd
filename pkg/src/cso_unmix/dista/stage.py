"""Graph builders for one unfolded stage and its pieces.

Every builder appends nodes to an existing :class:`~cso_unmix.autodiff.Graph`
and returns the id of its result, so a full multi-stage network, a single
stage, or one sub-module can be assembled and gradient-checked the same way.
Parameters of stage ``k`` are stored under ``"s{k}.<name>"``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import Graph

KERNEL = 3
FC_HIDDEN = 16

CONV_SHAPES = {
    "conv_B": lambda C: (C, 1, KERNEL, KERNEL),
    "conv_A": lambda C: (C, C, KERNEL, KERNEL),
    "inv_conv_A": lambda C: (C, C, KERNEL, KERNEL),
    "inv_conv_B": lambda C: (1, C, KERNEL, KERNEL),
    "thr_conv1": lambda C: (C, C, KERNEL, KERNEL),
    "thr_conv2": lambda C: (C, C, KERNEL, KERNEL),
    "thr_mask_conv": lambda C: (C, 2, KERNEL, KERNEL),
    "thr_out_conv": lambda C: (C, C, KERNEL, KERNEL),
}
BIASED = ("thr_conv1", "thr_conv2", "thr_mask_conv", "thr_out_conv")


class ParameterError(ValueError):
    pass


def stage_param_names(k: int) -> list[str]:
    names = []
    for conv in CONV_SHAPES:
        names.append(f"s{k}.{conv}")
        if conv in BIASED:
            names.append(f"s{k}.{conv}.b")
    names += [f"s{k}.fc1.W", f"s{k}.fc1.b", f"s{k}.fc2.W", f"s{k}.fc2.b", f"s{k}.rho", f"s{k}.theta_base"]
    return names


def _xavier(rng, shape):
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_out, fan_in = shape
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape)


def init_stage_params(k: int, channels: int, rho: float, rng: np.random.Generator,
                      theta_floor: float = 0.01) -> dict[str, np.ndarray]:
    """Xavier-normal kernels, zero biases, ``rho`` step, and a threshold
    floor whose softplus equals ``theta_floor``."""
    p = {}
    for conv, shape in CONV_SHAPES.items():
        p[f"s{k}.{conv}"] = _xavier(rng, shape(channels))
        if conv in BIASED:
            p[f"s{k}.{conv}.b"] = np.zeros(shape(channels)[0])
    p[f"s{k}.fc1.W"] = _xavier(rng, (FC_HIDDEN, 1))
    p[f"s{k}.fc1.b"] = np.zeros(FC_HIDDEN)
    p[f"s{k}.fc2.W"] = _xavier(rng, (KERNEL * KERNEL, FC_HIDDEN))
    p[f"s{k}.fc2.b"] = np.zeros(KERNEL * KERNEL)
    p[f"s{k}.rho"] = np.asarray(float(rho))
    p[f"s{k}.theta_base"] = np.asarray(math.log(math.expm1(theta_floor)))
    return p


def _p(g: Graph, k, name):
    return g.param(f"s{k}.{name}")


def add_gradient_update(g: Graph, k, s_prev, z, G_t, G_mat, shape):
    """r = s - rho * G^T (G s - z) on flattened grids; returns an image node.

    ``G_t`` holds G^T (L, UV) and ``G_mat`` holds G (UV, L) as graph nodes.
    """
    B, H, W = shape
    s_flat = g.reshape(s_prev, (B, H * W))
    residual = g.sub(g.matmul(s_flat, G_t), z)
    step = g.scale(g.matmul(residual, G_mat), _p(g, k, "rho"))
    return g.reshape(g.sub(s_flat, step), (B, 1, H, W))


def add_dynamic_weight(g: Graph, k, cond):
    """Per-sample 3x3 kernel from the conditioning grid: mean-pool, FC, relu, FC."""
    pooled = g.global_mean(cond)  # (B, 1)
    hidden = g.relu(g.linear(pooled, _p(g, k, "fc1.W"), _p(g, k, "fc1.b")))
    flat = g.linear(hidden, _p(g, k, "fc2.W"), _p(g, k, "fc2.b"))
    return g.reshape(flat, (-1, KERNEL, KERNEL))


def add_dynamic_transform(g: Graph, k, r, cond, channels: int, alpha: float, tag=None):
    """``alpha * A(relu(B(r))) + (1 - alpha) * sigmoid(W (*) r)``, C channels.

    The auxiliary single-channel map is repeated across the C channels.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    main = g.conv2d(g.relu(g.conv2d(r, _p(g, k, "conv_B"))), _p(g, k, "conv_A"))
    W = add_dynamic_weight(g, k, cond)
    w_r = g.dyn_conv2d(r, W)
    aux = g.repeat_channels(g.sigmoid(w_r), channels)
    out = g.add(g.mul_const(main, alpha), g.mul_const(aux, 1.0 - alpha))
    if tag:
        g.label(W, f"{tag}.W")
        g.label(w_r, f"{tag}.w_r")
        g.label(out, f"{tag}.F_d")
    return out


def add_dynamic_threshold(g: Graph, k, feats, tag=None):
    """Non-negative per-position, per-channel threshold map from the features."""
    u1 = g.conv2d(feats, _p(g, k, "thr_conv1"), _p(g, k, "thr_conv1.b"))
    u2 = g.conv2d(feats, _p(g, k, "thr_conv2"), _p(g, k, "thr_conv2.b"))
    u = g.concat(u1, u2)
    sa_avg = g.channel_mean(u)
    sa_max = g.channel_max(u)
    sa_hat = g.conv2d(g.concat(sa_avg, sa_max), _p(g, k, "thr_mask_conv"), _p(g, k, "thr_mask_conv.b"))
    mask = g.sigmoid(sa_hat)
    mixed = g.add(g.mul(mask, u1), g.mul(mask, u2))
    theta = g.relu(g.conv2d(mixed, _p(g, k, "thr_out_conv"), _p(g, k, "thr_out_conv.b")))
    if tag:
        for node, name in ((u, "U"), (sa_avg, "SA_avg"), (sa_max, "SA_max"), (sa_hat, "SA_hat"),
                           (mask, "SA_mask"), (theta, "theta_d")):
            g.label(node, f"{tag}.{name}")
    return theta


def add_inverse_transform(g: Graph, k, x):
    return g.conv2d(g.relu(g.conv2d(x, _p(g, k, "inv_conv_A"))), _p(g, k, "inv_conv_B"))


def add_stage(g: Graph, k, s_prev, z, G_t, G_mat, shape, channels: int, alpha: float):
    """One full stage; intermediates are labelled ``stage{k}.*``."""
    tag = f"stage{k}"
    r = add_gradient_update(g, k, s_prev, z, G_t, G_mat, shape)
    g.label(r, f"{tag}.r")
    feats = add_dynamic_transform(g, k, r, s_prev, channels, alpha, tag)
    theta_d = add_dynamic_threshold(g, k, feats, tag)
    thr = g.shift(theta_d, g.softplus(_p(g, k, "theta_base")))
    shrunk = g.soft_threshold(feats, thr)
    out = add_inverse_transform(g, k, shrunk)
    g.label(out, f"{tag}.out")
    return out


ACTIVATION_NAMES = ("r", "W", "w_r", "F_d", "U", "SA_avg", "SA_max", "SA_hat", "SA_mask", "theta_d", "out")


@dataclass
class ActivationCache:
    """Intermediates of every stage from the last forward pass."""

    stages: list[dict[str, np.ndarray]]

    @classmethod
    def from_graph(cls, g: Graph, num_stages: int) -> "ActivationCache":
        return cls([{n: g.value(f"stage{k}.{n}") for n in ACTIVATION_NAMES} for k in range(num_stages)])


# -- eager wrappers: build a throwaway graph, evaluate, return arrays ---------

def _eager(params, build, **inputs):
    g = Graph(params)
    nodes = {name: g.input(name) for name in inputs}
    g.output("out", build(g, nodes))
    return g.forward(inputs)["out"]


def gradient_update(s_prev, z, G, rho: float):
    """Batch form of ``r = s - rho G^T (G s - z)``; s_prev (B, H, W), z (B, UV)."""
    s_prev = np.asarray(s_prev, dtype=float)
    B, H, W = s_prev.shape
    params = {"s0.rho": np.asarray(float(rho))}

    def build(g, n):
        Gt, Gm = g.const(np.asarray(G).T), g.const(np.asarray(G))
        return add_gradient_update(g, 0, n["s"], n["z"], Gt, Gm, (B, H, W))

    return _eager(params, build, s=s_prev[:, None], z=np.asarray(z, dtype=float))[:, 0]


def dynamic_weight(s_prev, params, k=0):
    return _eager(params, lambda g, n: add_dynamic_weight(g, k, n["s"]), s=np.asarray(s_prev, dtype=float)[:, None])


def dynamic_conv(W, r):
    """Convolve each grid ``r[b]`` (B, H, W) with its own kernel ``W[b]``."""
    return _eager({}, lambda g, n: g.dyn_conv2d(n["r"], n["W"]), W=np.asarray(W, dtype=float),
                  r=np.asarray(r, dtype=float)[:, None])[:, 0]


def dynamic_transform(r, s_prev, params, channels, alpha=0.7, k=0):
    return _eager(params, lambda g, n: add_dynamic_transform(g, k, n["r"], n["s"], channels, alpha),
                  r=np.asarray(r, dtype=float)[:, None], s=np.asarray(s_prev, dtype=float)[:, None])


def dynamic_threshold(features, params, k=0):
    return _eager(params, lambda g, n: add_dynamic_threshold(g, k, n["f"]), f=np.asarray(features, dtype=float))


def stage_forward(s_prev, z, G, params, channels, alpha=0.7, k=0):
    """Run one stage eagerly. Returns ``(s_next (B, H, W), stage activations)``."""
    s_prev = np.asarray(s_prev, dtype=float)
    B, H, W = s_prev.shape
    g = Graph(params)
    s = g.input("s")
    zz = g.input("z")
    out = add_stage(g, k, s, zz, g.const(np.asarray(G).T), g.const(np.asarray(G)), (B, H, W), channels, alpha)
    g.output("out", out)
    g.forward({"s": s_prev[:, None], "z": np.asarray(z, dtype=float)})
    return g.value(out)[:, 0], {n: g.value(f"stage{k}.{n}") for n in ACTIVATION_NAMES}
