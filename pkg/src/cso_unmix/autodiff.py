"""A small static-graph reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Graph` is built once with the op methods below, then evaluated with
:meth:`Graph.forward` and differentiated with :meth:`Graph.backward`. Node ids
are integers in creation order, which is always a valid topological order.

Shapes must line up exactly; the only implicit broadcasting is a scalar
(shape ``()``) node scaling or shifting a tensor via :meth:`Graph.scale` and
:meth:`Graph.shift`. Image tensors are ``(batch, channels, height, width)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class GraphError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    trainable: bool = False


_OPS: dict = {}


def _op(kind):
    def register(cls):
        _OPS[kind] = cls
        return cls

    return register


def _same(kind, *arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise GraphError(f"{kind}: shapes differ {[a.shape for a in arrays]}")


@_op("add")
class _Add:
    @staticmethod
    def forward(v, attrs):
        _same("add", *v)
        return v[0] + v[1], None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return g, g


@_op("sub")
class _Sub:
    @staticmethod
    def forward(v, attrs):
        _same("sub", *v)
        return v[0] - v[1], None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return g, -g


@_op("mul")
class _Mul:
    @staticmethod
    def forward(v, attrs):
        _same("mul", *v)
        return v[0] * v[1], None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return g * v[1], g * v[0]


@_op("mul_const")
class _MulConst:
    @staticmethod
    def forward(v, attrs):
        return attrs["c"] * v[0], None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return (attrs["c"] * g,)


@_op("scale")
class _Scale:
    @staticmethod
    def forward(v, attrs):
        if v[1].shape != ():
            raise GraphError(f"scale: factor must be a scalar, got shape {v[1].shape}")
        return v[1] * v[0], None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return v[1] * g, (np.sum(g * v[0]) if need[1] else None)


@_op("shift")
class _Shift:
    @staticmethod
    def forward(v, attrs):
        if v[1].shape != ():
            raise GraphError(f"shift: offset must be a scalar, got shape {v[1].shape}")
        return v[0] + v[1], None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return g, np.sum(g)


@_op("matmul")
class _MatMul:
    @staticmethod
    def forward(v, attrs):
        a, b = v
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise GraphError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b, None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        a, b = v
        return (g @ b.T if need[0] else None), (a.T @ g if need[1] else None)


@_op("linear")
class _Linear:
    """Fully-connected layer ``x @ W.T + b`` with x (B, in), W (out, in)."""

    @staticmethod
    def forward(v, attrs):
        x, W, b = v
        if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
            raise GraphError(f"linear: x {x.shape}, W {W.shape}, b {b.shape}")
        return x @ W.T + b, None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        x, W, _ = v
        return (g @ W if need[0] else None), (g.T @ x if need[1] else None), g.sum(axis=0)


def _pad(x, p):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H + 2 * p, W + 2 * p))
    out[:, :, p : p + H, p : p + W] = x
    return out


def _im2col(xp, k, H, W, buf):
    # buf (Ci, k, k, H, W) <- shifted windows of one padded sample xp (Ci, H+2p, W+2p)
    for i in range(k):
        for j in range(k):
            buf[:, i, j] = xp[:, i : i + H, j : j + W]
    return buf.reshape(buf.shape[0] * k * k, H * W)


# One sample at a time keeps the column buffer cache-resident, which is
# several times faster than a whole-batch im2col at these sizes.

def conv2d_direct(x, w, b=None):
    """'Same' cross-correlation, stride 1, zero padding; x (B,Ci,H,W), w (Co,Ci,k,k)."""
    B, Ci, H, W = x.shape
    Co, Ci2, k, k2 = w.shape
    if Ci != Ci2 or k != k2 or k % 2 == 0:
        raise GraphError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    xp = _pad(x, k // 2)
    wm = w.reshape(Co, Ci * k * k)
    buf = np.empty((Ci, k, k, H, W))
    out = np.empty((B, Co, H * W))
    for n in range(B):
        np.matmul(wm, _im2col(xp[n], k, H, W, buf), out=out[n])
    out = out.reshape(B, Co, H, W)
    if b is not None:
        out += b[None, :, None, None]
    return out


def _conv2d_weight_grad(g, x, k):
    B, Ci, H, W = x.shape
    Co = g.shape[1]
    xp = _pad(x, k // 2)
    buf = np.empty((Ci, k, k, H, W))
    gw = np.zeros((Co, Ci * k * k))
    for n in range(B):
        gw += g[n].reshape(Co, H * W) @ _im2col(xp[n], k, H, W, buf).T
    return gw.reshape(Co, Ci, k, k)


@_op("conv2d")
class _Conv2d:
    @staticmethod
    def forward(v, attrs):
        x, w = v[0], v[1]
        b = v[2] if len(v) > 2 else None
        if x.ndim != 4 or w.ndim != 4:
            raise GraphError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {w.shape}")
        if b is not None and b.shape != (w.shape[0],):
            raise GraphError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} output channels")
        return conv2d_direct(x, w, b), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        x, w = v[0], v[1]
        gx = conv2d_direct(g, np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])) if need[0] else None
        gw = _conv2d_weight_grad(g, x, w.shape[2]) if need[1] else None
        grads = [gx, gw]
        if len(v) > 2:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)


@_op("dyn_conv2d")
class _DynConv2d:
    """Per-sample convolution: x (B,1,H,W) with kernels w (B,k,k)."""

    @staticmethod
    def forward(v, attrs):
        x, w = v
        if x.ndim != 4 or x.shape[1] != 1 or w.ndim != 3 or w.shape[0] != x.shape[0] or w.shape[1] != w.shape[2]:
            raise GraphError(f"dyn_conv2d: input {x.shape} incompatible with kernels {w.shape}")
        k = w.shape[1]
        if k % 2 == 0:
            raise GraphError("dyn_conv2d: kernel size must be odd")
        B, _, H, W = x.shape
        xp = _pad(x, k // 2)[:, 0]
        out = np.zeros((B, H, W))
        for i in range(k):
            for j in range(k):
                out += w[:, i, j, None, None] * xp[:, i : i + H, j : j + W]
        return out[:, None], None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        x, w = v
        k = w.shape[1]
        B, _, H, W = x.shape
        p = k // 2
        g2 = g[:, 0]
        gx = gw = None
        if need[0]:
            gp = _pad(g, p)[:, 0]
            gx = np.zeros((B, H, W))
            wf = w[:, ::-1, ::-1]
            for i in range(k):
                for j in range(k):
                    gx += wf[:, i, j, None, None] * gp[:, i : i + H, j : j + W]
            gx = gx[:, None]
        if need[1]:
            xp = _pad(x, p)[:, 0]
            gw = np.empty_like(w)
            for i in range(k):
                for j in range(k):
                    gw[:, i, j] = np.einsum("bhw,bhw->b", g2, xp[:, i : i + H, j : j + W])
        return gx, gw


@_op("relu")
class _Relu:
    @staticmethod
    def forward(v, attrs):
        return np.maximum(v[0], 0.0), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return (g * (v[0] > 0),)


@_op("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(v, attrs):
        return expit(v[0]), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return (g * out * (1.0 - out),)


@_op("softplus")
class _Softplus:
    @staticmethod
    def forward(v, attrs):
        x = v[0]
        return np.logaddexp(0.0, x), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return (g * expit(v[0]),)


@_op("soft_threshold")
class _SoftThreshold:
    """``sign(x) * max(|x| - t, 0)``; the subgradient at ``|x| == t`` is 0."""

    @staticmethod
    def forward(v, attrs):
        x, t = v
        _same("soft_threshold", x, t)
        mask = np.abs(x) > t
        return np.where(mask, x - np.sign(x) * t, 0.0), mask

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        gm = g * ctx
        return gm, (-gm * np.sign(v[0]) if need[1] else None)


@_op("concat")
class _Concat:
    @staticmethod
    def forward(v, attrs):
        try:
            return np.concatenate(v, axis=1), None
        except ValueError as e:
            raise GraphError(f"concat: {e}") from None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        splits = np.cumsum([a.shape[1] for a in v])[:-1]
        return tuple(np.split(g, splits, axis=1))


@_op("channel_mean")
class _ChannelMean:
    @staticmethod
    def forward(v, attrs):
        return v[0].mean(axis=1, keepdims=True), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        C = v[0].shape[1]
        return (np.repeat(g / C, C, axis=1),)


@_op("channel_max")
class _ChannelMax:
    """Max over channels; the gradient goes to the first maximal channel."""

    @staticmethod
    def forward(v, attrs):
        idx = np.argmax(v[0], axis=1)[:, None]
        return np.take_along_axis(v[0], idx, axis=1), idx

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        gx = np.zeros_like(v[0])
        np.put_along_axis(gx, ctx, g, axis=1)
        return (gx,)


@_op("global_mean")
class _GlobalMean:
    """Spatial average pooling (B, C, H, W) -> (B, C)."""

    @staticmethod
    def forward(v, attrs):
        return v[0].mean(axis=(2, 3)), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        B, C, H, W = v[0].shape
        return (np.broadcast_to((g / (H * W))[:, :, None, None], v[0].shape).copy(),)


@_op("repeat_channels")
class _RepeatChannels:
    @staticmethod
    def forward(v, attrs):
        if v[0].ndim != 4 or v[0].shape[1] != 1:
            raise GraphError(f"repeat_channels: expected one channel, got {v[0].shape}")
        return np.repeat(v[0], attrs["channels"], axis=1), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return (g.sum(axis=1, keepdims=True),)


@_op("reshape")
class _Reshape:
    @staticmethod
    def forward(v, attrs):
        try:
            return v[0].reshape(attrs["shape"]), None
        except ValueError as e:
            raise GraphError(f"reshape: {e}") from None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return (g.reshape(v[0].shape),)


@_op("sum")
class _Sum:
    @staticmethod
    def forward(v, attrs):
        return np.asarray(v[0].sum()), None

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        return (np.full(v[0].shape, float(g)),)


@_op("mse")
class _Mse:
    @staticmethod
    def forward(v, attrs):
        _same("mse", *v)
        d = v[0] - v[1]
        return np.asarray(np.mean(d * d)), d

    @staticmethod
    def backward(g, v, out, ctx, attrs, need):
        gd = (2.0 * float(g) / ctx.size) * ctx
        return gd, -gd


class Graph:
    """Static computation graph with named inputs, parameters and outputs."""

    def __init__(self, params: dict | None = None):
        self.nodes: list[Node] = []
        # shared by reference so an optimizer can update values in place
        self.params: dict[str, np.ndarray] = {} if params is None else params
        self.values: list | None = None
        self._ctx: list | None = None
        self._names: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.last_inputs: dict[str, np.ndarray] | None = None

    # -- construction -------------------------------------------------------
    def _add(self, kind, inputs=(), name=None, trainable=False, **attrs) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{kind}: unknown input node {i}")
        if name is not None:
            if name in self._names:
                raise GraphError(f"duplicate node name {name!r}")
            self._names[name] = len(self.nodes)
        self.nodes.append(Node(kind, tuple(inputs), attrs, name, trainable))
        self.values = None
        return len(self.nodes) - 1

    def input(self, name: str, requires_grad: bool = False) -> int:
        return self._add("input", name=name, trainable=requires_grad)

    def param(self, name: str, value=None, trainable: bool = True) -> int:
        """Parameter node; asking again for an existing name reuses the node."""
        if name in self._names and self.nodes[self._names[name]].kind == "param":
            if value is not None:
                self.params[name] = np.ascontiguousarray(value, dtype=np.float64)
            return self._names[name]
        if value is not None:
            self.params[name] = np.ascontiguousarray(value, dtype=np.float64)
        elif name not in self.params:
            raise GraphError(f"parameter {name!r} has no value")
        return self._add("param", name=name, trainable=trainable)

    def const(self, value) -> int:
        return self._add("const", value=np.asarray(value, dtype=np.float64))

    def resolve(self, node) -> int:
        """Node id for an id, an output name, or a node/label name."""
        if not isinstance(node, str):
            return node
        if node in self.outputs:
            return self.outputs[node]
        return self._names[node]

    def label(self, node: int, name: str) -> int:
        """Attach a lookup name to an existing node."""
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        self._names[name] = node
        self.nodes[node].name = self.nodes[node].name or name
        return node

    def output(self, name: str, node: int) -> int:
        self.outputs[name] = node
        return node

    def add(self, a, b):
        return self._add("add", (a, b))

    def sub(self, a, b):
        return self._add("sub", (a, b))

    def mul(self, a, b):
        return self._add("mul", (a, b))

    def mul_const(self, a, c: float):
        return self._add("mul_const", (a,), c=float(c))

    def scale(self, a, s):
        return self._add("scale", (a, s))

    def shift(self, a, s):
        return self._add("shift", (a, s))

    def matmul(self, a, b):
        return self._add("matmul", (a, b))

    def linear(self, x, W, b):
        return self._add("linear", (x, W, b))

    def conv2d(self, x, w, b=None):
        return self._add("conv2d", (x, w) if b is None else (x, w, b))

    def dyn_conv2d(self, x, w):
        return self._add("dyn_conv2d", (x, w))

    def relu(self, a):
        return self._add("relu", (a,))

    def sigmoid(self, a):
        return self._add("sigmoid", (a,))

    def softplus(self, a):
        return self._add("softplus", (a,))

    def soft_threshold(self, x, t):
        return self._add("soft_threshold", (x, t))

    def concat(self, *xs):
        return self._add("concat", tuple(xs))

    def channel_mean(self, x):
        return self._add("channel_mean", (x,))

    def channel_max(self, x):
        return self._add("channel_max", (x,))

    def global_mean(self, x):
        return self._add("global_mean", (x,))

    def repeat_channels(self, x, channels: int):
        return self._add("repeat_channels", (x,), channels=int(channels))

    def reshape(self, x, shape):
        return self._add("reshape", (x,), shape=tuple(shape))

    def sum(self, x):
        return self._add("sum", (x,))

    def mse(self, a, b):
        return self._add("mse", (a, b))

    # -- evaluation ---------------------------------------------------------
    def _describe(self, i):
        n = self.nodes[i]
        return f"node {i} ({n.kind}{', ' + n.name if n.name else ''})"

    def forward(self, inputs: dict | None = None) -> dict[str, np.ndarray]:
        inputs = {} if inputs is None else inputs
        values: list = [None] * len(self.nodes)
        ctx: list = [None] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            if n.kind == "input":
                if n.name not in inputs:
                    raise GraphError(f"{self._describe(i)}: input not bound")
                values[i] = np.asarray(inputs[n.name], dtype=np.float64)
            elif n.kind == "param":
                values[i] = self.params[n.name]
            elif n.kind == "const":
                values[i] = n.attrs["value"]
            else:
                args = [values[j] for j in n.inputs]
                try:
                    values[i], ctx[i] = _OPS[n.kind].forward(args, n.attrs)
                except GraphError as e:
                    raise GraphError(f"{self._describe(i)}: {e}") from None
                except ValueError as e:
                    raise GraphError(f"{self._describe(i)}: {e}") from None
        self.values, self._ctx = values, ctx
        self.last_inputs = dict(inputs)
        return {name: values[i] for name, i in self.outputs.items()}

    def value(self, node) -> np.ndarray:
        if self.values is None:
            raise GraphStateError("forward has not been run")
        return self.values[self.resolve(node)]

    def _requires(self) -> list[bool]:
        req = [False] * len(self.nodes)
        for i, n in enumerate(self.nodes):
            if n.kind in ("input", "param"):
                req[i] = n.trainable
            elif n.kind != "const":
                req[i] = any(req[j] for j in n.inputs)
        return req

    def backward(self, node, seed=None) -> dict[str, np.ndarray]:
        """Gradients of ``node`` w.r.t. trainable params and grad-requiring inputs.

        ``seed`` defaults to ones shaped like the node's value. Accumulation
        runs in reverse node order, so results are deterministic.
        """
        if self.values is None:
            raise GraphStateError("backward called before forward")
        node = self.resolve(node)
        req = self._requires()
        grads: list = [None] * len(self.nodes)
        out = self.values[node]
        grads[node] = np.ones_like(out) if seed is None else np.asarray(seed, dtype=np.float64).reshape(out.shape)
        result = {}
        for i in range(node, -1, -1):
            g = grads[i]
            if g is None or not req[i]:
                continue
            n = self.nodes[i]
            if n.kind in ("input", "param"):
                result[n.name] = g
                continue
            grads[i] = None  # free as we go; peak memory matters for big batches
            need = [req[j] for j in n.inputs]
            args = [self.values[j] for j in n.inputs]
            gin = _OPS[n.kind].backward(g, args, self.values[i], self._ctx[i], n.attrs, need)
            for j, gj, nj in zip(n.inputs, gin, need):
                if not nj or gj is None:
                    continue
                gj = np.asarray(gj, dtype=np.float64)
                if gj.shape != self.values[j].shape:
                    gj = gj.reshape(self.values[j].shape)
                grads[j] = gj if grads[j] is None else grads[j] + gj
        for i, n in enumerate(self.nodes):
            if n.kind in ("input", "param") and n.trainable and n.name not in result:
                result[n.name] = np.zeros_like(self.values[i])
        return result

    def release(self) -> None:
        """Drop cached values from the last pass (the graph stays usable)."""
        self.values = self._ctx = self.last_inputs = None

    def kink_margin(self) -> float:
        """Smallest distance of any relu / soft-threshold / channel-max argument
        to its non-differentiable set, from the last forward pass."""
        if self.values is None:
            raise GraphStateError("forward has not been run")
        margin = np.inf
        for n in self.nodes:
            vals = [self.values[j] for j in n.inputs]
            if n.kind == "relu" and vals[0].size:
                margin = min(margin, float(np.min(np.abs(vals[0]))))
            elif n.kind == "soft_threshold" and vals[0].size:
                margin = min(margin, float(np.min(np.abs(np.abs(vals[0]) - vals[1]))))
            elif n.kind == "channel_max" and vals[0].shape[1] > 1:
                top2 = np.sort(vals[0], axis=1)[:, -2:]
                margin = min(margin, float(np.min(top2[:, 1] - top2[:, 0])))
        return margin


def grad_check(graph: Graph, node, h: float = 1e-6, wrt=None, inputs=None, corrupt=None) -> float:
    """Worst relative error between backward gradients and central differences.

    Checks every coordinate of each name in ``wrt`` (default: all trainable
    params and grad-requiring inputs). Per coordinate the error is
    ``|a - n| / max(|a|, |n|, 1e-7 * max|a|)``. ``corrupt`` may mutate the
    analytic gradient dict, to confirm the check catches a bad gradient.
    """
    inputs = dict(graph.last_inputs if inputs is None else inputs)
    node = graph.resolve(node)
    graph.forward(inputs)
    analytic = graph.backward(node)
    if corrupt is not None:
        corrupt(analytic)
    names = list(analytic) if wrt is None else list(wrt)

    def f():
        graph.forward(inputs)
        return float(np.sum(graph.values[node]))

    worst = 0.0
    for name in names:
        if name in graph.params:
            arr = graph.params[name]
        else:
            inputs[name] = np.array(inputs[name], dtype=np.float64)
            arr = inputs[name]
        a = analytic[name]
        num = np.empty_like(arr)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            fp = f()
            flat[k] = old - h
            fm = f()
            flat[k] = old
            num.reshape(-1)[k] = (fp - fm) / (2 * h)
        floor = max(1e-7 * float(np.max(np.abs(a))), 1e-300) if a.size else 1.0
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    graph.forward(inputs)
    return worst


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_update(params: dict, grads: dict, state: AdamState, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step, applied in place. Returns ``(params, state)``."""
    for name in grads:
        if not np.all(np.isfinite(grads[name])):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name in sorted(grads):
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        params[name] -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state
