"""Small parameterized networks with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector; :func:`layout` names the segments
in order. Five architectures are supported:

``linear``  ``x W^T + b``
``mlp``     affine/activation stack
``resnet``  input projection, then blocks ``z <- z + act(z W^T + b)``, then a
            linear readout; all hidden widths equal
``icnn``    input-convex network: hidden-to-hidden weights (segments named
            ``Wz*``) are kept nonnegative and the activation is convex and
            nondecreasing, so the output is convex in ``x``
``table``   one scalar per training example, indexed by example id
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch, TapeMismatch, UnknownExampleId, WrongKind

KINDS = ("linear", "mlp", "resnet", "icnn", "table")
ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True)
class NetSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden_dims: tuple = ()
    activation: str = "relu"
    table_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "table":
            if self.output_dim != 1 or self.table_size < 1:
                raise ValueError("table networks need output_dim=1 and table_size>=1")
        if self.kind in ("mlp", "resnet", "icnn") and not self.hidden_dims:
            raise ValueError(f"{self.kind} needs at least one hidden layer")
        if self.kind == "resnet" and len(set(self.hidden_dims)) != 1:
            raise ValueError("resnet hidden widths must all be equal")

    def to_dict(self):
        return {
            "kind": self.kind,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "table_size": self.table_size,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def layout(spec: NetSpec) -> list[tuple[str, tuple]]:
    """Ordered ``(name, shape)`` segments of the flat parameter vector."""
    d, o, hs = spec.input_dim, spec.output_dim, spec.hidden_dims
    if spec.kind == "linear":
        return [("W", (o, d)), ("b", (o,))]
    if spec.kind == "table":
        return [("v", (spec.table_size,))]
    if spec.kind == "mlp":
        dims = (d,) + hs + (o,)
        segs = []
        for i in range(len(dims) - 1):
            segs += [(f"W{i}", (dims[i + 1], dims[i])), (f"b{i}", (dims[i + 1],))]
        return segs
    if spec.kind == "resnet":
        h = hs[0]
        segs = [("W_in", (h, d)), ("b_in", (h,))]
        for i in range(len(hs)):
            segs += [(f"W{i}", (h, h)), (f"b{i}", (h,))]
        return segs + [("W_out", (o, h)), ("b_out", (o,))]
    # icnn
    segs = [("Wx0", (hs[0], d)), ("b0", (hs[0],))]
    for i in range(1, len(hs)):
        segs += [(f"Wz{i}", (hs[i], hs[i - 1])), (f"Wx{i}", (hs[i], d)), (f"b{i}", (hs[i],))]
    return segs + [("Wz_out", (o, hs[-1])), ("Wx_out", (o, d)), ("b_out", (o,))]


def n_params(spec: NetSpec) -> int:
    return sum(math.prod(shape) for _, shape in layout(spec))


def unpack(spec: NetSpec, params: np.ndarray) -> dict[str, np.ndarray]:
    """Named views into ``params`` (writes through)."""
    params = np.asarray(params)
    if params.shape != (n_params(spec),):
        raise DimensionMismatch(f"expected {n_params(spec)} parameters, got {params.shape}")
    out, off = {}, 0
    for name, shape in layout(spec):
        size = math.prod(shape)
        out[name] = params[off:off + size].reshape(shape)
        off += size
    return out


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.logaddexp(0.0, z)


def _act_grad(name, z):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return expit(z)


@dataclass
class EvalTape:
    spec: NetSpec
    params: np.ndarray
    inputs: np.ndarray
    cache: list = field(default_factory=list)
    squeeze: bool = False


def forward(spec: NetSpec, params: np.ndarray, x) -> tuple[np.ndarray, EvalTape]:
    """Evaluate the network on a batch ``x`` of shape ``(B, input_dim)``.

    A single 1-d input returns a 1-d output. Table networks take integer
    example ids instead of features.
    """
    p = unpack(spec, params)
    if spec.kind == "table":
        ids = np.asarray(x)
        squeeze = ids.ndim == 0
        ids = np.atleast_1d(ids).astype(np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= spec.table_size):
            raise UnknownExampleId(f"example ids must lie in [0, {spec.table_size})")
        out = p["v"][ids][:, None]
        tape = EvalTape(spec, params, ids, squeeze=squeeze)
        return (out[0] if squeeze else out), tape

    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionMismatch(f"expected inputs of width {spec.input_dim}, got {x.shape}")
    act = spec.activation
    cache = []
    if spec.kind == "linear":
        out = x @ p["W"].T + p["b"]
    elif spec.kind == "mlp":
        a = x
        n_layers = len(spec.hidden_dims) + 1
        for i in range(n_layers - 1):
            z = a @ p[f"W{i}"].T + p[f"b{i}"]
            cache.append((a, z))
            a = _act(act, z)
        cache.append((a, None))
        out = a @ p[f"W{n_layers - 1}"].T + p[f"b{n_layers - 1}"]
    elif spec.kind == "resnet":
        z = x @ p["W_in"].T + p["b_in"]
        a = _act(act, z)
        cache.append((x, z))
        for i in range(len(spec.hidden_dims)):
            z = a @ p[f"W{i}"].T + p[f"b{i}"]
            cache.append((a, z))
            a = a + _act(act, z)
        cache.append((a, None))
        out = a @ p["W_out"].T + p["b_out"]
    else:
        z = x @ p["Wx0"].T + p["b0"]
        cache.append((None, z))
        a = _act(act, z)
        for i in range(1, len(spec.hidden_dims)):
            z = a @ p[f"Wz{i}"].T + x @ p[f"Wx{i}"].T + p[f"b{i}"]
            cache.append((a, z))
            a = _act(act, z)
        cache.append((a, None))
        out = a @ p["Wz_out"].T + x @ p["Wx_out"].T + p["b_out"]
    tape = EvalTape(spec, params, x, cache, squeeze)
    return (out[0] if squeeze else out), tape


def backward(spec: NetSpec, params: np.ndarray, tape: EvalTape, cotangent) -> np.ndarray:
    """Gradient of ``<output, cotangent>`` with respect to the flat parameters."""
    if tape.spec != spec or (tape.params is not params and not np.array_equal(tape.params, params)):
        raise TapeMismatch("tape was recorded with a different network or parameters")
    p = unpack(spec, params)
    grad = np.zeros(n_params(spec))
    g = unpack(spec, grad)
    cot = np.asarray(cotangent, dtype=np.float64)
    if tape.squeeze:
        cot = cot[None]
    cot = cot.reshape(len(tape.inputs), spec.output_dim)

    if spec.kind == "table":
        np.add.at(g["v"], tape.inputs, cot[:, 0])
        return grad
    x, act = tape.inputs, spec.activation
    if spec.kind == "linear":
        g["W"][...] = cot.T @ x
        g["b"][...] = cot.sum(axis=0)
        return grad
    if spec.kind == "mlp":
        n_layers = len(spec.hidden_dims) + 1
        delta = cot
        for i in range(n_layers - 1, -1, -1):
            a_in = tape.cache[i][0]
            g[f"W{i}"][...] = delta.T @ a_in
            g[f"b{i}"][...] = delta.sum(axis=0)
            if i > 0:
                z_prev = tape.cache[i - 1][1]
                delta = (delta @ p[f"W{i}"]) * _act_grad(act, z_prev)
        return grad
    if spec.kind == "resnet":
        a_last = tape.cache[-1][0]
        g["W_out"][...] = cot.T @ a_last
        g["b_out"][...] = cot.sum(axis=0)
        da = cot @ p["W_out"]
        for i in range(len(spec.hidden_dims) - 1, -1, -1):
            a_in, z = tape.cache[i + 1]
            dz = da * _act_grad(act, z)
            g[f"W{i}"][...] = dz.T @ a_in
            g[f"b{i}"][...] = dz.sum(axis=0)
            da = da + dz @ p[f"W{i}"]
        _, z0 = tape.cache[0]
        dz = da * _act_grad(act, z0)
        g["W_in"][...] = dz.T @ x
        g["b_in"][...] = dz.sum(axis=0)
        return grad
    # icnn
    n_hidden = len(spec.hidden_dims)
    a_last = tape.cache[-1][0]
    g["Wz_out"][...] = cot.T @ a_last
    g["Wx_out"][...] = cot.T @ x
    g["b_out"][...] = cot.sum(axis=0)
    da = cot @ p["Wz_out"]
    for i in range(n_hidden - 1, -1, -1):
        a_in, z = tape.cache[i]
        dz = da * _act_grad(act, z)
        g[f"b{i}"][...] = dz.sum(axis=0)
        if i == 0:
            g["Wx0"][...] = dz.T @ x
        else:
            g[f"Wz{i}"][...] = dz.T @ a_in
            g[f"Wx{i}"][...] = dz.T @ x
            da = dz @ p[f"Wz{i}"]
    return grad


def nonnegative_segments(spec: NetSpec) -> list[str]:
    if spec.kind != "icnn":
        return []
    return [name for name, _ in layout(spec) if name.startswith("Wz")]


def project_icnn(spec: NetSpec, params: np.ndarray) -> np.ndarray:
    """Clamp the hidden-to-hidden weights of an ICNN at zero. Idempotent."""
    if spec.kind != "icnn":
        raise WrongKind(f"project_icnn needs an icnn, got {spec.kind}")
    out = np.array(params, dtype=np.float64, copy=True)
    views = unpack(spec, out)
    for name in nonnegative_segments(spec):
        np.maximum(views[name], 0.0, out=views[name])
    return out


def init(spec: NetSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, zero tables."""
    params = np.zeros(n_params(spec))
    views = unpack(spec, params)
    for name, shape in layout(spec):
        if len(shape) == 2:
            fan_out, fan_in = shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            views[name][...] = rng.uniform(-a, a, size=shape)
    if spec.kind == "icnn":
        for name in nonnegative_segments(spec):
            np.abs(views[name], out=views[name])
    return params


@dataclass
class Network:
    """A network spec bundled with its current parameters."""

    spec: NetSpec
    params: np.ndarray

    def __call__(self, x):
        return forward(self.spec, self.params, x)[0]

    def forward(self, x):
        return forward(self.spec, self.params, x)

    def backward(self, tape, cotangent):
        return backward(self.spec, self.params, tape, cotangent)

    def with_params(self, params):
        return Network(self.spec, params)
