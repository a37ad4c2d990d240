"""A small 3D UNet with hand-written backward passes and an Adam optimizer.

Feature maps are arrays of shape ``(C, X, Y, Z)``. The network is

    encoder level l (l = 0..L-1): conv3 -> leaky, kept as skip, then 2^3 average pool
    bottleneck: conv3 -> leaky
    decoder level l (l = L-1..0): nearest x2 upsample -> conv3 -> leaky,
        concat [skip_l, up] on channels -> conv3 -> leaky
    output: 1x1x1 conv to one channel

with ``C0 * 2**l`` channels at level ``l``. Everything runs in float64.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NOISE_HALF_WIDTH = np.sqrt(0.3)  # uniform on [-a, a] has variance a^2/3 = 0.1


@dataclass(frozen=True)
class NetworkSpec:
    levels: int = 2
    base_channels: int = 8
    slope: float = 0.1
    in_channels: int = 1

    def __post_init__(self):
        if self.levels < 1 or self.base_channels < 1:
            raise ValueError("levels and base_channels must be >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def check_input(self, dims):
        step = 2**self.levels
        if any(n % step for n in dims):
            raise ValueError(f"input dims {tuple(dims)} must be divisible by 2^{self.levels} = {step}")

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """``(out_channels, in_channels, kernel)`` for every conv, in parameter order."""
        L, c = self.levels, self.channels
        shapes = []
        cin = self.in_channels
        for lv in range(L):
            shapes.append((c(lv), cin, 3))
            cin = c(lv)
        shapes.append((c(L), cin, 3))
        for lv in reversed(range(L)):
            shapes.append((c(lv), c(lv + 1), 3))
            shapes.append((c(lv), 2 * c(lv), 3))
        shapes.append((1, c(0), 1))
        return shapes


# ---------------------------------------------------------------- layers

def _offsets(k):
    r = range(k)
    return [(i, j, l) for i in r for j in r for l in r]


def im2col(x: np.ndarray, k: int = 3) -> np.ndarray:
    """Columns of shape ``(k^3 * C, X*Y*Z)``, row index ``offset * C + channel``."""
    C, X, Y, Z = x.shape
    if k == 1:
        return x.reshape(C, -1)
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad)))
    cols = np.empty((k**3, C, X, Y, Z))
    for n, (i, j, l) in enumerate(_offsets(k)):
        cols[n] = xp[:, i:i + X, j:j + Y, l:l + Z]
    return cols.reshape(k**3 * C, X * Y * Z)


def col2im(cols: np.ndarray, shape, k: int = 3) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back into a feature map."""
    C, X, Y, Z = shape
    if k == 1:
        return cols.reshape(shape)
    pad = k // 2
    cols = cols.reshape(k**3, C, X, Y, Z)
    xp = np.zeros((C, X + 2 * pad, Y + 2 * pad, Z + 2 * pad))
    for n, (i, j, l) in enumerate(_offsets(k)):
        xp[:, i:i + X, j:j + Y, l:l + Z] += cols[n]
    return xp[:, pad:pad + X, pad:pad + Y, pad:pad + Z]


def _weight_matrix(w: np.ndarray) -> np.ndarray:
    co, ci = w.shape[:2]
    return w.reshape(co, ci, -1).transpose(0, 2, 1).reshape(co, -1)


def _check_conv(x, w, b):
    if x.ndim != 4 or w.ndim != 5 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ValueError(
            f"conv shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}")
    if w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4] or w.shape[2] % 2 == 0:
        raise ValueError(f"kernel must be cubic with odd size, got {w.shape[2:]}")


def _conv_cols(x, w, b):
    _check_conv(x, w, b)
    cols = im2col(x, w.shape[2])
    y = _weight_matrix(w) @ cols + b[:, None]
    return y.reshape((w.shape[0],) + x.shape[1:]), cols


def conv3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size cross-correlation with zero padding, stride 1."""
    return _conv_cols(x, w, b)[0]


def conv3_backward(grad, x, w, cols=None, input_grad=True):
    """Gradients ``(d_input, d_weights, d_bias)`` of :func:`conv3_forward`.

    ``x`` may be replaced by its shape when ``cols`` is given. With
    ``input_grad=False`` the first element is ``None``.
    """
    shape = tuple(x) if isinstance(x, tuple) else x.shape
    k = w.shape[2]
    co, ci = w.shape[:2]
    if grad.shape != (co,) + shape[1:]:
        raise ValueError(f"upstream gradient {grad.shape} does not match conv output")
    if cols is None:
        cols = im2col(x, k)
    g = grad.reshape(co, -1)
    dw = (g @ cols.T).reshape(co, k**3, ci).transpose(0, 2, 1).reshape(w.shape)
    db = g.sum(axis=1)
    if not input_grad:
        return None, dw, db
    if k > 1 and co < ci:
        # transposed conv as a correlation with the flipped, channel-swapped kernel
        wt = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
        dx = (_weight_matrix(wt) @ im2col(grad, k)).reshape(shape)
    else:
        dx = col2im(_weight_matrix(w).T @ g, shape, k)
    return dx, dw, db


def leaky(pre, slope):
    return np.where(pre > 0, pre, slope * pre)


def leaky_backward(grad, pre, slope):
    return np.where(pre > 0, grad, slope * grad)


def avg_pool2(x):
    C, X, Y, Z = x.shape
    return x.reshape(C, X // 2, 2, Y // 2, 2, Z // 2, 2).mean(axis=(2, 4, 6))


def avg_pool2_backward(grad):
    return upsample2(grad) / 8.0


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample2_backward(grad):
    C, X, Y, Z = grad.shape
    return grad.reshape(C, X // 2, 2, Y // 2, 2, Z // 2, 2).sum(axis=(2, 4, 6))


# ---------------------------------------------------------------- network

def init_weights(spec: NetworkSpec, seed: int) -> list[np.ndarray]:
    """Fan-in scaled uniform weights (bound sqrt(6/fan_in)), zero biases.

    Returned as ``[w0, b0, w1, b1, ...]`` in layer order.
    """
    rng = np.random.default_rng(seed)
    params = []
    for co, ci, k in spec.layer_shapes():
        bound = np.sqrt(6.0 / (ci * k**3))
        params.append(rng.uniform(-bound, bound, size=(co, ci, k, k, k)))
        params.append(np.zeros(co))
    return params


def zero_parameters(spec: NetworkSpec) -> list[np.ndarray]:
    params = []
    for co, ci, k in spec.layer_shapes():
        params += [np.zeros((co, ci, k, k, k)), np.zeros(co)]
    return params


def check_parameters(spec: NetworkSpec, params) -> None:
    shapes = spec.layer_shapes()
    if len(params) != 2 * len(shapes):
        raise ValueError(f"expected {2 * len(shapes)} parameter tensors, got {len(params)}")
    for n, (co, ci, k) in enumerate(shapes):
        if params[2 * n].shape != (co, ci, k, k, k) or params[2 * n + 1].shape != (co,):
            raise ValueError(f"layer {n}: parameter shapes do not match the network spec")


@dataclass
class ForwardCache:
    input_shape: tuple
    cols: list = field(default_factory=list)  # im2col of each conv input
    pre: list = field(default_factory=list)  # pre-activations, None for the output layer
    conv_in_shapes: list = field(default_factory=list)


def unet_forward(spec: NetworkSpec, params, z):
    """Run the network on ``z`` (shape ``(X, Y, Z)`` or ``(1, X, Y, Z)``).

    Returns ``(output, cache)`` with ``output`` of shape ``(X, Y, Z)``.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 3:
        z = z[None]
    spec.check_input(z.shape[1:])
    cache = ForwardCache(z.shape)
    layer = iter(range(len(params) // 2))

    def conv_act(h, act=True):
        n = next(layer)
        y, cols = _conv_cols(h, params[2 * n], params[2 * n + 1])
        cache.cols.append(cols)
        cache.conv_in_shapes.append(h.shape)
        cache.pre.append(y if act else None)
        return leaky(y, spec.slope) if act else y

    h = z
    skips = []
    for _ in range(spec.levels):
        h = conv_act(h)
        skips.append(h)
        h = avg_pool2(h)
    h = conv_act(h)
    for lv in reversed(range(spec.levels)):
        u = conv_act(upsample2(h))
        h = conv_act(np.concatenate([skips[lv], u], axis=0))
    out = conv_act(h, act=False)
    return out[0], cache


def unet_backward(spec: NetworkSpec, params, cache: ForwardCache, grad_out):
    """Gradient of a scalar loss w.r.t. every parameter, given ``dloss/doutput``."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.input_shape[1:]:
        raise ValueError(
            f"output gradient {grad_out.shape} does not match cached input {cache.input_shape}")
    check_parameters(spec, params)
    grads = [None] * len(params)
    layer = iter(reversed(range(len(params) // 2)))

    def conv_back(g):
        n = next(layer)
        if cache.pre[n] is not None:
            g = leaky_backward(g, cache.pre[n], spec.slope)
        dx, grads[2 * n], grads[2 * n + 1] = conv3_backward(
            g, cache.conv_in_shapes[n], params[2 * n], cols=cache.cols[n], input_grad=n > 0)
        return dx

    g = conv_back(grad_out[None])
    skip_grads = [None] * spec.levels
    for lv in range(spec.levels):
        g = conv_back(g)
        c = spec.channels(lv)
        skip_grads[lv], g_up = g[:c], g[c:]
        g = upsample2_backward(conv_back(g_up))
    g = conv_back(g)
    for lv in reversed(range(spec.levels)):
        g = avg_pool2_backward(g) + skip_grads[lv]
        g = conv_back(g)
    return grads


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def zeros_like(cls, params, lr=1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], lr, **kw)


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("parameter, gradient and moment lists differ in length")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- inputs and checkpoints

def make_noise_inputs(grid, seed: int) -> list[np.ndarray]:
    """One fixed ``(1, px, py, pz)`` uniform noise tensor per patch, keyed by ``(seed, index)``."""
    count = len(grid)
    patch = tuple(grid.patch)
    return [
        np.random.default_rng([int(seed), i]).uniform(
            -NOISE_HALF_WIDTH, NOISE_HALF_WIDTH, size=(1,) + patch)
        for i in range(count)
    ]


_CKPT_MAGIC = "patchqsm-parameters v1"


def save_parameters(path, spec: NetworkSpec, params) -> Path:
    """Text header then float64 little-endian tensors in layer order."""
    check_parameters(spec, params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "levels": spec.levels, "base_channels": spec.base_channels, "slope": spec.slope,
        "in_channels": spec.in_channels, "shapes": [list(p.shape) for p in params],
    }
    with open(path, "wb") as fh:
        fh.write(f"{_CKPT_MAGIC}\n{json.dumps(header)}\n".encode("utf-8"))
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    return path


def load_parameters(path):
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8").strip()
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    spec = NetworkSpec(header["levels"], header["base_channels"], header["slope"],
                       header["in_channels"])
    params, pos = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) * 8
        if pos + n > len(payload):
            raise ValueError(f"{path}: truncated checkpoint")
        params.append(np.frombuffer(payload[pos:pos + n], dtype="<f8").reshape(shape).copy())
        pos += n
    if pos != len(payload):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    check_parameters(spec, params)
    return spec, params
