"""Dense rank-4 tensor engine with tape-based reverse-mode differentiation.

Every value in the system is a `Tensor4` with shape (batch, channels,
height, width) in float64. Ops record themselves on the active tape;
`backward(loss)` replays the tape in reverse and accumulates gradients
into leaf tensors. Convolutions are lowered to GEMM via an im2col
gather, and every conv application is counted by a global
multiply-accumulate counter so analytic cost models can be checked
against executed topologies.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor4",
    "ConvParams",
    "tape_scope",
    "no_grad",
    "reset_tape",
    "backward",
    "reset_mac_counter",
    "mac_count",
    "conv2d",
    "upsample2x",
    "concat_channels",
    "slice_channels",
    "slice_spatial",
    "add",
    "sub",
    "mul",
    "div",
    "affine",
    "mul_array",
    "add_array",
    "minimum_with",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "pow_const",
    "group_norm",
    "avg_pool2d",
    "max_pool2d",
    "scale_by",
    "reduce_sum",
    "reduce_mean",
    "rearrange_quadrants",
    "inverse_rearrange_quadrants",
]


class Tensor4:
    """A (n, c, h, w) float64 array with optional gradient tracking.

    Tensors are treated as immutable once produced by an op. `grad` is
    populated only on leaves (tensors not produced by a recorded op).
    """

    __slots__ = ("data", "grad", "requires_grad", "_op_output")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 requires a rank-4 array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"Tensor4 dimensions must all be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op_output = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor4":
        return Tensor4(self.data.copy())

    def __add__(self, other):
        if isinstance(other, Tensor4):
            return add(self, other)
        return affine(self, shift=float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor4):
            return mul(self, other)
        return affine(self, scale=float(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor4(shape={self.shape}{flag})"


@dataclass
class ConvParams:
    """Weights of one 2-d convolution: weight (c_out, c_in, k_h, k_w), bias (1, c_out, 1, 1)."""

    weight: Tensor4
    bias: Tensor4
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        co = self.weight.shape[0]
        if self.bias.shape != (1, co, 1, 1):
            raise ValueError(
                f"bias shape {self.bias.shape} does not match weight c_out={co}; expected (1, {co}, 1, 1)"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self):
        return self.weight.shape[2], self.weight.shape[3]


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------


class _Tape:
    def __init__(self):
        self.nodes = []  # (output tensor, backward closure)
        self.recording = True


_TAPE_STACK = [_Tape()]
_MACS = [0]


def _tape() -> _Tape:
    return _TAPE_STACK[-1]


@contextlib.contextmanager
def tape_scope():
    """Run a forward/backward pass on a fresh, isolated tape."""
    _TAPE_STACK.append(_Tape())
    try:
        yield _TAPE_STACK[-1]
    finally:
        _TAPE_STACK.pop()


@contextlib.contextmanager
def no_grad():
    """Disable recording (inference mode); outputs will not require grad."""
    t = _tape()
    prev = t.recording
    t.recording = False
    try:
        yield
    finally:
        t.recording = prev


def reset_tape():
    """Drop all recorded nodes on the current tape."""
    _tape().nodes.clear()


def reset_mac_counter():
    _MACS[0] = 0


def mac_count() -> int:
    """Multiply-accumulates executed by conv2d since the last reset (batch included)."""
    return _MACS[0]


def _record(out: Tensor4, inputs, backward_fn) -> Tensor4:
    t = _tape()
    if t.recording and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._op_output = True
        t.nodes.append((out, backward_fn))
    return out


def backward(loss: Tensor4):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf on the current tape.

    Repeated calls without zeroing grads accumulate. The loss must be a
    single-element tensor produced by a recorded computation.
    """
    if not isinstance(loss, Tensor4) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ValueError(f"backward requires a scalar (single-element) loss, got shape {shape}")
    if not loss._op_output:
        raise ValueError("loss was not produced by a recorded computation on the active tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, fn in reversed(_tape().nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for tensor, contrib in fn(g):
            if not tensor.requires_grad:
                continue
            if tensor._op_output:
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib
            else:
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += contrib


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv_output_dim(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _gather_cols(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # cols[c, ki, kj, n, y, x] = xp[n, c, ki + stride*y, kj + stride*x]
    # (channel-major so the GEMM views below are reshapes, not copies)
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, :, ki : ki + stride * (oh - 1) + 1 : stride,
                                 kj : kj + stride * (ow - 1) + 1 : stride].transpose(1, 0, 2, 3)
    return cols


def _scatter_cols(gcols: np.ndarray, in_shape, kh, kw, stride, padding, oh, ow) -> np.ndarray:
    # adjoint of _gather_cols; gcols is (c, ki, kj, n, y, x)
    n, c, h, w = in_shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki : ki + stride * (oh - 1) + 1 : stride,
                kj : kj + stride * (ow - 1) + 1 : stride] += gcols[:, ki, kj].transpose(1, 0, 2, 3)
    if padding:
        return gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def conv2d(x: Tensor4, params: ConvParams) -> Tensor4:
    """Cross-correlation with bias; differentiable w.r.t. input, weight and bias."""
    n, c, h, w = x.shape
    weight, bias = params.weight, params.bias
    co, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {ci}")
    s, p = params.stride, params.padding
    oh = conv_output_dim(h, kh, s, p)
    ow = conv_output_dim(w, kw, s, p)
    if oh < 1 or ow < 1:
        raise ValueError(
            f"conv2d would produce an empty output: input {h}x{w}, kernel {kh}x{kw}, stride {s}, padding {p}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _gather_cols(xp, kh, kw, s, oh, ow)
    cols_mat = cols.reshape(ci * kh * kw, n * oh * ow)
    w_mat = np.ascontiguousarray(weight.data).reshape(co, ci * kh * kw)
    out_data = (w_mat @ cols_mat).reshape(co, n, oh, ow).transpose(1, 0, 2, 3) \
        + bias.data.reshape(1, co, 1, 1)
    _MACS[0] += n * co * ci * kh * kw * oh * ow
    out = Tensor4(out_data)

    def backward_fn(g):
        g_mat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * oh * ow)
        contribs = []
        if weight.requires_grad:
            contribs.append((weight, (g_mat @ cols_mat.T).reshape(co, ci, kh, kw)))
        if bias.requires_grad:
            contribs.append((bias, g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1)))
        if x.requires_grad:
            gcols = (w_mat.T @ g_mat).reshape(ci, kh, kw, n, oh, ow)
            contribs.append((x, _scatter_cols(gcols, x.shape, kh, kw, s, p, oh, ow)))
        return contribs

    return _record(out, (x, weight, bias), backward_fn)


def avg_pool2d(x: Tensor4, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor4:
    """Average pooling with zero padding (padded cells count toward the mean)."""
    n, c, h, w = x.shape
    oh = conv_output_dim(h, kernel, stride, padding)
    ow = conv_output_dim(w, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"avg_pool2d would produce an empty output on input {h}x{w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _gather_cols(xp, kernel, kernel, stride, oh, ow)
    out = Tensor4(cols.mean(axis=(1, 2)).transpose(1, 0, 2, 3))

    def backward_fn(g):
        ge = np.broadcast_to(
            (g / (kernel * kernel)).transpose(1, 0, 2, 3)[:, None, None],
            (c, kernel, kernel, n, oh, ow))
        return [(x, _scatter_cols(ge, x.shape, kernel, kernel, stride, padding, oh, ow))]

    return _record(out, (x,), backward_fn)


def max_pool2d(x: Tensor4, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor4:
    """Max pooling; padded cells never win (padded with -inf)."""
    n, c, h, w = x.shape
    oh = conv_output_dim(h, kernel, stride, padding)
    ow = conv_output_dim(w, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"max_pool2d would produce an empty output on input {h}x{w}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    cols = _gather_cols(xp, kernel, kernel, stride, oh, ow).reshape(c, kernel * kernel, n, oh, ow)
    idx = cols.argmax(axis=1)
    out = Tensor4(np.take_along_axis(cols, idx[:, None], axis=1)[:, 0].transpose(1, 0, 2, 3))

    def backward_fn(g):
        gcols = np.zeros((c, kernel * kernel, n, oh, ow), dtype=np.float64)
        np.put_along_axis(gcols, idx[:, None], g.transpose(1, 0, 2, 3)[:, None], axis=1)
        ge = gcols.reshape(c, kernel, kernel, n, oh, ow)
        return [(x, _scatter_cols(ge, x.shape, kernel, kernel, stride, padding, oh, ow))]

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def upsample2x(x: Tensor4) -> Tensor4:
    """Nearest-neighbor upsampling by a factor of 2 in both spatial dims."""
    n, c, h, w = x.shape
    out = Tensor4(x.data.repeat(2, axis=2).repeat(2, axis=3))

    def backward_fn(g):
        return [(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))]

    return _record(out, (x,), backward_fn)


def concat_channels(a: Tensor4, b: Tensor4) -> Tensor4:
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels requires matching (n, h, w): got {a.shape} vs {b.shape}")
    out = Tensor4(np.concatenate([a.data, b.data], axis=1))

    def backward_fn(g):
        return [(a, g[:, :ca]), (b, g[:, ca:])]

    return _record(out, (a, b), backward_fn)


def slice_channels(x: Tensor4, start: int, stop: int) -> Tensor4:
    c = x.shape[1]
    if not (0 <= start < stop <= c):
        raise ValueError(f"invalid channel slice [{start}:{stop}] for {c} channels")
    out = Tensor4(x.data[:, start:stop].copy())

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return [(x, gx)]

    return _record(out, (x,), backward_fn)


def slice_spatial(x: Tensor4, h_stop: int, w_stop: int) -> Tensor4:
    """Crop to the top-left h_stop x w_stop window."""
    _, _, h, w = x.shape
    if not (1 <= h_stop <= h and 1 <= w_stop <= w):
        raise ValueError(f"invalid spatial crop {h_stop}x{w_stop} for input {h}x{w}")
    out = Tensor4(x.data[:, :, :h_stop, :w_stop].copy())

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[:, :, :h_stop, :w_stop] = g
        return [(x, gx)]

    return _record(out, (x,), backward_fn)


def rearrange_quadrants(c_tilde: Tensor4, num_classes: int) -> Tensor4:
    """Relocate 4N channels at (x, y) to N channels at the four nearest neighbors.

    out[n, c, 2x+i, 2y+j] = in[n, (2i+j)*N + c, x, y]. A pure bijective
    relocation: no arithmetic is performed on the values.
    """
    n, ch, h, w = c_tilde.shape
    if ch % 4 != 0:
        raise ValueError(f"rearrange_quadrants requires channels divisible by 4, got {ch}")
    if ch != 4 * num_classes:
        raise ValueError(f"rearrange_quadrants: channels {ch} != 4 * num_classes ({4 * num_classes})")
    out_data = np.empty((n, num_classes, 2 * h, 2 * w), dtype=np.float64)
    for i in (0, 1):
        for j in (0, 1):
            q = 2 * i + j
            out_data[:, :, i::2, j::2] = c_tilde.data[:, q * num_classes : (q + 1) * num_classes]
    out = Tensor4(out_data)

    def backward_fn(g):
        gx = np.empty_like(c_tilde.data)
        for i in (0, 1):
            for j in (0, 1):
                q = 2 * i + j
                gx[:, q * num_classes : (q + 1) * num_classes] = g[:, :, i::2, j::2]
        return [(c_tilde, gx)]

    return _record(out, (c_tilde,), backward_fn)


def inverse_rearrange_quadrants(c_hat: Tensor4, num_classes: int) -> Tensor4:
    """Inverse of rearrange_quadrants: (n, N, 2H, 2W) back to (n, 4N, H, W)."""
    n, ch, h, w = c_hat.shape
    if ch != num_classes:
        raise ValueError(f"inverse_rearrange_quadrants: channels {ch} != num_classes {num_classes}")
    if h % 2 or w % 2:
        raise ValueError(f"inverse_rearrange_quadrants requires even spatial dims, got {h}x{w}")
    out_data = np.empty((n, 4 * num_classes, h // 2, w // 2), dtype=np.float64)
    for i in (0, 1):
        for j in (0, 1):
            q = 2 * i + j
            out_data[:, q * num_classes : (q + 1) * num_classes] = c_hat.data[:, :, i::2, j::2]
    out = Tensor4(out_data)

    def backward_fn(g):
        gx = np.empty_like(c_hat.data)
        for i in (0, 1):
            for j in (0, 1):
                q = 2 * i + j
                gx[:, :, i::2, j::2] = g[:, q * num_classes : (q + 1) * num_classes]
        return [(c_hat, gx)]

    return _record(out, (c_hat,), backward_fn)


# ---------------------------------------------------------------------------
# arithmetic and activations
# ---------------------------------------------------------------------------


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op} requires identical shapes: {a.shape} vs {b.shape}")


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape("add", a, b)
    out = Tensor4(a.data + b.data)
    return _record(out, (a, b), lambda g: [(a, g), (b, g)])


def sub(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape("sub", a, b)
    out = Tensor4(a.data - b.data)
    return _record(out, (a, b), lambda g: [(a, g), (b, -g)])


def mul(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape("mul", a, b)
    out = Tensor4(a.data * b.data)
    return _record(out, (a, b), lambda g: [(a, g * b.data), (b, g * a.data)])


def div(a: Tensor4, b: Tensor4) -> Tensor4:
    _check_same_shape("div", a, b)
    out = Tensor4(a.data / b.data)
    return _record(out, (a, b), lambda g: [(a, g / b.data), (b, -g * a.data / (b.data * b.data))])


def affine(x: Tensor4, scale: float = 1.0, shift: float = 0.0) -> Tensor4:
    out = Tensor4(x.data * scale + shift)
    return _record(out, (x,), lambda g: [(x, g * scale)])


def mul_array(x: Tensor4, arr: np.ndarray) -> Tensor4:
    """Elementwise product with a constant array (no gradient into arr)."""
    arr = np.asarray(arr, dtype=np.float64)
    if np.broadcast_shapes(x.shape, arr.shape) != x.shape:
        raise ValueError(f"constant array {arr.shape} must broadcast to input {x.shape}")
    out = Tensor4(x.data * arr)
    return _record(out, (x,), lambda g: [(x, g * arr)])


def add_array(x: Tensor4, arr: np.ndarray) -> Tensor4:
    """Elementwise sum with a constant array (no gradient into arr)."""
    arr = np.asarray(arr, dtype=np.float64)
    if np.broadcast_shapes(x.shape, arr.shape) != x.shape:
        raise ValueError(f"constant array {arr.shape} must broadcast to input {x.shape}")
    out = Tensor4(x.data + arr)
    return _record(out, (x,), lambda g: [(x, g)])


def minimum_with(x: Tensor4, arr: np.ndarray) -> Tensor4:
    """Elementwise min with a constant array; subgradient goes to x at ties."""
    arr = np.asarray(arr, dtype=np.float64)
    if np.broadcast_shapes(x.shape, arr.shape) != x.shape:
        raise ValueError(f"constant array {arr.shape} must broadcast to input {x.shape}")
    out = Tensor4(np.minimum(x.data, arr))
    mask = (x.data <= arr).astype(np.float64)
    return _record(out, (x,), lambda g: [(x, g * mask)])


def relu(x: Tensor4) -> Tensor4:
    out = Tensor4(np.maximum(x.data, 0.0))
    mask = (x.data > 0).astype(np.float64)
    return _record(out, (x,), lambda g: [(x, g * mask)])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor4) -> Tensor4:
    y = _sigmoid(x.data)
    out = Tensor4(y)
    return _record(out, (x,), lambda g: [(x, g * y * (1.0 - y))])


def exp(x: Tensor4) -> Tensor4:
    y = np.exp(x.data)
    out = Tensor4(y)
    return _record(out, (x,), lambda g: [(x, g * y)])


def log(x: Tensor4) -> Tensor4:
    out = Tensor4(np.log(x.data))
    return _record(out, (x,), lambda g: [(x, g / x.data)])


def softplus(x: Tensor4) -> Tensor4:
    """log(1 + exp(x)), computed without overflow."""
    out = Tensor4(np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data))))
    sig = _sigmoid(x.data)
    return _record(out, (x,), lambda g: [(x, g * sig)])


def pow_const(x: Tensor4, power: float) -> Tensor4:
    y = x.data ** power
    out = Tensor4(y)
    return _record(out, (x,), lambda g: [(x, g * power * x.data ** (power - 1.0))])


def group_norm(x: Tensor4, groups: int, gamma: Tensor4, beta: Tensor4, eps: float = 1e-5) -> Tensor4:
    """Per-group normalization over (channels/groups, h, w), then affine."""
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"group_norm requires channels ({c}) divisible by groups ({groups})")
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ValueError(f"gamma/beta must have shape (1, {c}, 1, 1)")
    cg = c // groups
    m = cg * h * w
    xg = x.data.reshape(n, groups, cg, h, w)
    mean = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mean) * inv
    gamma_g = gamma.data.reshape(1, groups, cg, 1, 1)
    out = Tensor4((gamma_g * xhat + beta.data.reshape(1, groups, cg, 1, 1)).reshape(n, c, h, w))

    def backward_fn(g):
        gg = g.reshape(n, groups, cg, h, w)
        contribs = []
        if gamma.requires_grad:
            contribs.append((gamma, (gg * xhat).sum(axis=(0, 3, 4)).reshape(1, c, 1, 1)))
        if beta.requires_grad:
            contribs.append((beta, gg.sum(axis=(0, 3, 4)).reshape(1, c, 1, 1)))
        if x.requires_grad:
            dxhat = gg * gamma_g
            s1 = dxhat.sum(axis=(2, 3, 4), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(2, 3, 4), keepdims=True)
            gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
            contribs.append((x, gx.reshape(n, c, h, w)))
        return contribs

    return _record(out, (x, gamma, beta), backward_fn)


def scale_by(x: Tensor4, s: Tensor4) -> Tensor4:
    """Multiply a map by a learnable (1, 1, 1, 1) scalar tensor."""
    if s.shape != (1, 1, 1, 1):
        raise ValueError(f"scale_by expects a (1, 1, 1, 1) scalar tensor, got {s.shape}")
    out = Tensor4(x.data * s.data.reshape(()))

    def backward_fn(g):
        return [(x, g * s.data.reshape(())), (s, (g * x.data).sum().reshape(1, 1, 1, 1))]

    return _record(out, (x, s), backward_fn)


def reduce_sum(x: Tensor4) -> Tensor4:
    out = Tensor4(x.data.sum().reshape(1, 1, 1, 1))
    return _record(out, (x,), lambda g: [(x, np.full_like(x.data, g.reshape(())))])


def reduce_mean(x: Tensor4) -> Tensor4:
    size = x.data.size
    out = Tensor4(x.data.mean().reshape(1, 1, 1, 1))
    return _record(out, (x,), lambda g: [(x, np.full_like(x.data, g.reshape(()) / size))])
