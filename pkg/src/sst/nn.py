"""Minimal differentiable numeric engine for linear layer stacks.

Supports exactly the layer kinds the road-segmentation topologies need:
2-D convolution (valid/same, optional ReLU), max pooling, dense, flatten
and sigmoid, together with loss functions, backpropagation and plain SGD.

All math runs in float64.  Convolutions are lowered to matrix products
(im2col), which keeps the hot loops inside BLAS.  Forward evaluation is a
pure function of the inputs, so identical inputs always produce identical
outputs; parallel callers may share layer objects read-only.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError, TrainingError

DTYPE = np.float64

VALID = "valid"
SAME = "same"

MSE = "mean_squared_error"
BCE = "binary_log_loss"
LOSSES = (MSE, BCE)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def _as_batch(x, rank):
    """Return (batched array, had_batch flag) for an input of given core rank."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == rank:
        return x[None], False
    if x.ndim == rank + 1:
        return x, True
    raise DimensionError(f"expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _same_pad_amounts(fh, fw):
    # Left/top gets the smaller half when the filter extent is even.
    ph, pw = fh - 1, fw - 1
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


def conv2d_forward(x, filters, biases, padding=VALID):
    """Cross-correlate `x` (H,W,C or N,H,W,C) with `filters` (K,fh,fw,C).

    Returns the pre-activation feature map (H',W',K or N,H',W',K); no
    nonlinearity is applied here.  `padding` is "valid" (no padding,
    output shrinks by filter-1) or "same" (zero padding, output keeps
    the input height/width).
    """
    xb, batched = _as_batch(x, 3)
    w = np.asarray(filters, dtype=DTYPE)
    b = np.asarray(biases, dtype=DTYPE)
    if w.ndim != 4:
        raise DimensionError(f"filters must have shape (K,fh,fw,C), got {w.shape}")
    k, fh, fw, c = w.shape
    if xb.shape[-1] != c:
        raise DimensionError(
            f"filter channels ({c}) do not match input channels ({xb.shape[-1]})"
        )
    if b.shape != (k,):
        raise DimensionError(f"biases must have shape ({k},), got {b.shape}")
    if padding == SAME:
        t, bt, l, r = _same_pad_amounts(fh, fw)
        xb = np.pad(xb, ((0, 0), (t, bt), (l, r), (0, 0)))
    elif padding != VALID:
        raise ArgumentError(f"unknown padding mode {padding!r}")
    n, h, wd, _ = xb.shape
    if fh > h or fw > wd:
        raise DimensionError(
            f"filter {fh}x{fw} larger than (padded) input {h}x{wd}"
        )
    cols = _im2col(xb, fh, fw)                          # (N*OH*OW, fh*fw*C)
    wmat = w.transpose(1, 2, 3, 0).reshape(fh * fw * c, k)
    y = cols @ wmat
    y += b
    y = y.reshape(n, h - fh + 1, wd - fw + 1, k)
    return y if batched else y[0]


def _im2col(xb, fh, fw):
    """Flatten all fh×fw windows of a batch into rows (copy, C-contiguous)."""
    n = xb.shape[0]
    win = np.lib.stride_tricks.sliding_window_view(xb, (fh, fw), axis=(1, 2))
    # win: (N, OH, OW, C, fh, fw) -> rows of (fh, fw, C)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n * win.shape[1] * win.shape[2], fh * fw * xb.shape[3])


def maxpool_forward(x, ph, pw):
    """Max over non-overlapping ph×pw windows; trailing remainder rows/cols drop."""
    xb, batched = _as_batch(x, 3)
    n, h, w, c = xb.shape
    if ph < 1 or pw < 1:
        raise ArgumentError("pool extents must be >= 1")
    if ph > h or pw > w:
        raise DimensionError(f"pool {ph}x{pw} larger than input {h}x{w}")
    oh, ow = h // ph, w // pw
    xc = xb[:, : oh * ph, : ow * pw, :].reshape(n, oh, ph, ow, pw, c)
    y = xc.max(axis=(2, 4))
    return y if batched else y[0]


def dense_forward(x, weights, biases):
    """Affine map of flattened inputs: (N,D) @ (D,U) + (U,)."""
    xb, batched = _as_batch(x, 1)
    w = np.asarray(weights, dtype=DTYPE)
    b = np.asarray(biases, dtype=DTYPE)
    if w.ndim != 2 or xb.shape[1] != w.shape[0]:
        raise DimensionError(
            f"dense weights {w.shape} incompatible with input length {xb.shape[1]}"
        )
    y = xb @ w + b
    return y if batched else y[0]


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred, target):
    """Mean squared error over every element."""
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    d = pred - target
    return float(np.mean(d * d))


def bce_from_logits(logits, target):
    """Binary log-loss, computed from pre-sigmoid values for stability."""
    z = np.asarray(logits, dtype=DTYPE)
    t = np.asarray(target, dtype=DTYPE)
    # max(z,0) - t*z + log(1+exp(-|z|))
    return float(np.mean(np.maximum(z, 0.0) - t * z + np.log1p(np.exp(-np.abs(z)))))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2D:
    """Convolution layer: K filters of fh×fw×C plus bias, optional ReLU."""

    kind = "convolution"

    def __init__(self, filters, biases, padding=VALID, activation="relu"):
        self.w = np.asarray(filters, dtype=DTYPE)
        self.b = np.asarray(biases, dtype=DTYPE)
        if padding not in (VALID, SAME):
            raise ArgumentError(f"unknown padding mode {padding!r}")
        if activation not in (None, "relu"):
            raise ArgumentError(f"unsupported conv activation {activation!r}")
        self.padding = padding
        self.activation = activation

    @property
    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"convolution expects (H,W,C) input, got {in_shape}")
        h, w, c = in_shape
        k, fh, fw, fc = self.w.shape
        if fc != c:
            raise DimensionError(
                f"convolution expects {fc} input channels, got {c}"
            )
        if self.padding == SAME:
            return (h, w, k)
        if fh > h or fw > w:
            raise DimensionError(f"filter {fh}x{fw} larger than input {h}x{w}")
        return (h - fh + 1, w - fw + 1, k)

    def forward(self, xb):
        z = conv2d_forward(xb, self.w, self.b, self.padding)
        y = relu(z) if self.activation == "relu" else z
        return y, (xb, z)

    def backward(self, cache, dy, need_dx=True):
        xb, z = cache
        k, fh, fw, c = self.w.shape
        if self.activation == "relu":
            dy = dy * (z > 0)
        if self.padding == SAME:
            t, bt, l, r = _same_pad_amounts(fh, fw)
            xp = np.pad(xb, ((0, 0), (t, bt), (l, r), (0, 0)))
        else:
            t = l = 0
            xp = xb
        n, oh, ow = dy.shape[:3]
        cols = _im2col(xp, fh, fw)                       # (N*OH*OW, fh*fw*C)
        dymat = dy.reshape(n * oh * ow, k)
        dwmat = cols.T @ dymat                           # (fh*fw*C, K)
        dw = dwmat.reshape(fh, fw, c, k).transpose(3, 0, 1, 2)
        db = dymat.sum(axis=0)
        if not need_dx:
            return None, [dw, db]
        # Full correlation of dy with the 180°-rotated filters gives the
        # gradient w.r.t. the padded input; crop away the padding region.
        dyp = np.pad(dy, ((0, 0), (fh - 1, fh - 1), (fw - 1, fw - 1), (0, 0)))
        wflip = self.w[:, ::-1, ::-1, :]                 # (K,fh,fw,C)
        wmat = wflip.transpose(1, 2, 0, 3).reshape(fh * fw * k, c)
        dcols = _im2col(dyp, fh, fw)                     # rows of (fh,fw,K)
        dxp = (dcols @ wmat).reshape(n, xp.shape[1], xp.shape[2], c)
        dx = dxp[:, t : t + xb.shape[1], l : l + xb.shape[2], :]
        return dx, [dw, db]


class MaxPool2D:
    kind = "maxpool"

    def __init__(self, ph, pw):
        if ph < 1 or pw < 1:
            raise ArgumentError("pool extents must be >= 1")
        self.ph = int(ph)
        self.pw = int(pw)

    params = []

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"maxpool expects (H,W,C) input, got {in_shape}")
        h, w, c = in_shape
        if self.ph > h or self.pw > w:
            raise DimensionError(f"pool {self.ph}x{self.pw} larger than input {h}x{w}")
        return (h // self.ph, w // self.pw, c)

    def forward(self, xb):
        n, h, w, c = xb.shape
        oh, ow = h // self.ph, w // self.pw
        xc = xb[:, : oh * self.ph, : ow * self.pw, :]
        xw = xc.reshape(n, oh, self.ph, ow, self.pw, c)
        xw = xw.transpose(0, 1, 3, 5, 2, 4).reshape(n, oh, ow, c, self.ph * self.pw)
        idx = xw.argmax(axis=-1)
        y = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
        return y, (xb.shape, idx)

    def backward(self, cache, dy, need_dx=True):
        (n, h, w, c), idx = cache
        if not need_dx:
            return None, []
        oh, ow = h // self.ph, w // self.pw
        dxw = np.zeros((n, oh, ow, c, self.ph * self.pw), dtype=DTYPE)
        np.put_along_axis(dxw, idx[..., None], dy[..., None], axis=-1)
        dxc = dxw.reshape(n, oh, ow, c, self.ph, self.pw)
        dxc = dxc.transpose(0, 1, 4, 2, 5, 3).reshape(n, oh * self.ph, ow * self.pw, c)
        dx = np.zeros((n, h, w, c), dtype=DTYPE)
        dx[:, : oh * self.ph, : ow * self.pw, :] = dxc
        return dx, []


class Flatten:
    kind = "flatten"

    params = []

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, xb):
        return xb.reshape(xb.shape[0], -1), xb.shape

    def backward(self, cache, dy, need_dx=True):
        return (dy.reshape(cache) if need_dx else None), []


class Dense:
    kind = "dense"

    def __init__(self, weights, biases):
        self.w = np.asarray(weights, dtype=DTYPE)
        self.b = np.asarray(biases, dtype=DTYPE)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[1],):
            raise DimensionError(
                f"dense weights {self.w.shape} and biases {self.b.shape} inconsistent"
            )

    @property
    def params(self):
        return [self.w, self.b]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.w.shape[0]:
            raise DimensionError(
                f"dense layer expects flat input of {self.w.shape[0]}, got {in_shape}"
            )
        return (self.w.shape[1],)

    def forward(self, xb):
        return xb @ self.w + self.b, xb

    def backward(self, cache, dy, need_dx=True):
        xb = cache
        dw = xb.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ self.w.T if need_dx else None
        return dx, [dw, db]


class Sigmoid:
    kind = "sigmoid"

    params = []

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, xb):
        y = sigmoid(xb)
        return y, y

    def backward(self, cache, dy, need_dx=True):
        y = cache
        return (dy * y * (1.0 - y) if need_dx else None), []


# ---------------------------------------------------------------------------
# network-level helpers
# ---------------------------------------------------------------------------

def infer_shapes(layers, input_shape):
    """Propagate `input_shape` through the stack; returns every stage's shape.

    The result has len(layers)+1 entries, starting with the input shape.
    Raises DimensionError as soon as a layer cannot accept its input.
    """
    shapes = [tuple(int(e) for e in input_shape)]
    for layer in layers:
        shapes.append(tuple(int(e) for e in layer.out_shape(shapes[-1])))
    return shapes


def shape_trace(layers, input_shape):
    """Element counts at each stage, with consecutive duplicates collapsed."""
    counts = [int(np.prod(s)) for s in infer_shapes(layers, input_shape)]
    trace = [counts[0]]
    for c in counts[1:]:
        if c != trace[-1]:
            trace.append(c)
    return trace


def forward_network(layers, xb, keep_caches=True):
    """Run a batch through the stack; returns (output, per-layer caches)."""
    caches = []
    for layer in layers:
        xb, cache = layer.forward(xb)
        if keep_caches:
            caches.append(cache)
    return xb, caches


def network_loss_and_grad(layers, loss, xb, target):
    """Forward + backward pass.

    Returns (loss value, list of per-layer parameter-gradient lists).  The
    gradient of the mean loss is propagated; for the binary log-loss the
    sigmoid layer is fused with the loss so the output-layer gradient is the
    numerically exact (p - t) / N.
    """
    target = np.asarray(target, dtype=DTYPE)
    if loss not in LOSSES:
        raise ArgumentError(f"unknown loss {loss!r}")
    fused = loss == BCE
    if fused and not isinstance(layers[-1], Sigmoid):
        raise ConfigError("binary log-loss requires a sigmoid output layer")

    stack = layers[:-1] if fused else layers
    out, caches = forward_network(stack, xb)
    if fused:
        logits = out
        p = sigmoid(logits)
        if p.shape != target.shape:
            raise DimensionError(
                f"target shape {target.shape} does not match output {p.shape}"
            )
        value = bce_from_logits(logits, target)
        dy = (p - target) / p.size
    else:
        if out.shape != target.shape:
            raise DimensionError(
                f"target shape {target.shape} does not match output {out.shape}"
            )
        value = mse_loss(out, target)
        dy = (2.0 / out.size) * (out - target)

    grads = [None] * len(layers)
    if fused:
        grads[-1] = []
    for i in range(len(stack) - 1, -1, -1):
        need_dx = any(stack[j].params for j in range(i))
        dy, g = stack[i].backward(caches[i], dy, need_dx=need_dx)
        grads[i] = g
    return value, grads


def sgd_step(layers, grads, learning_rate):
    """In-place θ ← θ − lr·∇θ.  Raises TrainingError on non-finite gradients."""
    if learning_rate < 0:
        raise ArgumentError("learning rate must be non-negative")
    for layer, layer_grads in zip(layers, grads):
        params = layer.params
        if len(params) != len(layer_grads):
            raise DimensionError(
                f"{layer.kind}: {len(layer_grads)} gradients for {len(params)} parameters"
            )
        for p, g in zip(params, layer_grads):
            if p.shape != g.shape:
                raise DimensionError(
                    f"{layer.kind}: gradient shape {g.shape} != parameter shape {p.shape}"
                )
            if not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient in {layer.kind} parameter of shape {p.shape}"
                )
            p -= learning_rate * g


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE, copy=False)
