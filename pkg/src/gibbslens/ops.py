"""Dense-tensor numeric kernels with exact analytic gradients.

Tensors are plain float64 ``numpy.ndarray`` values laid out row-major;
images and feature maps use (height, width, channels) axes. All kernels
are pure functions: valid (no padding), stride-1 convolution as
cross-correlation, 2x2/stride-2 max pooling, ReLU, a flattening linear
map, numerically stable softmax, and cross-entropy.

Each public single-example operation has a ``batch_``-prefixed variant
operating on a leading batch axis; the single-example forms are thin
wrappers over those, so both share one arithmetic path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray

# cross_entropy floors the picked probability here before taking the log
PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class KernelBank:
    """Convolution filters (kh, kw, cin, cout) plus per-filter bias."""

    kernels: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        k = np.ascontiguousarray(np.asarray(self.kernels, dtype=np.float64))
        b = np.ascontiguousarray(np.asarray(self.bias, dtype=np.float64))
        if k.ndim != 4:
            raise ValueError(f"kernels must have rank 4 (kh, kw, cin, cout), got shape {k.shape}")
        kh, kw, _, cout = k.shape
        if kh < 1 or kw < 1 or cout < 1:
            raise ValueError(f"kernel extents must be positive, got shape {k.shape}")
        if b.shape != (cout,):
            raise ValueError(f"bias shape {b.shape} does not match cout={cout} of kernels {k.shape}")
        object.__setattr__(self, "kernels", k)
        object.__setattr__(self, "bias", b)


def _as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def _windows(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Read-only view of all kh x kw patches: (B, OH, OW, kh, kw, C)."""
    b, h, w, c = x.shape
    sb, sh, sw, sc = x.strides
    shape = (b, h - kh + 1, w - kw + 1, kh, kw, c)
    return np.lib.stride_tricks.as_strided(
        x, shape, (sb, sh, sw, sh, sw, sc), writeable=False
    )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def batch_conv2d_with_cols(images: Tensor, bank: KernelBank) -> tuple[Tensor, Tensor]:
    """batch_conv2d that also returns the im2col matrix for gradient reuse."""
    x = _as_f64(images)
    if x.ndim != 4:
        raise ValueError(f"expected batched image of rank 4, got shape {x.shape}")
    kh, kw, cin, cout = bank.kernels.shape
    b, h, w, c = x.shape
    if c != cin:
        raise ValueError(f"input shape {x.shape} has {c} channels but kernel bank {bank.kernels.shape} expects {cin}")
    if h < kh or w < kw:
        raise ValueError(f"input shape {x.shape} smaller than kernel window {(kh, kw)} of bank {bank.kernels.shape}")
    oh, ow = h - kh + 1, w - kw + 1
    cols = _windows(x, kh, kw).reshape(b * oh * ow, kh * kw * cin)
    kmat = bank.kernels.reshape(kh * kw * cin, cout)
    out = cols @ kmat + bank.bias
    return out.reshape(b, oh, ow, cout), cols


def batch_conv2d(images: Tensor, bank: KernelBank) -> Tensor:
    """Valid stride-1 cross-correlation over a batch: (B,H,W,Cin) -> (B,OH,OW,Cout)."""
    return batch_conv2d_with_cols(images, bank)[0]


def conv2d(image: Tensor, bank: KernelBank) -> Tensor:
    """Valid stride-1 cross-correlation: (H,W,Cin) -> (H-kh+1, W-kw+1, Cout)."""
    x = _as_f64(image)
    if x.ndim != 3:
        raise ValueError(f"expected image of rank 3 (H, W, C), got shape {x.shape}")
    return batch_conv2d(x[None], bank)[0]


def batch_conv2d_backward(
    images: Tensor,
    bank: KernelBank,
    grad_out: Tensor,
    need_input_grad: bool = True,
    cols: Tensor | None = None,
) -> tuple[Tensor | None, Tensor, Tensor]:
    """Gradients of batch_conv2d: returns (d_images, d_kernels, d_bias).

    Pass the ``cols`` matrix from :func:`batch_conv2d_with_cols` to skip
    rebuilding the im2col copy.
    """
    x = _as_f64(images)
    g = _as_f64(grad_out)
    kh, kw, cin, cout = bank.kernels.shape
    b, h, w, _ = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    if g.shape != (b, oh, ow, cout):
        raise ValueError(f"grad shape {g.shape} does not match conv output {(b, oh, ow, cout)}")
    gflat = g.reshape(b * oh * ow, cout)
    if cols is None:
        cols = _windows(x, kh, kw).reshape(b * oh * ow, kh * kw * cin)
    d_kernels = (cols.T @ gflat).reshape(kh, kw, cin, cout)
    d_bias = gflat.sum(axis=0)
    d_images = None
    if need_input_grad:
        # scatter one matmul per kernel offset; avoids materializing the
        # padded-gradient im2col, which dwarfs everything else in memory
        d_images = np.zeros((b, h, w, cin))
        for p in range(kh):
            for q in range(kw):
                d_images[:, p : p + oh, q : q + ow, :] += (
                    gflat @ bank.kernels[p, q].T
                ).reshape(b, oh, ow, cin)
    return d_images, d_kernels, d_bias


def conv2d_backward(image: Tensor, bank: KernelBank, grad_out: Tensor):
    """Single-example gradients of conv2d."""
    dx, dk, db = batch_conv2d_backward(_as_f64(image)[None], bank, _as_f64(grad_out)[None])
    return dx[0], dk, db


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def batch_maxpool2_with_argmax(images: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2/stride-2 per-channel max pool; also returns the in-window argmax.

    Trailing row/column is dropped when an extent is odd. Argmax values are
    in {0,1,2,3} indexing the window row-major; ties take the first maximum.
    """
    x = _as_f64(images)
    if x.ndim != 4:
        raise ValueError(f"expected batched image of rank 4, got shape {x.shape}")
    b, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"input shape {x.shape} smaller than one 2x2 pooling window")
    h2, w2 = h // 2, w // 2
    win = x[:, : 2 * h2, : 2 * w2, :].reshape(b, h2, 2, w2, 2, c)
    flat = win.transpose(0, 1, 3, 5, 2, 4).reshape(b, h2, w2, c, 4)
    idx = np.argmax(flat, axis=-1)
    pooled = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def batch_maxpool2(images: Tensor) -> Tensor:
    """2x2/stride-2 max pool via an elementwise maximum tree (no argmax)."""
    x = _as_f64(images)
    if x.ndim != 4:
        raise ValueError(f"expected batched image of rank 4, got shape {x.shape}")
    b, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ValueError(f"input shape {x.shape} smaller than one 2x2 pooling window")
    h2, w2 = h // 2, w // 2
    xe = x[:, : 2 * h2, : 2 * w2, :]
    return np.maximum(
        np.maximum(xe[:, 0::2, 0::2], xe[:, 0::2, 1::2]),
        np.maximum(xe[:, 1::2, 0::2], xe[:, 1::2, 1::2]),
    )


def batch_maxpool2_input_grad(images: Tensor, pooled: Tensor, grad_out: Tensor) -> Tensor:
    """Route pooled gradients to the first window maximum (row-major order).

    Equivalent to scattering through the recorded argmax, but works from
    the pooled values themselves: the winning cell compares bit-equal to
    the pooled maximum, and a claim mask enforces the first-match rule.
    """
    x = _as_f64(images)
    g = _as_f64(grad_out)
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if g.shape != (b, h2, w2, c):
        raise ValueError(f"grad shape {g.shape} does not match pooled output {(b, h2, w2, c)}")
    dx = np.zeros_like(x)
    claimed = np.zeros(pooled.shape, dtype=bool)
    for di in (0, 1):
        for dj in (0, 1):
            cell = x[:, di : 2 * h2 : 2, dj : 2 * w2 : 2, :]
            wins = (cell == pooled) & ~claimed
            dx[:, di : 2 * h2 : 2, dj : 2 * w2 : 2, :] = np.where(wins, g, 0.0)
            claimed |= wins
    return dx


def maxpool2(image: Tensor) -> Tensor:
    """2x2/stride-2 max pool: (H,W,C) -> (H//2, W//2, C)."""
    x = _as_f64(image)
    if x.ndim != 3:
        raise ValueError(f"expected image of rank 3 (H, W, C), got shape {x.shape}")
    return batch_maxpool2(x[None])[0]


def batch_maxpool2_backward(
    input_shape: tuple[int, ...], argmax: np.ndarray, grad_out: Tensor
) -> Tensor:
    """Scatter pooled gradients back to the argmax positions of the input."""
    b, h, w, c = input_shape
    h2, w2 = h // 2, w // 2
    g = _as_f64(grad_out)
    if g.shape != (b, h2, w2, c):
        raise ValueError(f"grad shape {g.shape} does not match pooled output {(b, h2, w2, c)}")
    flat = np.zeros((b, h2, w2, c, 4))
    np.put_along_axis(flat, argmax[..., None], g[..., None], axis=-1)
    dx = np.zeros(input_shape)
    dx[:, : 2 * h2, : 2 * w2, :] = (
        flat.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(b, 2 * h2, 2 * w2, c)
    )
    return dx


def maxpool2_backward(input_shape: tuple[int, ...], argmax: np.ndarray, grad_out: Tensor) -> Tensor:
    return batch_maxpool2_backward((1, *input_shape), argmax[None], _as_f64(grad_out)[None])[0]


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, v); shape preserved."""
    return np.maximum(_as_f64(x), 0.0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Subgradient at exactly 0 is 0."""
    x = _as_f64(x)
    g = _as_f64(grad_out)
    if g.shape != x.shape:
        raise ValueError(f"grad shape {g.shape} does not match input shape {x.shape}")
    return np.where(x > 0.0, g, 0.0)


batch_relu = relu
batch_relu_backward = relu_backward


# ---------------------------------------------------------------------------
# linear map
# ---------------------------------------------------------------------------

def batch_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Flatten each example row-major and apply x @ weight + bias."""
    x = _as_f64(x)
    w = _as_f64(weight)
    bvec = _as_f64(bias)
    b = x.shape[0]
    flat = x.reshape(b, -1)
    if w.ndim != 2 or flat.shape[1] != w.shape[0]:
        raise ValueError(f"flattened input of shape {flat.shape} incompatible with weight shape {w.shape}")
    if bvec.shape != (w.shape[1],):
        raise ValueError(f"bias shape {bvec.shape} does not match weight shape {w.shape}")
    return flat @ w + bvec


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """out_l = sum_m x_m * weight[m, l] + bias_l over the flattened input."""
    return batch_linear(_as_f64(x)[None], weight, bias)[0]


def batch_linear_backward(x: Tensor, weight: Tensor, grad_out: Tensor):
    """Gradients of batch_linear: (d_x in the input's shape, d_weight, d_bias)."""
    x = _as_f64(x)
    w = _as_f64(weight)
    g = _as_f64(grad_out)
    b = x.shape[0]
    flat = x.reshape(b, -1)
    if g.shape != (b, w.shape[1]):
        raise ValueError(f"grad shape {g.shape} does not match output shape {(b, w.shape[1])}")
    d_x = (g @ w.T).reshape(x.shape)
    d_weight = flat.T @ g
    d_bias = g.sum(axis=0)
    return d_x, d_weight, d_bias


def linear_backward(x: Tensor, weight: Tensor, grad_out: Tensor):
    dx, dw, db = batch_linear_backward(_as_f64(x)[None], weight, _as_f64(grad_out)[None])
    return dx[0], dw, db


# ---------------------------------------------------------------------------
# softmax / cross-entropy
# ---------------------------------------------------------------------------

def batch_softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for stability."""
    z = _as_f64(logits)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Strictly positive probability vector summing to 1."""
    z = _as_f64(logits)
    if z.ndim != 1:
        raise ValueError(f"expected logit vector of rank 1, got shape {z.shape}")
    return batch_softmax(z[None])[0]


def batch_cross_entropy(probs: Tensor, labels: np.ndarray) -> np.ndarray:
    """Per-example -ln(probs[label]) with the picked probability floored."""
    p = _as_f64(probs)
    y = np.asarray(labels)
    n, num_classes = p.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch of {n} probability rows")
    if np.any(y < 0) or np.any(y >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    picked = p[np.arange(n), y]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def cross_entropy(probs: Tensor, label: int) -> float:
    """-ln(probs[label]); label must index into probs."""
    p = _as_f64(probs)
    if p.ndim != 1:
        raise ValueError(f"expected probability vector of rank 1, got shape {p.shape}")
    return float(batch_cross_entropy(p[None], np.asarray([label]))[0])


def batch_softmax_xent_grad(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Gradient of cross_entropy(softmax(logits), label) wrt the logits: p - onehot."""
    p = _as_f64(probs)
    g = p.copy()
    g[np.arange(p.shape[0]), np.asarray(labels)] -= 1.0
    return g


def softmax_xent_grad(probs: Tensor, label: int) -> Tensor:
    return batch_softmax_xent_grad(_as_f64(probs)[None], np.asarray([label]))[0]
