"""Layer-stack CNNs: construction, captured forward passes, backprop, SGD.

A network is a flat sequence of layer descriptors (conv, maxpool+relu,
dense, softmax) with a group map assigning each layer to one of the
random-variable tags F1/F2/FY and each tag a prior/likelihood role. The
two reference architectures differ only in the width of the second
convolution and the dense fan-in:

    CNN1: conv3x3x1x20, pool+relu, conv5x5x20x60, pool+relu, fc 1500->10, softmax
    CNN2: conv3x3x1x20, pool+relu, conv5x5x20x36, pool+relu, fc  900->10, softmax

``forward`` records every layer output (a Capture) for probing and
backprop; training runs an internal batched path over the same kernels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import KernelBank
from .rng import CounterRng
from .synth import Split, SyntheticDataset

PRIOR = "prior"
LIKELIHOOD = "likelihood"

F1, F2, FY = "F1", "F2", "FY"


# ---------------------------------------------------------------------------
# layer and network descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    kh: int
    kw: int
    cin: int
    cout: int


@dataclass(frozen=True)
class PoolRelu:
    """2x2/stride-2 max pool followed by ReLU, as a single layer."""


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Conv | PoolRelu | Dense | Softmax


@dataclass(frozen=True)
class LayerGroup:
    """Per-layer random-variable tags and per-tag prior/likelihood roles."""

    tags: tuple[str, ...]
    roles: dict[str, str]

    def layers_of(self, tag: str) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(self.tags) if t == tag)


@dataclass(frozen=True)
class NetworkSpec:
    arch: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    groups: LayerGroup

    def __post_init__(self):
        if len(self.groups.tags) != len(self.layers):
            raise ValueError(
                f"group map has {len(self.groups.tags)} tags for {len(self.layers)} layers"
            )
        for tag in self.groups.tags:
            if tag not in self.groups.roles:
                raise ValueError(f"tag {tag!r} has no prior/likelihood role")
        if not isinstance(self.layers[-1], Softmax) or any(
            isinstance(l, Softmax) for l in self.layers[:-1]
        ):
            raise ValueError("networks must end with exactly one softmax layer")
        self.output_shapes()  # raises on any incompatible consecutive pair

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Output shape of every layer, validating the whole chain."""
        shapes: list[tuple[int, ...]] = []
        cur: tuple[int, ...] = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                h, w, c = cur
                if c != layer.cin or h < layer.kh or w < layer.kw:
                    raise ValueError(f"layer {i}: conv {layer} cannot consume shape {cur}")
                cur = (h - layer.kh + 1, w - layer.kw + 1, layer.cout)
            elif isinstance(layer, PoolRelu):
                h, w, c = cur
                if h < 2 or w < 2:
                    raise ValueError(f"layer {i}: cannot pool shape {cur}")
                cur = (h // 2, w // 2, c)
            elif isinstance(layer, Dense):
                if math.prod(cur) != layer.in_features:
                    raise ValueError(
                        f"layer {i}: dense expects {layer.in_features} inputs, got shape {cur}"
                    )
                cur = (layer.out_features,)
            elif isinstance(layer, Softmax):
                if len(cur) != 1:
                    raise ValueError(f"layer {i}: softmax needs a vector, got shape {cur}")
            else:
                raise ValueError(f"unknown layer descriptor {layer!r}")
            shapes.append(cur)
        return shapes


@dataclass
class DenseParams:
    weight: np.ndarray
    bias: np.ndarray


class Parameters:
    """Learnable tensors aligned with a spec's layers (None for param-free)."""

    def __init__(self, layer_params: list):
        self.layer_params = layer_params

    def arrays(self) -> list[np.ndarray]:
        """Flat list of parameter arrays in deterministic layer order."""
        out: list[np.ndarray] = []
        for lp in self.layer_params:
            if isinstance(lp, KernelBank):
                out.extend([lp.kernels, lp.bias])
            elif isinstance(lp, DenseParams):
                out.extend([lp.weight, lp.bias])
        return out

    def copy(self) -> "Parameters":
        copied = []
        for lp in self.layer_params:
            if isinstance(lp, KernelBank):
                copied.append(KernelBank(lp.kernels.copy(), lp.bias.copy()))
            elif isinstance(lp, DenseParams):
                copied.append(DenseParams(lp.weight.copy(), lp.bias.copy()))
            else:
                copied.append(None)
        return Parameters(copied)

    def zeros_like(self) -> "Parameters":
        zeroed = self.copy()
        for arr in zeroed.arrays():
            arr[...] = 0.0
        return zeroed

    def count(self) -> int:
        return sum(a.size for a in self.arrays())


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

_TABLE_ARCHS = {
    "CNN1": 60,
    "CNN2": 36,
}


def make_spec(arch: str) -> NetworkSpec:
    """Layer table for a named architecture (CNN1 or CNN2)."""
    if arch not in _TABLE_ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(_TABLE_ARCHS)}")
    f3 = _TABLE_ARCHS[arch]
    layers = (
        Conv(3, 3, 1, 20),
        PoolRelu(),
        Conv(5, 5, 20, f3),
        PoolRelu(),
        Dense(25 * f3, 10),
        Softmax(),
    )
    groups = LayerGroup(
        tags=(F1, F2, F2, FY, FY, FY),
        roles={F1: PRIOR, F2: LIKELIHOOD, FY: LIKELIHOOD},
    )
    return NetworkSpec(arch=arch, input_shape=(32, 32, 1), layers=layers, groups=groups)


def init_parameters(spec: NetworkSpec, seed: int) -> Parameters:
    """He-style init: weights N(0, 2/fan_in), zero biases, seed-determined."""
    root = CounterRng(seed)
    layer_params: list = []
    for i, layer in enumerate(spec.layers):
        stream = root.derive(i)
        if isinstance(layer, Conv):
            fan_in = layer.kh * layer.kw * layer.cin
            k = stream.gaussian(fan_in * layer.cout, 0.0, math.sqrt(2.0 / fan_in))
            layer_params.append(
                KernelBank(
                    k.reshape(layer.kh, layer.kw, layer.cin, layer.cout),
                    np.zeros(layer.cout),
                )
            )
        elif isinstance(layer, Dense):
            w = stream.gaussian(
                layer.in_features * layer.out_features,
                0.0,
                math.sqrt(2.0 / layer.in_features),
            )
            layer_params.append(
                DenseParams(
                    w.reshape(layer.in_features, layer.out_features),
                    np.zeros(layer.out_features),
                )
            )
        else:
            layer_params.append(None)
    return Parameters(layer_params)


def build_network(arch: str, seed: int) -> tuple[NetworkSpec, Parameters]:
    spec = make_spec(arch)
    return spec, init_parameters(spec, seed)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class Capture:
    """All layer outputs of one forward pass (the chain F1 -> ... -> FY)."""

    spec: NetworkSpec
    image: np.ndarray
    layers: list[np.ndarray]
    pool_argmax: dict[int, np.ndarray]

    @property
    def probs(self) -> np.ndarray:
        return self.layers[-1]


def forward(spec: NetworkSpec, params: Parameters, image: np.ndarray) -> Capture:
    """Run one image through the network, recording every layer output."""
    x = np.asarray(image, dtype=np.float64)
    if x.shape != spec.input_shape:
        raise ValueError(f"image shape {x.shape} does not match network input {spec.input_shape}")
    outputs: list[np.ndarray] = []
    argmax: dict[int, np.ndarray] = {}
    for i, layer in enumerate(spec.layers):
        lp = params.layer_params[i]
        if isinstance(layer, Conv):
            x = ops.conv2d(x, lp)
        elif isinstance(layer, PoolRelu):
            pooled, idx = ops.batch_maxpool2_with_argmax(x[None])
            argmax[i] = idx[0]
            x = ops.relu(pooled[0])
        elif isinstance(layer, Dense):
            x = ops.linear(x, lp.weight, lp.bias)
        elif isinstance(layer, Softmax):
            x = ops.softmax(x)
        outputs.append(x)
    return Capture(spec=spec, image=np.asarray(image, dtype=np.float64), layers=outputs, pool_argmax=argmax)


def _check_capture(spec: NetworkSpec, capture: Capture) -> None:
    expected = spec.output_shapes()
    if capture.image.shape != spec.input_shape or len(capture.layers) != len(expected):
        raise ValueError("capture does not match this network spec")
    for got, want in zip(capture.layers, expected):
        if got.shape != want:
            raise ValueError(f"stale capture: layer output shape {got.shape} != expected {want}")


def backward(spec: NetworkSpec, params: Parameters, capture: Capture, label: int) -> Parameters:
    """Gradient of cross_entropy(probs, label) wrt every parameter tensor."""
    _check_capture(spec, capture)
    grads: list = [None] * len(spec.layers)
    g = ops.softmax_xent_grad(capture.probs, label)  # wrt the logits
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        inp = capture.layers[i - 1] if i > 0 else capture.image
        if isinstance(layer, Softmax):
            continue
        if isinstance(layer, Dense):
            g, dw, db = ops.linear_backward(inp, params.layer_params[i].weight, g)
            grads[i] = DenseParams(dw, db)
        elif isinstance(layer, PoolRelu):
            g = ops.relu_backward(capture.layers[i], g)  # post-relu > 0 iff pre-relu > 0
            g = ops.maxpool2_backward(inp.shape, capture.pool_argmax[i], g)
        elif isinstance(layer, Conv):
            dx, dk, db = ops.conv2d_backward(inp, params.layer_params[i], g)
            grads[i] = KernelBank(dk, db)
            g = dx
    return Parameters(grads)


# ---------------------------------------------------------------------------
# batched fast path (internal): same kernels, leading batch axis
# ---------------------------------------------------------------------------

def _forward_batch(spec: NetworkSpec, params: Parameters, x: np.ndarray):
    """Batched forward pass; aux holds im2col and pre-relu pool caches."""
    acts: list[np.ndarray] = []
    cols_cache: dict[int, np.ndarray] = {}
    pooled_cache: dict[int, np.ndarray] = {}
    for i, layer in enumerate(spec.layers):
        lp = params.layer_params[i]
        if isinstance(layer, Conv):
            x, cols_cache[i] = ops.batch_conv2d_with_cols(x, lp)
        elif isinstance(layer, PoolRelu):
            pooled_cache[i] = ops.batch_maxpool2(x)
            x = ops.relu(pooled_cache[i])
        elif isinstance(layer, Dense):
            x = ops.batch_linear(x, lp.weight, lp.bias)
        elif isinstance(layer, Softmax):
            x = ops.batch_softmax(x)
        acts.append(x)
    return acts, {"cols": cols_cache, "pooled": pooled_cache}


def _grads_batch(
    spec: NetworkSpec,
    params: Parameters,
    x: np.ndarray,
    labels: np.ndarray,
    acts: list[np.ndarray],
    aux: dict[str, dict[int, np.ndarray]],
) -> Parameters:
    """Mean-over-batch gradients from a batched forward pass."""
    n = x.shape[0]
    grads: list = [None] * len(spec.layers)
    g = ops.batch_softmax_xent_grad(acts[-1], labels) / n
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        inp = acts[i - 1] if i > 0 else x
        if isinstance(layer, Softmax):
            continue
        if isinstance(layer, Dense):
            g, dw, db = ops.batch_linear_backward(inp, params.layer_params[i].weight, g)
            grads[i] = DenseParams(dw, db)
        elif isinstance(layer, PoolRelu):
            g = ops.relu_backward(acts[i], g)
            g = ops.batch_maxpool2_input_grad(inp, aux["pooled"][i], g)
        elif isinstance(layer, Conv):
            dx, dk, db = ops.batch_conv2d_backward(
                inp, params.layer_params[i], g, need_input_grad=i > 0, cols=aux["cols"][i]
            )
            grads[i] = KernelBank(dk, db)
            g = dx
    return Parameters(grads)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    momentum: float = 0.9
    batch_size: int = 64
    max_epochs: int = 200
    seed: int = 0
    stop_at_zero_train_error: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    test_err: float


@dataclass
class TrainMetrics:
    records: list[EpochRecord]

    CSV_HEADER = "epoch,train_loss,train_err,test_err"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for r in self.records:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.train_err!r},{r.test_err!r}\n")


def sgd_step(
    params: Parameters, grads: Parameters, velocity: Parameters, config: TrainConfig
) -> tuple[Parameters, Parameters]:
    """Momentum update, in place: v <- m*v - lr*g; p <- p + v."""
    p_arrays, g_arrays, v_arrays = params.arrays(), grads.arrays(), velocity.arrays()
    if len(p_arrays) != len(g_arrays) or len(p_arrays) != len(v_arrays):
        raise ValueError("params, grads, and velocity do not have matching structure")
    for p, g, v in zip(p_arrays, g_arrays, v_arrays):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"mismatched tensor shapes in update: {p.shape}, {g.shape}, {v.shape}")
        v *= config.momentum
        v -= config.learning_rate * g
        p += v
    return params, velocity


_EVAL_CHUNK = 512


def _predict_batch(spec: NetworkSpec, params: Parameters, images: np.ndarray) -> np.ndarray:
    acts, _ = _forward_batch(spec, params, np.asarray(images, dtype=np.float64))
    return np.argmax(acts[-1], axis=-1)  # ties resolve to the lowest class


def evaluate(spec: NetworkSpec, params: Parameters, split: Split) -> float:
    """Fraction of argmax misclassifications over a split."""
    n = len(split)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    wrong = 0
    for start in range(0, n, _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, n)
        pred = _predict_batch(spec, params, split.images[start:stop])
        wrong += int(np.sum(pred != split.labels[start:stop].astype(np.int64)))
    return wrong / n


def mean_loss(spec: NetworkSpec, params: Parameters, split: Split) -> float:
    """Mean cross-entropy of a split under the current parameters."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    total = 0.0
    for start in range(0, len(split), _EVAL_CHUNK):
        stop = min(start + _EVAL_CHUNK, len(split))
        acts, _ = _forward_batch(spec, params, split.images[start:stop].astype(np.float64))
        labels = split.labels[start:stop].astype(np.int64)
        total += float(ops.batch_cross_entropy(acts[-1], labels).sum())
    return total / len(split)


def train(
    spec: NetworkSpec,
    params: Parameters,
    dataset: SyntheticDataset,
    config: TrainConfig,
) -> tuple[Parameters, TrainMetrics]:
    """Mini-batch momentum SGD on the train split, metrics every epoch.

    Shuffling is deterministic in (config.seed, epoch). Stops early once
    the post-epoch training error hits zero if so configured. Parameters
    are updated in place and returned.
    """
    n = len(dataset.train)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    x_all = dataset.train.images.astype(np.float64)
    y_all = dataset.train.labels.astype(np.int64)
    velocity = params.zeros_like()
    shuffle_root = CounterRng(config.seed)
    records: list[EpochRecord] = []
    for epoch in range(config.max_epochs):
        perm = shuffle_root.derive(epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            acts, argmax = _forward_batch(spec, params, xb)
            loss_sum += float(ops.batch_cross_entropy(acts[-1], yb).sum())
            grads = _grads_batch(spec, params, xb, yb, acts, argmax)
            sgd_step(params, grads, velocity, config)
        train_err = evaluate(spec, params, dataset.train)
        test_err = evaluate(spec, params, dataset.test)
        records.append(
            EpochRecord(epoch=epoch, train_loss=loss_sum / n, train_err=train_err, test_err=test_err)
        )
        if config.stop_at_zero_train_error and train_err == 0.0:
            break
    return params, TrainMetrics(records)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"GCKP"
_CKPT_VERSION = 1
_ARCH_CODES = {"CNN1": 1, "CNN2": 2}
_ARCH_NAMES = {code: name for name, code in _ARCH_CODES.items()}


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file fails structural validation."""


def save_checkpoint(path, spec: NetworkSpec, params: Parameters) -> None:
    """GCKP: magic, version u16, arch u8, then rank u8/extents u32/f64 data per tensor."""
    if spec.arch not in _ARCH_CODES:
        raise ValueError(f"only table architectures can be checkpointed, not {spec.arch!r}")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HB", _CKPT_VERSION, _ARCH_CODES[spec.arch]))
        for arr in params.arrays():
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[NetworkSpec, Parameters]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 7 or blob[:4] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {_CKPT_MAGIC!r}")
    version, arch_code = struct.unpack_from("<HB", blob, 4)
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if arch_code not in _ARCH_NAMES:
        raise CheckpointFormatError(f"unknown architecture code {arch_code}")
    spec = make_spec(_ARCH_NAMES[arch_code])
    params = init_parameters(spec, seed=0)
    offset = 7
    for arr in params.arrays():
        if offset + 1 > len(blob):
            raise CheckpointFormatError("truncated checkpoint")
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        extents = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        if extents != arr.shape:
            raise CheckpointFormatError(f"tensor shape {extents} does not match architecture, expected {arr.shape}")
        nbytes = 8 * math.prod(extents)
        if offset + nbytes > len(blob):
            raise CheckpointFormatError("truncated checkpoint")
        arr[...] = np.frombuffer(blob, dtype="<f8", count=math.prod(extents), offset=offset).reshape(extents)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - offset} trailing bytes after the last tensor")
    return spec, params
