"""Feedforward network engine with hand-derived backward passes.

The network maps an instance encoding [w_1..w_n, v_1..v_n, W] to one logit
per item through two hidden blocks of dense -> batchnorm -> ReLU and a dense
output layer. Matrix products go through numpy's BLAS; results are
reproducible for a fixed BLAS thread count.
"""
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import KpldfException, exception
from .helpers import make_rng

_LOGGER = logging.getLogger(__name__)

DEFAULT_HIDDEN = (2048, 1024)
DEFAULT_K = 25.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"LDFM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")

MODES = ("train", "eval")
ROUNDINGS = ("hard", "smooth")


@dataclass(eq=False)
class ModelParams:
    """Weights and batchnorm statistics of the MLP."""

    layer_dims: List[int]
    dense_weights: List[np.ndarray]
    dense_biases: List[np.ndarray]
    bn_gamma: List[np.ndarray]
    bn_beta: List[np.ndarray]
    bn_running_mean: List[np.ndarray]
    bn_running_var: List[np.ndarray]
    rng_seed: Optional[int] = None

    @property
    def n_items(self) -> int:
        """Return the output width."""
        return self.layer_dims[-1]

    @property
    def n_hidden(self) -> int:
        """Return the number of hidden blocks."""
        return len(self.layer_dims) - 2

    def trainable(self) -> List[np.ndarray]:
        """Return the trainable tensors in gradient order."""
        tensors = []
        for weight, bias in zip(self.dense_weights, self.dense_biases):
            tensors += [weight, bias]
        for gamma, beta in zip(self.bn_gamma, self.bn_beta):
            tensors += [gamma, beta]
        return tensors

    def tensors(self) -> List[np.ndarray]:
        """Return every tensor in checkpoint order."""
        tensors = []
        for weight, bias in zip(self.dense_weights, self.dense_biases):
            tensors += [weight, bias]
        for block in zip(self.bn_gamma, self.bn_beta, self.bn_running_mean, self.bn_running_var):
            tensors += list(block)
        return tensors

    def copy(self) -> "ModelParams":
        """Return a deep copy."""
        return ModelParams(
            list(self.layer_dims),
            [t.copy() for t in self.dense_weights],
            [t.copy() for t in self.dense_biases],
            [t.copy() for t in self.bn_gamma],
            [t.copy() for t in self.bn_beta],
            [t.copy() for t in self.bn_running_mean],
            [t.copy() for t in self.bn_running_var],
            self.rng_seed,
        )

    def validate(self) -> None:
        """Raise ShapeError if the dimension chain is inconsistent."""
        dims = self.layer_dims
        if len(self.dense_weights) != len(dims) - 1 or len(self.dense_biases) != len(dims) - 1:
            raise exception(-100, "expected %d dense layers" % (len(dims) - 1))
        for l, (weight, bias) in enumerate(zip(self.dense_weights, self.dense_biases)):
            if weight.shape != (dims[l + 1], dims[l]) or bias.shape != (dims[l + 1],):
                raise exception(-100, "dense layer %d does not match %d -> %d" % (
                    l, dims[l], dims[l + 1]))
        blocks = (self.bn_gamma, self.bn_beta, self.bn_running_mean, self.bn_running_var)
        for tensors in blocks:
            if len(tensors) != self.n_hidden:
                raise exception(-100, "expected %d batchnorm blocks" % self.n_hidden)
            for l, tensor in enumerate(tensors):
                if tensor.shape != (dims[l + 1],):
                    raise exception(-100, "batchnorm block %d does not match width %d" % (
                        l, dims[l + 1]))
        if any(np.any(var < 0.0) for var in self.bn_running_var):
            raise exception(-100, "negative running variance")

    def __eq__(self, other: object) -> bool:
        """Compare bit-exactly, ignoring the seed."""
        if not isinstance(other, ModelParams):
            return NotImplemented
        mine, theirs = self.tensors(), other.tensors()
        return (
            list(self.layer_dims) == list(other.layer_dims)
            and len(mine) == len(theirs)
            and all(np.array_equal(a, b) for a, b in zip(mine, theirs))
        )


@dataclass
class AdamState:
    """First and second moment accumulators."""

    learning_rate: float
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros(cls, params: ModelParams, learning_rate: float) -> "AdamState":
        """Return a fresh state shaped like the trainable tensors."""
        tensors = params.trainable()
        return cls(learning_rate, [np.zeros_like(t) for t in tensors],
                   [np.zeros_like(t) for t in tensors])


@dataclass
class ForwardTrace:
    """Everything the backward pass needs."""

    mode: str
    rounding: str
    k: float
    layer_inputs: List[np.ndarray] = field(default_factory=list)
    normalized: List[np.ndarray] = field(default_factory=list)
    inv_std: List[np.ndarray] = field(default_factory=list)
    pre_relu: List[np.ndarray] = field(default_factory=list)
    batch_mean: List[np.ndarray] = field(default_factory=list)
    batch_var: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    rounded: Optional[np.ndarray] = None


def init_params(n_items: int, seed: int,
                hidden: Sequence[int] = DEFAULT_HIDDEN) -> ModelParams:
    """Return freshly initialized parameters.

    Dense weights are uniform on [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases
    zero, batchnorm scale one and shift zero.
    """
    if n_items < 1:
        raise exception(-104, "n_items must be positive")
    dims = [2 * n_items + 1] + [int(h) for h in hidden] + [n_items]
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    widths = dims[1:-1]
    return ModelParams(
        dims, weights, biases,
        [np.ones(h) for h in widths],
        [np.zeros(h) for h in widths],
        [np.zeros(h) for h in widths],
        [np.ones(h) for h in widths],
        seed,
    )


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Return the logistic function, evaluated without overflow."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def smooth_round(p: np.ndarray, k: float = DEFAULT_K) -> np.ndarray:
    """Return the sigmoid centred at 0.5 whose slope is the surrogate gradient."""
    return sigmoid(k * (np.asarray(p) - 0.5))


def surrogate_round_backward(p: np.ndarray, upstream_grad: np.ndarray,
                             k: float = DEFAULT_K) -> np.ndarray:
    """Chain a gradient through round() using the sigmoid-slope surrogate."""
    e = np.exp(-k * (np.asarray(p, dtype=np.float64) - 0.5))
    return upstream_grad * (k * e / (e + 1.0) ** 2)


def forward(params: ModelParams, batch_inputs: np.ndarray, mode: str = "train",
            rounding: str = "hard",
            k: float = DEFAULT_K) -> Tuple[np.ndarray, np.ndarray, np.ndarray, ForwardTrace]:
    """Run the network on a batch; return logits, probs, rounded outputs and a trace.

    Train mode normalizes with batch statistics and updates the running
    statistics in place; eval mode uses the running statistics and leaves
    the parameters untouched. `rounding="smooth"` replaces round() by
    `smooth_round`, which defines the graph the surrogate gradient is exact for.
    """
    if mode not in MODES:
        raise exception(-104, "mode must be one of %s" % (MODES,))
    if rounding not in ROUNDINGS:
        raise exception(-104, "rounding must be one of %s" % (ROUNDINGS,))
    a = np.asarray(batch_inputs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != params.layer_dims[0]:
        raise exception(-100, "input shape %s, expected (B, %d)" % (a.shape, params.layer_dims[0]))
    trace = ForwardTrace(mode, rounding, k)
    batch = a.shape[0]
    for l in range(params.n_hidden):
        trace.layer_inputs.append(a)
        z = a @ params.dense_weights[l].T + params.dense_biases[l]
        if mode == "train":
            mean = z.mean(axis=0)
            var = z.var(axis=0)
            unbiased = var * batch / (batch - 1) if batch > 1 else var
            params.bn_running_mean[l] *= 1.0 - BN_MOMENTUM
            params.bn_running_mean[l] += BN_MOMENTUM * mean
            params.bn_running_var[l] *= 1.0 - BN_MOMENTUM
            params.bn_running_var[l] += BN_MOMENTUM * unbiased
        else:
            mean = params.bn_running_mean[l]
            var = params.bn_running_var[l]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        normalized = (z - mean) * inv_std
        y = params.bn_gamma[l] * normalized + params.bn_beta[l]
        trace.batch_mean.append(mean)
        trace.batch_var.append(var)
        trace.inv_std.append(inv_std)
        trace.normalized.append(normalized)
        trace.pre_relu.append(y)
        a = np.maximum(y, 0.0)
    trace.layer_inputs.append(a)
    logits = a @ params.dense_weights[-1].T + params.dense_biases[-1]
    probs = sigmoid(logits)
    if rounding == "hard":
        rounded = (probs >= 0.5).astype(np.float64)
    else:
        rounded = smooth_round(probs, k)
    trace.logits, trace.probs, trace.rounded = logits, probs, rounded
    return logits, probs, rounded, trace


def backward(params: ModelParams, trace: ForwardTrace, grad_logits: np.ndarray) -> List[np.ndarray]:
    """Return gradients of the trainable tensors given dLoss/dlogits."""
    grads_dense: List[Tuple[np.ndarray, np.ndarray]] = []
    grads_bn: List[Tuple[np.ndarray, np.ndarray]] = []
    g = grad_logits
    batch = g.shape[0]
    grads_dense.append((g.T @ trace.layer_inputs[-1], g.sum(axis=0)))
    da = g @ params.dense_weights[-1]
    for l in reversed(range(params.n_hidden)):
        dy = da * (trace.pre_relu[l] > 0.0)
        xhat = trace.normalized[l]
        grads_bn.append(((dy * xhat).sum(axis=0), dy.sum(axis=0)))
        dxhat = dy * params.bn_gamma[l]
        if trace.mode == "train":
            dz = trace.inv_std[l] / batch * (
                batch * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dz = dxhat * trace.inv_std[l]
        grads_dense.append((dz.T @ trace.layer_inputs[l], dz.sum(axis=0)))
        da = dz @ params.dense_weights[l]
    grads = []
    for d_weight, d_bias in reversed(grads_dense):
        grads += [d_weight, d_bias]
    for d_gamma, d_beta in reversed(grads_bn):
        grads += [d_gamma, d_beta]
    return grads


def bce_loss(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Return the batch mean of per-instance summed BCE and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise exception(-100, "logits %s vs labels %s" % (logits.shape, labels.shape))
    batch = logits.shape[0]
    elementwise = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    loss = math.fsum(elementwise.ravel()) / batch
    grad = (sigmoid(logits) - labels) / batch
    return loss, grad


def global_norm(grads: Sequence[np.ndarray]) -> float:
    """Return the L2 norm over all gradient entries."""
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> List[np.ndarray]:
    """Scale gradients down so their global norm is at most max_norm."""
    if max_norm <= 0.0:
        raise exception(-104, "max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


def adam_step(params: ModelParams, grads: Sequence[np.ndarray],
              state: AdamState) -> Tuple[ModelParams, AdamState]:
    """Apply one bias-corrected Adam update in place."""
    tensors = params.trainable()
    if len(grads) != len(tensors):
        raise exception(-100, "%d gradients for %d tensors" % (len(grads), len(tensors)))
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for tensor, grad, m, v in zip(tensors, grads, state.m, state.v):
        if grad.shape != tensor.shape:
            raise exception(-100, "gradient %s for tensor %s" % (grad.shape, tensor.shape))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        tensor -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params, state


def predict(params: ModelParams, inputs: np.ndarray,
            batch_size: int = 1024) -> Tuple[np.ndarray, np.ndarray]:
    """Return eval-mode probabilities and rounded selections."""
    probs, selections = [], []
    for start in range(0, len(inputs), batch_size):
        _, p, x, _ = forward(params, inputs[start:start + batch_size], mode="eval")
        probs.append(p)
        selections.append(x)
    if not probs:
        n = params.n_items
        return np.zeros((0, n)), np.zeros((0, n), dtype=np.int8)
    return np.concatenate(probs), np.concatenate(selections).astype(np.int8)


def encode_checkpoint(params: ModelParams) -> bytes:
    """Return the binary checkpoint of a model."""
    #  The layout is:
    #  0x00-0x03 magic "LDFM"
    #  0x04-0x07 version
    #  0x08-0x0b n_items
    #  then per tensor: rank (u8), dims (u32 each), payload (f64, row-major)
    packet = bytearray(_HEADER.size)
    _HEADER.pack_into(packet, 0, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.n_items)
    for tensor in params.tensors():
        packet += struct.pack("<B%dI" % tensor.ndim, tensor.ndim, *tensor.shape)
        packet += np.ascontiguousarray(tensor, dtype="<f8").tobytes()
    return bytes(packet)


def decode_checkpoint(packet: bytes, rng_seed: Optional[int] = None) -> ModelParams:
    """Parse a binary checkpoint."""
    if len(packet) < _HEADER.size:
        raise exception(-4, "truncated header")
    magic, version, n_items = _HEADER.unpack_from(packet, 0)
    if magic != CHECKPOINT_MAGIC:
        raise exception(-4, "bad magic %r" % magic)
    if version != CHECKPOINT_VERSION:
        raise exception(-4, "unsupported version %d" % version)
    offset = _HEADER.size
    tensors = []
    while offset < len(packet):
        rank = packet[offset]
        offset += 1
        if offset + 4 * rank > len(packet):
            raise exception(-4, "truncated dims of tensor %d" % len(tensors))
        dims = struct.unpack_from("<%dI" % rank, packet, offset)
        offset += 4 * rank
        size = 8 * int(np.prod(dims, dtype=np.int64))
        if offset + size > len(packet):
            raise exception(-4, "truncated payload of tensor %d" % len(tensors))
        tensor = np.frombuffer(packet, dtype="<f8", count=size // 8, offset=offset)
        tensors.append(tensor.astype(np.float64).reshape(dims))
        offset += size
    # 2 tensors per dense layer, 4 per hidden block.
    if (len(tensors) + 4) % 6 != 0 or len(tensors) < 2:
        raise exception(-4, "unexpected tensor count %d" % len(tensors))
    n_dense = (len(tensors) + 4) // 6
    dense, blocks = tensors[:2 * n_dense], tensors[2 * n_dense:]
    weights, biases = dense[0::2], dense[1::2]
    if any(w.ndim != 2 for w in weights):
        raise exception(-4, "dense weights must be matrices")
    dims = [weights[0].shape[1]] + [w.shape[0] for w in weights]
    params = ModelParams(dims, weights, biases, blocks[0::4], blocks[1::4], blocks[2::4],
                         blocks[3::4], rng_seed)
    try:
        params.validate()
    except KpldfException as err:
        raise exception(-4, str(err)) from err
    if params.n_items != n_items or dims[0] != 2 * n_items + 1:
        raise exception(-4, "header declares %d items, tensors hold %d" % (n_items, params.n_items))
    return params


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Write a binary checkpoint."""
    try:
        with open(path, "wb") as fp:
            fp.write(encode_checkpoint(params))
    except OSError as err:
        raise exception(-5, "%s: %s" % (path, err.strerror or err)) from err


def load_checkpoint(path: str, rng_seed: Optional[int] = None) -> ModelParams:
    """Read a binary checkpoint."""
    try:
        with open(path, "rb") as fp:
            packet = fp.read()
    except OSError as err:
        raise exception(-5, "%s: %s" % (path, err.strerror or err)) from err
    return decode_checkpoint(packet, rng_seed)
