"""
Small deterministic neural network toolkit on top of numpy.

Every layer works on (batch, time, channels) arrays, keeps its own
parameters, gradients and buffers in dicts, and implements an explicit
forward/backward pair. Training runs in float32; gradient checks deep-copy a
layer to float64 first.
"""

import copy
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
from scipy.special import expit

from errors import ContractError, LabelError, NumericFault, ShapeError, UninitializedStatsError

Tensor = np.ndarray

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9
KINK_GUARD = 1e-4


def check_finite(x: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericFault(f"non-finite values after {where}")
    return x


class Layer:
    """
    Base class. Subclasses fill `params` at construction, write `grads` in
    backward and keep non-trained state in `buffers`.
    """

    # parameter keys that receive the L2 penalty
    weight_keys: Tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, Tensor] = {}
        self.grads: Dict[str, Tensor] = {}
        self.buffers: Dict[str, Tensor] = {}
        self.training = True

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def children(self) -> List["Layer"]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, "Layer", str]]:
        for key in self.params:
            yield f"{prefix}{self.name}.{key}", self, key
        for child in self.children():
            yield from child.named_parameters(f"{prefix}{self.name}/")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, "Layer", str]]:
        for key in self.buffers:
            yield f"{prefix}{self.name}.{key}", self, key
        for child in self.children():
            yield from child.named_buffers(f"{prefix}{self.name}/")

    def parameters(self) -> Dict[str, Tensor]:
        return {qualified: layer.params[key] for qualified, layer, key in self.named_parameters()}

    def gradients(self) -> Dict[str, Tensor]:
        out = {}
        for qualified, layer, key in self.named_parameters():
            if key not in layer.grads:
                raise ContractError(f"no gradient for {qualified}; run backward first")
            out[qualified] = layer.grads[key]
        return out

    def decayed(self) -> Set[str]:
        return {qualified for qualified, layer, key in self.named_parameters() if key in layer.weight_keys}

    def kink_distance(self) -> float:
        """Distance of the last forward pass from a non-differentiable point."""
        return min((child.kink_distance() for child in self.children()), default=np.inf)

    def astype(self, dtype) -> "Layer":
        for key in self.params:
            self.params[key] = self.params[key].astype(dtype)
        for key in self.buffers:
            self.buffers[key] = self.buffers[key].astype(dtype)
        self.grads = {}
        for child in self.children():
            child.astype(dtype)
        return self

    def __repr__(self):
        shapes = ", ".join(f"{k}={tuple(v.shape)}" for k, v in self.params.items())
        return f"{type(self).__name__}({self.name}{', ' + shapes if shapes else ''})"


class Conv1D(Layer):
    """Stride-1 'same' convolution along time; W is (out_channels, width, in_channels)."""

    weight_keys = ("W",)

    def __init__(self, name: str, in_channels: int, out_channels: int, width: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__(name)
        if width < 1 or width % 2 == 0:
            raise ContractError(f"{name}: kernel width must be odd, got {width}")
        self.width = width
        bound = np.sqrt(6.0 / (width * in_channels))
        self.params["W"] = rng.uniform(-bound, bound, (out_channels, width, in_channels)).astype(dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)
        self._cols = None
        self._shape = None

    def forward(self, x):
        W = self.params["W"]
        K, w, C = W.shape
        if x.ndim != 3 or x.shape[2] != C:
            raise ShapeError(f"{self.name}: expected (B, T, {C}) input, got {x.shape}")
        B, T, _ = x.shape
        pad = w // 2
        padded = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        # (B, T, C, w) -> (B*T, w*C) to match W's layout
        windows = np.lib.stride_tricks.sliding_window_view(padded, w, axis=1)
        cols = windows.transpose(0, 1, 3, 2).reshape(B * T, w * C)
        self._cols = cols
        self._shape = x.shape
        out = cols @ W.reshape(K, w * C).T + self.params["b"]
        return out.reshape(B, T, K)

    def backward(self, grad):
        W = self.params["W"]
        K, w, C = W.shape
        B, T, _ = self._shape
        g = grad.reshape(B * T, K)
        self.grads["W"] = (g.T @ self._cols).reshape(K, w, C)
        self.grads["b"] = g.sum(axis=0)
        dcols = (g @ W.reshape(K, w * C)).reshape(B, T, w, C)
        dpadded = np.zeros((B, T + w - 1, C), dtype=grad.dtype)
        for i in range(w):
            dpadded[:, i:i + T, :] += dcols[:, :, i, :]
        pad = w // 2
        return dpadded[:, pad:pad + T, :]


class ReLU(Layer):
    def __init__(self, name: str):
        super().__init__(name)
        self._x = None

    def forward(self, x):
        self._x = x
        return np.maximum(x, 0)

    def backward(self, grad):
        return grad * (self._x > 0)

    def kink_distance(self):
        return float(np.min(np.abs(self._x))) if self._x is not None and self._x.size else np.inf


class BatchNorm1D(Layer):
    """
    Per-channel normalisation over batch and time.

    Running statistics start at mean 0 / variance 1 and follow
    running = momentum * running + (1 - momentum) * batch, with the biased
    batch variance.
    """

    def __init__(self, name: str, channels: int, dtype=np.float32):
        super().__init__(name)
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.buffers["num_batches"] = np.zeros(1, dtype=dtype)
        self._cache = None

    def forward(self, x):
        C = self.params["gamma"].shape[0]
        if x.ndim != 3 or x.shape[2] != C:
            raise ShapeError(f"{self.name}: expected (B, T, {C}) input, got {x.shape}")
        if self.training:
            if x.shape[0] * x.shape[1] < 2:
                raise ContractError(f"{self.name}: training mode needs at least two values per channel")
            mean = x.mean(axis=(0, 1))
            var = x.var(axis=(0, 1))
            self.buffers["running_mean"] = (BN_MOMENTUM * self.buffers["running_mean"]
                                            + (1 - BN_MOMENTUM) * mean).astype(x.dtype)
            self.buffers["running_var"] = (BN_MOMENTUM * self.buffers["running_var"]
                                           + (1 - BN_MOMENTUM) * var).astype(x.dtype)
            self.buffers["num_batches"] = self.buffers["num_batches"] + 1
        else:
            if self.buffers["num_batches"][0] == 0:
                raise UninitializedStatsError(f"{self.name}: inference before any training step")
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, self.training)
        return self.params["gamma"] * xhat + self.params["beta"]

    def backward(self, grad):
        xhat, inv_std, training = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (grad * xhat).sum(axis=(0, 1))
        self.grads["beta"] = grad.sum(axis=(0, 1))
        dxhat = grad * gamma
        if not training:
            return dxhat * inv_std
        n = grad.shape[0] * grad.shape[1]
        return (inv_std / n) * (n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1)))


class MaxPool1D(Layer):
    def __init__(self, name: str, width: int):
        super().__init__(name)
        if width < 1:
            raise ContractError(f"{name}: pool width must be >= 1")
        self.width = width
        self._cache = None

    def forward(self, x):
        B, T, C = x.shape
        steps = T // self.width
        windows = x[:, :steps * self.width].reshape(B, steps, self.width, C)
        # argmax returns the first occurrence on ties
        index = np.argmax(windows, axis=2)
        out = np.take_along_axis(windows, index[:, :, None, :], axis=2)[:, :, 0, :]
        self._cache = (x.shape, index, windows)
        return out

    def backward(self, grad):
        shape, index, _ = self._cache
        B, T, C = shape
        steps = index.shape[1]
        dwindows = np.zeros((B, steps, self.width, C), dtype=grad.dtype)
        np.put_along_axis(dwindows, index[:, :, None, :], grad[:, :, None, :], axis=2)
        dx = np.zeros(shape, dtype=grad.dtype)
        dx[:, :steps * self.width] = dwindows.reshape(B, steps * self.width, C)
        return dx

    def kink_distance(self):
        if self._cache is None or self.width < 2:
            return np.inf
        windows = self._cache[2]
        ordered = np.sort(windows, axis=2)
        gaps = ordered[:, :, -1, :] - ordered[:, :, -2, :]
        # exact ties come from rectified zeros and move together under perturbation
        gaps = gaps[gaps > 0]
        return float(gaps.min()) if gaps.size else np.inf


class LSTM(Layer):
    """
    Single-layer LSTM returning the last hidden state.

    Gate blocks along the 4H axis are ordered (input, forget, cell, output).
    """

    weight_keys = ("W_x", "W_h")

    def __init__(self, name: str, in_channels: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__(name)
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.params["W_x"] = rng.uniform(-bound, bound, (in_channels, 4 * hidden)).astype(dtype)
        self.params["W_h"] = rng.uniform(-bound, bound, (hidden, 4 * hidden)).astype(dtype)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden:2 * hidden] = 1.0
        self.params["b"] = b
        self._steps = None

    def forward(self, x):
        C = self.params["W_x"].shape[0]
        if x.ndim != 3 or x.shape[2] != C:
            raise ShapeError(f"{self.name}: expected (B, T, {C}) input, got {x.shape}")
        B, T, _ = x.shape
        if T < 1:
            raise ShapeError(f"{self.name}: empty sequence")
        H = self.hidden
        W_x, W_h, b = self.params["W_x"], self.params["W_h"], self.params["b"]
        # input projections for all steps at once
        zx = (x.reshape(B * T, C) @ W_x).reshape(B, T, 4 * H) + b
        h = np.zeros((B, H), dtype=x.dtype)
        c = np.zeros((B, H), dtype=x.dtype)
        steps = []
        for t in range(T):
            z = zx[:, t] + h @ W_h
            i = expit(z[:, :H])
            f = expit(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = expit(z[:, 3 * H:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tanh_c = np.tanh(c)
            h = o * tanh_c
            steps.append((h_prev, c_prev, i, f, g, o, tanh_c))
        self._steps = (x, steps)
        return h

    def backward(self, grad):
        x, steps = self._steps
        B, T, C = x.shape
        H = self.hidden
        W_x, W_h = self.params["W_x"], self.params["W_h"]
        dW_x = np.zeros_like(W_x)
        dW_h = np.zeros_like(W_h)
        db = np.zeros_like(self.params["b"])
        dx = np.zeros_like(x)
        dh = grad
        dc = np.zeros((B, H), dtype=grad.dtype)
        for t in reversed(range(T)):
            h_prev, c_prev, i, f, g, o, tanh_c = steps[t]
            do = dh * tanh_c
            dc = dc + dh * o * (1 - tanh_c ** 2)
            dz = np.concatenate([
                dc * g * i * (1 - i),
                dc * c_prev * f * (1 - f),
                dc * i * (1 - g ** 2),
                do * o * (1 - o),
            ], axis=1)
            dW_x += x[:, t].T @ dz
            dW_h += h_prev.T @ dz
            db += dz.sum(axis=0)
            dx[:, t] = dz @ W_x.T
            dh = dz @ W_h.T
            dc = dc * f
        self.grads["W_x"] = dW_x
        self.grads["W_h"] = dW_h
        self.grads["b"] = db
        return dx


class Dense(Layer):
    weight_keys = ("W",)

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__(name)
        bound = np.sqrt(6.0 / in_features)
        self.params["W"] = rng.uniform(-bound, bound, (in_features, out_features)).astype(dtype)
        self.params["b"] = np.zeros(out_features, dtype=dtype)
        self._x = None

    def forward(self, x):
        W = self.params["W"]
        if x.ndim != 2 or x.shape[1] != W.shape[0]:
            raise ShapeError(f"{self.name}: expected (B, {W.shape[0]}) input, got {x.shape}")
        self._x = x
        return x @ W + self.params["b"]

    def backward(self, grad):
        self.grads["W"] = self._x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class Dropout(Layer):
    """
    Inverted dropout. The mask of the n-th training call is drawn from
    default_rng([seed, n]), so replays with the same seed are identical.
    """

    def __init__(self, name: str, rate: float, seed: int = 0):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ContractError(f"{name}: dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.calls = 0
        self._mask = None

    def forward(self, x):
        if not self.training or self.rate == 0:
            self._mask = None
            return x
        rng = np.random.default_rng([self.seed, self.calls])
        self.calls += 1
        self._mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    def __init__(self, name: str):
        super().__init__(name)
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential(Layer):
    def __init__(self, name: str, layers: Sequence[Layer]):
        super().__init__(name)
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ContractError(f"{name}: duplicate layer names {names}")
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for layer in self.layers:
            x = check_finite(layer.forward(x), f"{layer.name} forward")
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = check_finite(layer.backward(grad), f"{layer.name} backward")
        return grad

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)
        return self

    def __repr__(self):
        inner = "\n".join(f"  {layer!r}" for layer in self.layers)
        return f"Sequential({self.name})\n{inner}"


class ParallelBranches(Layer):
    """Runs every branch on the same input and concatenates the (B, F_i) outputs."""

    def __init__(self, name: str, branches: Sequence[Layer]):
        super().__init__(name)
        self.branches = list(branches)
        self._widths = None

    def children(self):
        return self.branches

    def forward(self, x):
        outputs = [branch.forward(x) for branch in self.branches]
        self._widths = [out.shape[1] for out in outputs]
        return np.concatenate(outputs, axis=1)

    def backward(self, grad):
        splits = np.cumsum(self._widths)[:-1]
        dx = None
        for branch, part in zip(self.branches, np.split(grad, splits, axis=1)):
            d = branch.backward(np.ascontiguousarray(part))
            dx = d if dx is None else dx + d
        return dx

    def train(self, mode: bool = True):
        self.training = mode
        for branch in self.branches:
            branch.train(mode)
        return self


# --- loss ---------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, n_classes: int, dtype=np.float32) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], n_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def softmax_cross_entropy(logits: Tensor, labels: Tensor) -> Tuple[float, Tensor]:
    """
    Mean categorical cross-entropy over the batch.

    logits: (B, K) raw scores
    labels: (B, K) one-hot rows
    Returns (loss, probs).
    """
    if logits.shape != labels.shape or logits.ndim != 2:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} must be matching (B, K)")
    binary = (labels == 0) | (labels == 1)
    if not np.all(binary) or not np.all(labels.sum(axis=1) == 1):
        raise LabelError("every label row must be one-hot")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = float(-np.mean(np.sum(log_probs * labels, axis=1)))
    return loss, np.exp(log_probs)


def cross_entropy_grad(probs: Tensor, labels: Tensor) -> Tensor:
    return (probs - labels) / probs.shape[0]


# --- optimiser ----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, Tensor] = field(default_factory=dict)
    second_moment: Dict[str, Tensor] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Tensor], opt: AdamState,
              l2: float = 0.0, decayed: Optional[Set[str]] = None) -> Dict[str, Tensor]:
    """
    One Adam update, in place on the parameter arrays.

    L2 is coupled: g <- g + l2 * theta for the names in `decayed`.
    """
    decayed = decayed or set()
    opt.step_count += 1
    t = opt.step_count
    correction1 = 1 - opt.beta1 ** t
    correction2 = 1 - opt.beta2 ** t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if l2 and name in decayed:
            g = g + l2 * theta
        m = opt.first_moment.get(name)
        v = opt.second_moment.get(name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = opt.beta1 * m + (1 - opt.beta1) * g
        v = opt.beta2 * v + (1 - opt.beta2) * g * g
        opt.first_moment[name] = m
        opt.second_moment[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        theta -= (opt.lr * m_hat / (np.sqrt(v_hat) + opt.epsilon)).astype(theta.dtype)
    return params


# --- verification -------------------------------------------------------------

def _relative_error(analytic: Tensor, numeric: Tensor) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def gradient_check(layer: Layer, input_shape: Tuple[int, ...], seed: int = 0, step: float = 1e-5,
                   max_entries: int = 60, max_attempts: int = 20) -> float:
    """
    Compare analytic gradients with central differences in float64.

    The scalar objective is sum(out * R) for a fixed random R. Inputs are
    redrawn while any ReLU/pool sits within KINK_GUARD of a kink. Tensors
    larger than max_entries are checked on a random subset of entries.
    Returns the max relative error over inputs and parameters.
    """
    rng = np.random.default_rng(seed)
    layer = copy.deepcopy(layer).astype(np.float64)
    layer.train()

    for _ in range(max_attempts):
        x = rng.standard_normal(input_shape)
        out = layer.forward(x)
        if layer.kink_distance() >= KINK_GUARD:
            break
    else:
        raise ContractError(f"no sample away from kinks after {max_attempts} attempts")

    projection = rng.standard_normal(out.shape)
    dx = layer.backward(projection.copy())
    analytic = {"input": dx}
    analytic.update({name: g.copy() for name, g in layer.gradients().items()})
    tensors = {"input": x}
    tensors.update(layer.parameters())

    def objective() -> float:
        value = float(np.sum(layer.forward(x) * projection))
        if not np.isfinite(value):
            raise NumericFault("non-finite objective during gradient check")
        return value

    worst = 0.0
    for name, tensor in tensors.items():
        flat = tensor.reshape(-1)
        if flat.size > max_entries:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            entries = np.arange(flat.size)
        numeric = np.empty(entries.size)
        for n, j in enumerate(entries):
            saved = flat[j]
            flat[j] = saved + step
            plus = objective()
            flat[j] = saved - step
            minus = objective()
            flat[j] = saved
            numeric[n] = (plus - minus) / (2 * step)
        expected = analytic[name].reshape(-1)[entries]
        if not np.all(np.isfinite(expected)):
            raise NumericFault(f"non-finite analytic gradient for {name}")
        worst = max(worst, _relative_error(expected, numeric))
    return worst
