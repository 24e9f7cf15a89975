"""Small fully connected networks with hand-written reverse-mode gradients.

Networks are immutable values: a :class:`DenseNet` is a list of layers and
its flat parameter vector ``theta`` (weights row-major, then bias, layer by
layer). Inputs are batched with one sample per row; all arithmetic is float64.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "identity")


def sigmoid(a: np.ndarray) -> np.ndarray:
    """Logistic function evaluated without overflow for large ``|a|``."""
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "sigmoid":
        return sigmoid(a)
    return a


def _activation_grad(kind: str, a: np.ndarray, h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Chain ``g = dL/dh`` back through ``h = act(a)``."""
    if kind == "relu":
        return g * (a > 0)
    if kind == "sigmoid":
        return g * h * (1.0 - h)
    return g


@dataclass(frozen=True)
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError("layer needs W of shape (out, in) and b of shape (out,)")

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


class DenseNet:
    """Stack of affine layers, each followed by an activation.

    Parameters
    ----------
    layers : sequence of Layer
        Consecutive layers must compose (``n_out`` of one equals ``n_in`` of the next).
    """

    def __init__(self, layers: Sequence[Layer]):
        layers = list(layers)
        if not layers:
            raise ValueError("a network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not compose: {a.n_out} -> {b.n_in}")
        self.layers = layers

    @classmethod
    def init(cls, widths: Sequence[int], activations: Sequence[str],
             rng: np.random.Generator) -> "DenseNet":
        """Gaussian weights with std ``1/sqrt(fan_in)`` and zero biases."""
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for n_in, n_out, act in zip(widths[:-1], widths[1:], activations):
            W = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
            layers.append(Layer(W, np.zeros(n_out), act))
        return cls(layers)

    @property
    def shapes(self) -> List[Tuple[Tuple[int, int], str]]:
        return [(l.W.shape, l.activation) for l in self.layers]

    @property
    def n_params(self) -> int:
        return sum(l.W.size + l.b.size for l in self.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.W.ravel(), l.b]) for l in self.layers])

    def with_flat(self, theta) -> "DenseNet":
        """Same architecture with parameters taken from ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {theta.shape}")
        layers, k = [], 0
        for l in self.layers:
            W = theta[k:k + l.W.size].reshape(l.W.shape)
            k += l.W.size
            b = theta[k:k + l.b.size]
            k += l.b.size
            layers.append(Layer(W.copy(), b.copy(), l.activation))
        return DenseNet(layers)

    def __call__(self, x) -> np.ndarray:
        return net_forward(self, x)[0]


@dataclass
class ForwardCache:
    net: DenseNet
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)


def net_forward(net: DenseNet, x) -> Tuple[np.ndarray, ForwardCache]:
    """Forward pass on a batch (rows) or a single vector; returns output and cache."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != net.n_in:
        raise ValueError(f"input width {h.shape[-1]} does not match network input {net.n_in}")
    cache = ForwardCache(net)
    for l in net.layers:
        cache.inputs.append(h)
        a = h @ l.W.T + l.b
        h = _activate(l.activation, a)
        cache.pre.append(a)
        cache.post.append(h)
    return h, cache


def net_reverse_grad(net: DenseNet, grad_out, cache: ForwardCache, return_input_grad: bool = False):
    """Flat gradient of a scalar loss given ``dL/d(output)`` and the forward cache.

    With ``return_input_grad`` the gradient with respect to the network input
    is returned as a second value.
    """
    if cache.net is not net:
        raise ValueError("stale cache: it was produced by a different network")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.post[-1].shape:
        raise ValueError("upstream gradient shape does not match the network output")
    parts = []
    for l, x, a, h in zip(reversed(net.layers), reversed(cache.inputs),
                          reversed(cache.pre), reversed(cache.post)):
        g = _activation_grad(l.activation, a, h, g)
        if g.ndim == 1:
            gW, gb = np.outer(g, x), g
        else:
            gW, gb = g.T @ x, g.sum(axis=0)
        parts.append(np.concatenate([gW.ravel(), gb]))
        g = g @ l.W
    flat = np.concatenate(parts[::-1])
    return (flat, g) if return_input_grad else flat


# --- optimizers --------------------------------------------------------------

def clip_inf(grad, c: float) -> np.ndarray:
    """Cap every coordinate's magnitude at ``c``."""
    if not c > 0:
        raise ValueError("clip level must be positive")
    return np.clip(grad, -c, c)


@dataclass
class OptimState:
    """Optimizer kind plus its per-parameter accumulators.

    ``kind`` is one of ``"sgd"``, ``"momentum"`` (``v <- beta v + g``,
    ``theta <- theta - lr v``) or ``"adam"`` (bias-corrected moments).
    """

    kind: str = "sgd"
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def step(self, theta, grad, lr: float) -> np.ndarray:
        """Return updated parameters; accumulators are updated in place."""
        if not lr > 0:
            raise ValueError("learning rate must be positive")
        grad = np.asarray(grad, dtype=np.float64)
        if self.kind == "sgd":
            return theta - lr * grad
        if self.m is None:
            self.m = np.zeros_like(grad)
            if self.kind == "adam":
                self.v = np.zeros_like(grad)
        if self.m.shape != grad.shape:
            raise ValueError("gradient shape changed between optimizer steps")
        if self.kind == "momentum":
            self.m = self.beta * self.m + grad
            return theta - lr * self.m
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.step_count)
        v_hat = self.v / (1 - self.beta2 ** self.step_count)
        return theta - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(opt: OptimState, theta, grad, lr: float) -> np.ndarray:
    return opt.step(theta, grad, lr)


# --- persistence -------------------------------------------------------------

_MAGIC = b"DNET"


def save_net(path, net: DenseNet):
    """``DNET`` + uint32 header length + JSON shape header + little-endian float64 parameters."""
    header = json.dumps({"layers": [{"shape": list(l.W.shape), "activation": l.activation}
                                    for l in net.layers]}).encode("utf-8")
    payload = net.flat.astype("<f8").tobytes()
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + payload)


def load_net(path) -> DenseNet:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError("not a network dump")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    theta = np.frombuffer(raw[8 + hlen:], dtype="<f8").astype(np.float64)
    template = DenseNet([Layer(np.zeros(tuple(s["shape"])), np.zeros(s["shape"][0]), s["activation"])
                         for s in header["layers"]])
    return template.with_flat(theta)
