"""Dense feed-forward networks with hand-written backpropagation.

Everything here is float64 numpy. Inputs may be a single vector ``(in,)``
or a batch ``(n, in)``; outputs keep the same rank. Loss helpers return
gradients already divided by the batch size, so ``backward`` simply sums
over rows and learning rates do not depend on batch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, UsageError, ValidationError

ACTIVATIONS = ("relu", "identity")
FORMAT_VERSION = 1


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class GradientTape:
    """Per-parameter gradients aligned with a network's layers."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_grad: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, net: "DenseNetwork") -> "GradientTape":
        return cls(
            [np.zeros_like(layer.weight) for layer in net.layers],
            [np.zeros_like(layer.bias) for layer in net.layers],
        )

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.extend([w.ravel(), b.ravel()])
        return np.concatenate(parts)

    def scaled(self, factor: float) -> "GradientTape":
        return GradientTape(
            [w * factor for w in self.weights], [b * factor for b in self.biases]
        )


@dataclass
class _Trace:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


class DenseNetwork:
    """Stack of affine layers, each followed by relu or identity."""

    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ConfigError("a network needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise DimensionError(
                    f"layer {i} outputs {layers[i].out_dim} but layer {i + 1} "
                    f"expects {layers[i + 1].in_dim}"
                )
        for layer in layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValidationError("network parameters must be finite")
        self.layers = layers
        self._trace: _Trace | None = None

    @classmethod
    def create(
        cls,
        dims: list[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
    ) -> "DenseNetwork":
        """Glorot-uniform weights, zero biases. ``dims`` = [in, h1, ..., out]."""
        if len(dims) < 2 or any(int(d) < 1 for d in dims):
            raise ConfigError(f"invalid layer dims {dims}")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = output_activation if i == len(dims) - 2 else hidden_activation
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def n_params(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.layers)

    def copy(self) -> "DenseNetwork":
        return DenseNetwork(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def forward(self, x: np.ndarray, keep: bool = False) -> np.ndarray:
        """Return pre-softmax outputs. ``keep=True`` caches activations for backward."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionError(
                f"expected input dim {self.input_dim}, got {x.shape[-1] if x.ndim else 0}"
            )
        trace = _Trace(squeeze=squeeze) if keep else None
        for layer in self.layers:
            z = h @ layer.weight.T + layer.bias
            if trace is not None:
                trace.inputs.append(h)
                trace.pre.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if keep:
            self._trace = trace
        return h[0] if squeeze else h

    def backward(self, upstream: np.ndarray, need_input_grad: bool = False) -> GradientTape:
        """Gradients of ``sum(upstream * output)`` w.r.t. every parameter.

        Uses the activations cached by the last ``forward(..., keep=True)``.
        """
        trace = self._trace
        if trace is None:
            raise UsageError("backward called before forward(keep=True)")
        g = np.asarray(upstream, dtype=np.float64)
        if trace.squeeze:
            g = g[None, :]
        if g.shape != trace.pre[-1].shape:
            raise DimensionError(
                f"upstream shape {g.shape} does not match output {trace.pre[-1].shape}"
            )
        n_layers = len(self.layers)
        dws: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        dbs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        for i in range(n_layers - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "relu":
                g = g * (trace.pre[i] > 0)
            dws[i] = g.T @ trace.inputs[i]
            dbs[i] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ layer.weight
        tape = GradientTape(dws, dbs)
        if need_input_grad:
            tape.input_grad = g[0] if trace.squeeze else g
        return tape

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    # serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "dense-network",
            "version": FORMAT_VERSION,
            "layers": [
                {
                    "in": layer.in_dim,
                    "out": layer.out_dim,
                    "activation": layer.activation,
                    "weight": layer.weight.ravel().tolist(),
                    "bias": layer.bias.tolist(),
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DenseNetwork":
        if data.get("format") != "dense-network" or data.get("version") != FORMAT_VERSION:
            raise ValidationError("not a dense-network payload of a supported version")
        layers = []
        for spec in data["layers"]:
            w = np.array(spec["weight"], dtype=np.float64).reshape(spec["out"], spec["in"])
            layers.append(Layer(w, np.array(spec["bias"], dtype=np.float64), spec["activation"]))
        return cls(layers)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "DenseNetwork":
        return cls.from_dict(json.loads(Path(path).read_text()))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against (soft) targets and its gradient w.r.t. logits."""
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise DimensionError(f"target shape {target.shape} != logits shape {logits.shape}")
    if np.any(target < 0) or not np.allclose(target.sum(axis=-1), 1.0, atol=1e-9):
        raise ValidationError("targets must be non-negative and sum to 1")
    n = 1 if logits.ndim == 1 else logits.shape[0]
    logp = log_softmax(logits)
    loss = float(-(target * logp).sum() / n)
    grad = (np.exp(logp) - target) / n
    return loss, grad


def squared_error(output: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """``0.5 * ||output - target||^2`` averaged over rows."""
    output = np.asarray(output, dtype=np.float64)
    n = 1 if output.ndim == 1 else output.shape[0]
    diff = output - target
    return float(0.5 * (diff**2).sum() / n), diff / n


def sgd_step(net: DenseNetwork, tape: GradientTape, lr: float) -> DenseNetwork:
    """In-place ``param -= lr * grad``; returns ``net``."""
    if not lr >= 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    if len(tape.weights) != len(net.layers):
        raise DimensionError("gradient tape does not match network depth")
    for layer, dw, db in zip(net.layers, tape.weights, tape.biases):
        if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
            raise DimensionError("gradient tape shapes do not match network")
        if lr:
            layer.weight -= lr * dw
            layer.bias -= lr * db
    return net


class SGD:
    """SGD with optional heavy-ball momentum over several networks.

    With ``momentum=0`` each update is exactly ``sgd_step``.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, GradientTape] = {}

    def step(self, net: DenseNetwork, tape: GradientTape) -> None:
        if self.weight_decay:
            tape = GradientTape(
                [dw + self.weight_decay * l.weight for dw, l in zip(tape.weights, net.layers)],
                tape.biases,
            )
        if self.momentum == 0.0:
            sgd_step(net, tape, self.lr)
            return
        vel = self._velocity.get(id(net))
        if vel is None:
            vel = self._velocity[id(net)] = GradientTape.zeros_like(net)
        for i in range(len(net.layers)):
            vel.weights[i] *= self.momentum
            vel.weights[i] += tape.weights[i]
            vel.biases[i] *= self.momentum
            vel.biases[i] += tape.biases[i]
        sgd_step(net, vel, self.lr)


def gradient_check(
    net: DenseNetwork,
    x: np.ndarray,
    target: np.ndarray,
    eps: float = 1e-5,
    loss: str = "cross_entropy",
    max_per_tensor: int | None = None,
    seed: int = 0,
    atol: float = 1e-7,
) -> float:
    """Max relative error between ``backward`` and central differences.

    ``max_per_tensor`` limits the number of probed coordinates per parameter
    tensor (chosen at random) so that wide networks stay affordable.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    """
    if not 0 < eps <= 1e-3:
        raise ConfigError(f"eps must be in (0, 1e-3], got {eps}")
    loss_fn = {"cross_entropy": softmax_cross_entropy, "squared": squared_error}[loss]

    def value() -> float:
        return loss_fn(net.forward(x), target)[0]

    out = net.forward(x, keep=True)
    _, grad = loss_fn(out, target)
    tape = net.backward(grad)
    analytic = []
    for dw, db in zip(tape.weights, tape.biases):
        analytic.extend([dw, db])
    rng = np.random.default_rng(seed)
    worst = 0.0
    for param, ana in zip(net.parameters(), analytic):
        flat = param.reshape(-1)
        ana_flat = ana.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            idx = rng.choice(flat.size, size=max_per_tensor, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            up = value()
            flat[j] = orig - eps
            down = value()
            flat[j] = orig
            num = (up - down) / (2 * eps)
            denom = max(abs(num), abs(ana_flat[j]), atol)
            worst = max(worst, abs(num - ana_flat[j]) / denom)
    return worst
