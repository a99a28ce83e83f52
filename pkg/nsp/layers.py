"""
Layers
Dense layers, MLP stacks and the LSTM cell built on the autograd tensors
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autograd import ArrayLike, Tensor, as_tensor, concat, linear, parameter
from .exceptions import ShapeMismatchError

ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    "identity": lambda t: t,
    "relu": Tensor.relu,
    "sigmoid": Tensor.sigmoid,
    "tanh": Tensor.tanh,
}


def _glorot(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


class Module:
    """Anything that owns named parameters"""

    def named_parameters(self) -> Dict[str, Tensor]:
        raise NotImplementedError

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())


class DenseLayer(Module):
    """Affine map followed by an activation; weight is (out x in)"""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "identity", name: str = "dense"):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ShapeMismatchError(f"{name}: weight {weight.shape} and bias {bias.shape} are inconsistent")
        if activation not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{activation}'")
        self.name = name
        self.activation = activation
        self.weight = parameter(weight, f"{name}.weight")
        self.bias = parameter(bias, f"{name}.bias")

    @classmethod
    def init(cls, in_dim: int, out_dim: int, activation: str, rng: np.random.Generator, name: str) -> "DenseLayer":
        return cls(_glorot(rng, out_dim, in_dim), np.zeros(out_dim), activation, name)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, activation: str, name: str) -> "DenseLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros(out_dim), activation, name)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: ArrayLike) -> Tensor:
        return ACTIVATIONS[self.activation](linear(x, self.weight, self.bias))

    def named_parameters(self) -> Dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


def build_mlp(
    sizes: Sequence[int],
    hidden_activation: str,
    out_activation: str,
    rng: Optional[np.random.Generator],
    name: str,
) -> List[DenseLayer]:
    """
    Build a stack of dense layers

    Args:
        sizes: Layer widths including input, e.g. [4, 64, 1]
        hidden_activation: Activation of every layer but the last
        out_activation: Activation of the last layer
        rng: Initializer stream; None builds all-zero weights
        name: Parameter name prefix

    Returns:
        List of DenseLayer
    """
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        activation = out_activation if i == len(sizes) - 2 else hidden_activation
        layer_name = f"{name}.{i}"
        if rng is None:
            layers.append(DenseLayer.zeros(n_in, n_out, activation, layer_name))
        else:
            layers.append(DenseLayer.init(n_in, n_out, activation, rng, layer_name))
    return layers


def mlp_forward(layers: Sequence[DenseLayer], x: ArrayLike) -> Tensor:
    """Apply a stack of dense layers in order"""
    out = as_tensor(x)
    for layer in layers:
        if out.shape[-1] != layer.in_dim:
            raise ShapeMismatchError(f"{layer.name} expects {layer.in_dim} inputs, got {out.shape[-1]}")
        out = layer(out)
    return out


def mlp_parameters(layers: Sequence[DenseLayer]) -> Dict[str, Tensor]:
    params: Dict[str, Tensor] = {}
    for layer in layers:
        params.update(layer.named_parameters())
    return params


GATES = ("input", "forget", "output", "candidate")


class LstmCell(Module):
    """Standard LSTM cell; each gate has an (H x (H + in)) weight and an H bias"""

    def __init__(self, weights: Dict[str, np.ndarray], biases: Dict[str, np.ndarray], name: str = "lstm"):
        shapes = {np.asarray(weights[g]).shape for g in GATES}
        if len(shapes) != 1:
            raise ShapeMismatchError(f"{name}: gate weights differ in shape {shapes}")
        hidden, total = shapes.pop()
        if total <= hidden or any(np.asarray(biases[g]).shape != (hidden,) for g in GATES):
            raise ShapeMismatchError(f"{name}: inconsistent gate shapes")
        self.name = name
        self.hidden_size = hidden
        self.input_size = total - hidden
        self.weights = {g: parameter(weights[g], f"{name}.{g}.weight") for g in GATES}
        self.biases = {g: parameter(biases[g], f"{name}.{g}.bias") for g in GATES}

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: np.random.Generator, name: str) -> "LstmCell":
        weights = {g: _glorot(rng, hidden_size, input_size + hidden_size) for g in GATES}
        biases = {g: np.zeros(hidden_size) for g in GATES}
        biases["forget"] = np.ones(hidden_size)
        return cls(weights, biases, name)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int, name: str) -> "LstmCell":
        weights = {g: np.zeros((hidden_size, input_size + hidden_size)) for g in GATES}
        biases = {g: np.zeros(hidden_size) for g in GATES}
        return cls(weights, biases, name)

    def initial_state(self) -> Tuple[Tensor, Tensor]:
        return Tensor(np.zeros(self.hidden_size)), Tensor(np.zeros(self.hidden_size))

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for g in GATES:
            params[self.weights[g].name] = self.weights[g]
            params[self.biases[g].name] = self.biases[g]
        return params


def lstm_step(cell: LstmCell, x: ArrayLike, h: ArrayLike, c: ArrayLike) -> Tuple[Tensor, Tensor]:
    """
    One LSTM recurrence step

    Args:
        cell: The cell
        x: Input vector (in)
        h: Hidden state (H)
        c: Cell state (H)

    Returns:
        Tuple of (h', c')
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    if x.shape[-1] != cell.input_size or h.shape[-1] != cell.hidden_size or c.shape[-1] != cell.hidden_size:
        raise ShapeMismatchError(
            f"{cell.name}: got x {x.shape}, h {h.shape}, c {c.shape} for in={cell.input_size}, H={cell.hidden_size}"
        )
    xh = concat([x, h])
    i = linear(xh, cell.weights["input"], cell.biases["input"]).sigmoid()
    f = linear(xh, cell.weights["forget"], cell.biases["forget"]).sigmoid()
    o = linear(xh, cell.weights["output"], cell.biases["output"]).sigmoid()
    g = linear(xh, cell.weights["candidate"], cell.biases["candidate"]).tanh()
    c_next = f * c + i * g
    h_next = o * c_next.tanh()
    return h_next, c_next
