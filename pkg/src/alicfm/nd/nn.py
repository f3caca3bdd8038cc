"""Feed-forward networks built on :mod:`alicfm.nd.tensor`."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "elu": T.elu,
    "selu": T.selu,
    "relu": T.relu,
    "tanh": T.tanh,
    "identity": lambda x: x,
}

OUTPUT_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "sigmoid": T.sigmoid,
}


class Mlp:
    """Fully connected network ``widths[0] -> ... -> widths[-1]``.

    The hidden activation is applied after every layer except the last; the
    last layer is affine unless ``output_activation`` names a squashing
    function.  Weights use Glorot-uniform initialisation and zero biases.
    """

    def __init__(
        self,
        widths: Sequence[int],
        activation: str = "elu",
        output_activation: str | None = None,
        rng: np.random.Generator | int | None = 0,
    ):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"need at least two positive layer widths, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        if output_activation is not None and output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.widths = widths
        self.activation = activation
        self.output_activation = output_activation

        rng = np.random.default_rng(rng)
        self.params: list[Tensor] = []
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params.append(Tensor(w, requires_grad=True, name=f"W{k}"))
            self.params.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"b{k}"))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def layers(self) -> list[tuple[Tensor, Tensor]]:
        return list(zip(self.params[0::2], self.params[1::2]))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def __call__(self, x) -> Tensor:
        return forward(self, x)

    def copy(self) -> "Mlp":
        clone = Mlp.__new__(Mlp)
        clone.widths = list(self.widths)
        clone.activation = self.activation
        clone.output_activation = self.output_activation
        clone.params = [Tensor(p.data.copy(), requires_grad=True, name=p.name) for p in self.params]
        return clone

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ValueError("parameter count mismatch")
        for p, a in zip(self.params, arrays):
            if p.shape != np.shape(a):
                raise ValueError(f"shape mismatch for {p.name}: {p.shape} vs {np.shape(a)}")
            p.data = np.array(a, dtype=np.float64)


def forward(net: Mlp, x) -> Tensor:
    """Evaluate ``net`` on a batch ``x`` of shape ``(n, in_dim)``.

    Operations are recorded on whatever tapes are active, so wrap the call in
    a :class:`~alicfm.nd.tensor.Tape` to differentiate through it.
    """
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(
            f"input of shape {x.shape} does not match network input width {net.in_dim}"
        )
    act = ACTIVATIONS[net.activation]
    layers = net.layers
    h = x
    for k, (w, b) in enumerate(layers):
        h = T.add(T.matmul(h, w), b)
        if k < len(layers) - 1:
            h = act(h)
    if net.output_activation is not None:
        h = OUTPUT_ACTIVATIONS[net.output_activation](h)
    return h
