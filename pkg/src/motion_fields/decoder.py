from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from src.core.gaussians import sigmoid, softplus


@dataclass
class DecoderTrace:
    inputs: np.ndarray
    pre_activations: List[np.ndarray]
    hidden: List[np.ndarray]


class MlpDecoder:
    """Fully connected stack with softplus between layers and a zero-initialised linear head."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int, depth: int, rng: np.random.Generator, dtype=np.float32):
        if depth < 1:
            raise ValueError("decoder depth must be at least 1")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.depth = depth
        dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
        self.params: Dict[str, np.ndarray] = {}
        for layer in range(depth):
            fan_in, fan_out = dims[layer], dims[layer + 1]
            if layer == depth - 1:
                weight = np.zeros((fan_in, fan_out))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.params[f"w{layer}"] = weight.astype(dtype)
            self.params[f"b{layer}"] = np.zeros(fan_out, dtype=dtype)

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, DecoderTrace]:
        if inputs.shape[1] != self.in_dim:
            raise ValueError(f"decoder expects {self.in_dim} input features, got {inputs.shape[1]}")
        x = inputs
        pre, hidden = [], []
        for layer in range(self.depth - 1):
            z = x @ self.params[f"w{layer}"] + self.params[f"b{layer}"]
            pre.append(z)
            x = softplus(z)
            hidden.append(x)
        last = self.depth - 1
        out = x @ self.params[f"w{last}"] + self.params[f"b{last}"]
        return out, DecoderTrace(inputs, pre, hidden)

    def backward(self, trace: DecoderTrace, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        if grad_out.shape != (trace.inputs.shape[0], self.out_dim):
            raise ValueError(f"decoder gradient shape {grad_out.shape} does not match the recorded trace")
        grads: Dict[str, np.ndarray] = {}
        g = grad_out
        for layer in reversed(range(self.depth)):
            x = trace.inputs if layer == 0 else trace.hidden[layer - 1]
            grads[f"w{layer}"] = x.T @ g
            grads[f"b{layer}"] = g.sum(axis=0)
            g = g @ self.params[f"w{layer}"].T
            if layer > 0:
                g = g * sigmoid(trace.pre_activations[layer - 1])
        return {k: grads[k] for k in self.params}, g
