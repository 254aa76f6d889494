"""Fully-connected networks with hand-written backprop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "linear", "sigmoid")


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "linear":
        return z
    if kind == "sigmoid":
        return sigmoid(z)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass
class DenseParams:
    """Weights ``W`` are stored ``(fan_in, fan_out)``; a layer computes ``act(x @ W + b)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    cache: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must align")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: bias length {b.shape[0]} != fan_out {W.shape[1]}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i}: fan_in does not chain")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @classmethod
    def init(cls, sizes: list[int], activations: list[str], rng: np.random.Generator) -> "DenseParams":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, list(activations))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "DenseParams":
        return DenseParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def to_vector(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def set_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        pos = 0
        for i, W in enumerate(self.weights):
            self.weights[i] = vec[pos:pos + W.size].reshape(W.shape).copy()
            pos += W.size
            b = self.biases[i]
            self.biases[i] = vec[pos:pos + b.size].copy()
            pos += b.size

    def all_finite(self) -> bool:
        return all(np.isfinite(W).all() and np.isfinite(b).all() for W, b in zip(self.weights, self.biases))

    def forward(self, X: np.ndarray, keep: bool = False) -> np.ndarray:
        a = X
        if keep:
            self.cache = [a]
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ W + b
            a = _act(z, act)
            if keep:
                self.cache += [z, a]
        return a

    def forward_rowwise(self, X: np.ndarray) -> np.ndarray:
        """Forward pass whose per-row result does not depend on the batch size.

        BLAS kernels may pick different summation orders for different batch
        shapes; this keeps encodings bit-identical however accounts are batched.
        """
        a = np.asarray(X, dtype=float)
        for W, b, act in zip(self.weights, self.biases, self.activations):
            z = np.add.reduce(a[:, :, None] * W[None, :, :], axis=1) + b
            a = _act(z, act)
        return a

    def backward(self, d_out: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
        """Backprop ``d_out`` (gradient w.r.t. the network output) through the cached forward pass.

        Returns weight grads, bias grads and the gradient w.r.t. the input.
        """
        if not self.cache:
            raise RuntimeError("forward(keep=True) must precede backward")
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        delta = d_out
        for i in reversed(range(len(self.weights))):
            z, a = self.cache[2 * i + 1], self.cache[2 * i + 2]
            act = self.activations[i]
            if act == "relu":
                delta = delta * (z > 0)
            elif act == "sigmoid":
                delta = delta * a * (1.0 - a)
            a_prev = self.cache[2 * i]
            gW[i] = a_prev.T @ delta
            gb[i] = delta.sum(axis=0)
            delta = delta @ self.weights[i].T
        return gW, gb, delta

    def to_json(self) -> dict:
        return {
            "sizes": [self.in_dim] + [W.shape[1] for W in self.weights],
            "activations": list(self.activations),
            "params": [float(v) for v in self.to_vector()],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DenseParams":
        sizes = doc["sizes"]
        net = cls(
            [np.zeros((i, o)) for i, o in zip(sizes[:-1], sizes[1:])],
            [np.zeros(o) for o in sizes[1:]],
            list(doc["activations"]),
        )
        net.set_vector(np.array(doc["params"], dtype=float))
        return net


def flatten_grads(gW: list[np.ndarray], gb: list[np.ndarray]) -> np.ndarray:
    parts = []
    for w, b in zip(gW, gb):
        parts += [w.ravel(), b]
    return np.concatenate(parts)
