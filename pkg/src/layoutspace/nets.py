"""Small dense networks: projection head, layout classifier, encoder stand-in.

Everything here is plain numpy with hand-written backward passes so the
trainer stays bit-reproducible and the gradients can be checked against
finite differences. Parameters live in float64; layers expose a flat
``name -> array`` view so the optimizer can address them uniformly.
"""

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import ShapeMismatch, ValidationError

PROJECTION_INPUT_DIM = 1024
PROJECTION_OUTPUT_DIM = 512


def _he_scale(n_in: int) -> float:
    return math.sqrt(2.0 / n_in)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0.0)


def dropout_mask(shape, rate: float, key: int, counter: int) -> np.ndarray:
    """Keep-mask for one dropout application.

    The mask depends only on (key, counter), never on how many random numbers
    were drawn elsewhere, so training runs are reproducible even if the
    evaluation cadence changes.
    """
    gen = np.random.Generator(np.random.Philox(key=key, counter=counter))
    return gen.random(shape) >= rate


@dataclass
class Dense:
    """Affine layer y = x W + b with weights of shape (n_in, n_out)."""

    weights: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Dense":
        w = rng.normal(0.0, _he_scale(n_in), size=(n_in, n_out))
        return cls(weights=w, bias=np.zeros(n_out, dtype=np.float64))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weights + self.bias

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        grad_x = grad_out @ self.weights.T
        grads = {"weights": x.T @ grad_out, "bias": grad_out.sum(axis=0)}
        return grad_x, grads


@dataclass
class BatchNorm:
    """Per-feature normalization with running statistics for evaluation."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def init(cls, width: int) -> "BatchNorm":
        return cls(
            gamma=np.ones(width, dtype=np.float64),
            beta=np.zeros(width, dtype=np.float64),
            running_mean=np.zeros(width, dtype=np.float64),
            running_var=np.ones(width, dtype=np.float64),
        )

    def forward(self, x: np.ndarray, training: bool):
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        out = self.gamma * x_hat + self.beta
        cache = (x_hat, inv_std, training)
        return out, cache

    def backward(self, cache, grad_out: np.ndarray):
        x_hat, inv_std, training = cache
        grads = {
            "gamma": (grad_out * x_hat).sum(axis=0),
            "beta": grad_out.sum(axis=0),
        }
        if training:
            term = grad_out - grad_out.mean(axis=0) - x_hat * (grad_out * x_hat).mean(axis=0)
            grad_x = self.gamma * inv_std * term
        else:
            grad_x = self.gamma * inv_std * grad_out
        return grad_x, grads


@dataclass
class ProjectionHead:
    """Two dense layers with batch norm, ReLU and dropout in between.

    Maps backbone features (1024-dim by default) to the 512-dim embedding
    used everywhere downstream.
    """

    fc1: Dense
    norm: BatchNorm
    fc2: Dense
    dropout_rate: float = 0.1
    dropout_key: int = 0

    @classmethod
    def init(
        cls,
        hidden: int = 1024,
        dropout_rate: float = 0.1,
        rng_seed: int = 0,
        input_dim: int = PROJECTION_INPUT_DIM,
    ) -> "ProjectionHead":
        if hidden < 1:
            raise ValidationError("hidden width must be at least 1")
        if not (0.0 <= dropout_rate < 1.0):
            raise ValidationError("dropout rate must lie in [0, 1)")
        rng = np.random.default_rng(rng_seed)
        return cls(
            fc1=Dense.init(input_dim, hidden, rng),
            norm=BatchNorm.init(hidden),
            fc2=Dense.init(hidden, PROJECTION_OUTPUT_DIM, rng),
            dropout_rate=dropout_rate,
            dropout_key=rng_seed * 2654435761 % (2**63) + 1,
        )

    @property
    def input_dim(self) -> int:
        return int(self.fc1.weights.shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.fc2.weights.shape[1])

    def forward(self, x: np.ndarray, training: bool = False, step: int = 0):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(
                f"expected N x {self.input_dim} features, got {x.shape}")
        h1 = self.fc1.forward(x)
        h2, bn_cache = self.norm.forward(h1, training)
        h3 = relu(h2)
        if training and self.dropout_rate > 0.0:
            mask = dropout_mask(h3.shape, self.dropout_rate, self.dropout_key, step)
            h4 = h3 * mask / (1.0 - self.dropout_rate)
        else:
            mask = None
            h4 = h3
        out = self.fc2.forward(h4)
        cache = (x, bn_cache, h2, mask, h4)
        return out, cache

    def backward(self, cache, grad_out: np.ndarray):
        x, bn_cache, h2, mask, h4 = cache
        grad_h4, fc2_grads = self.fc2.backward(h4, grad_out)
        if mask is not None:
            grad_h3 = grad_h4 * mask / (1.0 - self.dropout_rate)
        else:
            grad_h3 = grad_h4
        grad_h2 = relu_backward(h2, grad_h3)
        grad_h1, bn_grads = self.norm.backward(bn_cache, grad_h2)
        grad_x, fc1_grads = self.fc1.backward(x, grad_h1)
        grads = {
            "fc1.weights": fc1_grads["weights"],
            "fc1.bias": fc1_grads["bias"],
            "norm.gamma": bn_grads["gamma"],
            "norm.beta": bn_grads["beta"],
            "fc2.weights": fc2_grads["weights"],
            "fc2.bias": fc2_grads["bias"],
        }
        return grad_x, grads

    def params(self) -> Dict[str, np.ndarray]:
        return {
            "fc1.weights": self.fc1.weights,
            "fc1.bias": self.fc1.bias,
            "norm.gamma": self.norm.gamma,
            "norm.beta": self.norm.beta,
            "fc2.weights": self.fc2.weights,
            "fc2.bias": self.fc2.bias,
        }

    def set_param(self, name: str, value: np.ndarray) -> None:
        attr, leaf = name.split(".")
        setattr(getattr(self, attr), leaf, value)


def projection_forward(features: np.ndarray, head: ProjectionHead,
                       training: bool = False) -> np.ndarray:
    """Run the projection head and return only the embeddings."""
    out, _ = head.forward(features, training=training)
    return out


@dataclass
class EncoderStandIn:
    """Stack of dense+ReLU layers standing in for a heavyweight image encoder.

    Exists so the staged unfreezing schedule has real layers to freeze and
    unfreeze; param names are ``layers.<i>.weights`` / ``layers.<i>.bias``.
    """

    layers: Tuple[Dense, ...]

    @classmethod
    def init(cls, dim: int = PROJECTION_INPUT_DIM, depth: int = 2,
             rng_seed: int = 0) -> "EncoderStandIn":
        if depth < 1:
            raise ValidationError("encoder depth must be at least 1")
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 7]))
        return cls(layers=tuple(Dense.init(dim, dim, rng) for _ in range(depth)))

    @property
    def depth(self) -> int:
        return len(self.layers)

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layers[0].weights.shape[0]:
            raise ShapeMismatch(
                f"expected N x {self.layers[0].weights.shape[0]} features, got {x.shape}")
        pre = []
        out = x
        for layer in self.layers:
            z = layer.forward(out)
            pre.append((out, z))
            out = relu(z)
        return out, pre

    def backward(self, cache, grad_out: np.ndarray):
        grads: Dict[str, np.ndarray] = {}
        grad = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            inp, z = cache[i]
            grad = relu_backward(z, grad)
            grad, layer_grads = self.layers[i].backward(inp, grad)
            grads[f"layers.{i}.weights"] = layer_grads["weights"]
            grads[f"layers.{i}.bias"] = layer_grads["bias"]
        return grad, grads

    def params(self) -> Dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.weights"] = layer.weights
            out[f"layers.{i}.bias"] = layer.bias
        return out

    def set_param(self, name: str, value: np.ndarray) -> None:
        _, idx, leaf = name.split(".")
        setattr(self.layers[int(idx)], leaf, value)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    probs = softmax(logits)
    n = logits.shape[0]
    picked = probs[np.arange(n), labels]
    value = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return value, grad / n


@dataclass
class LayoutClassifier:
    """Dense D -> 256 -> C softmax classifier over known layout names."""

    fc1: Dense
    fc2: Dense
    class_names: Tuple[str, ...]
    dropout_rate: float = 0.2
    dropout_key: int = 0

    @classmethod
    def init(cls, input_dim: int, class_names, hidden: int = 256,
             dropout_rate: float = 0.2, rng_seed: int = 0) -> "LayoutClassifier":
        names = tuple(class_names)
        if len(names) < 2:
            raise ValidationError("classifier needs at least two classes")
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 11]))
        return cls(
            fc1=Dense.init(input_dim, hidden, rng),
            fc2=Dense.init(hidden, len(names), rng),
            class_names=names,
            dropout_rate=dropout_rate,
            dropout_key=rng_seed * 2246822519 % (2**63) + 3,
        )

    @property
    def input_dim(self) -> int:
        return int(self.fc1.weights.shape[0])

    def forward(self, x: np.ndarray, training: bool = False, step: int = 0):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatch(
                f"expected N x {self.input_dim} embeddings, got {x.shape}")
        z1 = self.fc1.forward(x)
        h1 = relu(z1)
        if training and self.dropout_rate > 0.0:
            mask = dropout_mask(h1.shape, self.dropout_rate, self.dropout_key, step)
            h2 = h1 * mask / (1.0 - self.dropout_rate)
        else:
            mask = None
            h2 = h1
        logits = self.fc2.forward(h2)
        cache = (x, z1, mask, h2)
        return logits, cache

    def backward(self, cache, grad_logits: np.ndarray):
        x, z1, mask, h2 = cache
        grad_h2, fc2_grads = self.fc2.backward(h2, grad_logits)
        if mask is not None:
            grad_h1 = grad_h2 * mask / (1.0 - self.dropout_rate)
        else:
            grad_h1 = grad_h2
        grad_z1 = relu_backward(z1, grad_h1)
        grad_x, fc1_grads = self.fc1.backward(x, grad_z1)
        grads = {
            "fc1.weights": fc1_grads["weights"],
            "fc1.bias": fc1_grads["bias"],
            "fc2.weights": fc2_grads["weights"],
            "fc2.bias": fc2_grads["bias"],
        }
        return grad_x, grads

    def params(self) -> Dict[str, np.ndarray]:
        return {
            "fc1.weights": self.fc1.weights,
            "fc1.bias": self.fc1.bias,
            "fc2.weights": self.fc2.weights,
            "fc2.bias": self.fc2.bias,
        }

    def set_param(self, name: str, value: np.ndarray) -> None:
        attr, leaf = name.split(".")
        setattr(getattr(self, attr), leaf, value)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self.forward(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return softmax(logits)


def classify_layout(embedding: np.ndarray, clf: LayoutClassifier):
    """Label plus full probability vector for one embedding.

    Ties in the argmax go to the lowest class index.
    """
    vec = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    probs = clf.predict_proba(vec)[0]
    return clf.class_names[int(np.argmax(probs))], probs
