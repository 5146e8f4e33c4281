"""MLP feature extractor with a growable linear classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cscct import autodiff as ad
from cscct.autodiff import Tensor


@dataclass
class ModelConfig:
    input_dim: int
    hidden: tuple[int, ...] = (64,)
    feature_dim: int = 32
    feature_relu: bool = True
    init_scale: float = 1.0  # multiplies He-uniform limits
    classifier_init: float = 0.01


class Model:
    """``classify(features(x))``: an MLP feature extractor followed by a linear layer."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None, *, _params=None):
        self.config = config
        if _params is not None:
            self.layers, self.classifier_w, self.classifier_b = _params
            return
        if rng is None:
            raise ValueError("a generator is needed to initialize a fresh model")
        widths = [config.input_dim, *config.hidden, config.feature_dim]
        self.layers: list[tuple[Tensor, Tensor]] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = config.init_scale * np.sqrt(6.0 / fan_in)
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            self.layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)))
        self.classifier_w = Tensor(np.zeros((config.feature_dim, 0)), requires_grad=True)
        self.classifier_b = Tensor(np.zeros(0), requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.classifier_w.shape[1]

    @property
    def frozen(self) -> bool:
        return not self.classifier_w.requires_grad

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.layers for p in layer]
        return params + [self.classifier_w, self.classifier_b]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"layer{i}.weight"] = w.data
            out[f"layer{i}.bias"] = b.data
        out["classifier.weight"] = self.classifier_w.data
        out["classifier.bias"] = self.classifier_b.data
        return out

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> "Model":
        n_layers = len(config.hidden) + 1
        layers = [
            (Tensor(np.array(arrays[f"layer{i}.weight"]), requires_grad),
             Tensor(np.array(arrays[f"layer{i}.bias"]), requires_grad))
            for i in range(n_layers)
        ]
        cw = Tensor(np.array(arrays["classifier.weight"]), requires_grad)
        cb = Tensor(np.array(arrays["classifier.bias"]), requires_grad)
        return cls(config, _params=(layers, cw, cb))

    def features_tensor(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = ad.linear(h, w, b)
            if i < last or self.config.feature_relu:
                h = ad.relu(h)
        return h

    def logits_tensor(self, features: Tensor) -> Tensor:
        return ad.linear(features, self.classifier_w, self.classifier_b)

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.features_tensor(Tensor(np.atleast_2d(x))).data

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.logits_tensor(Tensor(self.features(x))).data


def snapshot(model: Model) -> Model:
    """Deep copy that takes no part in differentiation."""
    return Model.from_arrays(model.config, {k: v.copy() for k, v in model.named_arrays().items()}, requires_grad=False)


def expand_classifier(model: Model, new_class_count: int, rng: np.random.Generator) -> Model:
    """Append ``new_class_count`` classifier columns; existing columns are kept bit for bit."""
    if new_class_count < 0:
        raise ValueError("cannot remove classes")
    if new_class_count == 0:
        return model
    s = model.config.classifier_init
    d = model.config.feature_dim
    w_new = rng.uniform(-s, s, size=(d, new_class_count))
    grad = not model.frozen
    model.classifier_w = Tensor(np.concatenate([model.classifier_w.data, w_new], axis=1), requires_grad=grad)
    model.classifier_b = Tensor(np.concatenate([model.classifier_b.data, np.zeros(new_class_count)]),
                                requires_grad=grad)
    return model


@dataclass
class SGD:
    """SGD with momentum and L2 weight decay folded into the gradient."""

    params: list[Tensor]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    _velocity: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v
