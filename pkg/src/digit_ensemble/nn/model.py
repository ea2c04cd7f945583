"""Model specification, the Table-1 CNN, and the sequential network runner."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient, ShapeMismatch
from . import layers as L

CLASS_COUNT = 10
INPUT_SHAPE = (32, 32, 1)
PROB_CLIP = 1e-12


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["kind"], dict(d.get("params", {})))


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple = INPUT_SHAPE
    class_count: int = CLASS_COUNT

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.layers or self.layers[-1].kind != "Softmax":
            raise ShapeMismatch("the final layer must be Softmax")
        shapes = self.shapes()
        if shapes[-1] != (self.class_count,):
            raise ShapeMismatch(f"network ends in {shapes[-1]}, expected ({self.class_count},)")

    def shapes(self) -> list:
        """Output shape after every layer (batch axis omitted)."""
        shape = self.input_shape
        out = []
        for spec in self.layers:
            shape = _infer_shape(spec, shape)
            out.append(shape)
        return out

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "class_count": self.class_count,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(tuple(LayerSpec.from_dict(l) for l in d["layers"]),
                   tuple(d["input_shape"]), int(d["class_count"]))


def _infer_shape(spec: LayerSpec, shape: tuple) -> tuple:
    k = spec.kind
    if k == "Conv3x3":
        if len(shape) != 3 or shape[0] < 3 or shape[1] < 3:
            raise ShapeMismatch(f"Conv3x3 needs an (H>=3, W>=3, C) input, got {shape}")
        return (shape[0] - 2, shape[1] - 2, int(spec.params["filters"]))
    if k == "MaxPool2x2":
        if len(shape) != 3 or shape[0] < 2 or shape[1] < 2:
            raise ShapeMismatch(f"MaxPool2x2 needs an (H>=2, W>=2, C) input, got {shape}")
        return (shape[0] // 2, shape[1] // 2, shape[2])
    if k == "Flatten":
        return (int(np.prod(shape)),)
    if k == "Dense":
        if len(shape) != 1:
            raise ShapeMismatch(f"Dense needs a flat input, got {shape}")
        return (int(spec.params["units"]),)
    if k in ("BatchNorm", "Dropout", "ReLU", "Softmax"):
        return shape
    raise ShapeMismatch(f"unknown layer kind {k!r}")


def build_table1_cnn(dropout: float = 0.1) -> ModelSpec:
    """Three conv blocks (64 filters each) followed by 512-128-10 dense layers."""
    layers = []
    for _ in range(3):
        layers += [LayerSpec("Conv3x3", {"filters": 64}), LayerSpec("ReLU"),
                   LayerSpec("MaxPool2x2"), LayerSpec("BatchNorm", {"epsilon": 1e-3, "momentum": 0.99})]
    layers += [
        LayerSpec("Dropout", {"rate": dropout}),
        LayerSpec("Flatten"),
        LayerSpec("Dense", {"units": 512}), LayerSpec("ReLU"),
        LayerSpec("Dropout", {"rate": dropout}),
        LayerSpec("Dense", {"units": 128}), LayerSpec("ReLU"),
        LayerSpec("Dropout", {"rate": dropout}),
        LayerSpec("Dense", {"units": CLASS_COUNT}), LayerSpec("Softmax"),
    ]
    return ModelSpec(tuple(layers))


def cross_entropy_loss(y_true, y_pred) -> float:
    """Categorical cross entropy, averaged over the batch; predictions clipped to [1e-12, 1]."""
    y_true = np.atleast_2d(np.asarray(y_true, dtype=np.float64))
    y_pred = np.clip(np.atleast_2d(np.asarray(y_pred, dtype=np.float64)), PROB_CLIP, 1.0)
    return float(-(y_true * np.log(y_pred)).sum(axis=1).mean())


def one_hot(labels, class_count: int = CLASS_COUNT, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, class_count), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


class Network:
    """A sequential stack of layers built from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers = []
        shape = spec.input_shape
        for ls in spec.layers:
            self.layers.append(self._make_layer(ls, shape, rng))
            shape = _infer_shape(ls, shape)
        self._velocity: dict[str, np.ndarray] = {}

    def _make_layer(self, ls: LayerSpec, in_shape, rng):
        p, dt = ls.params, self.dtype
        if ls.kind == "Conv3x3":
            return L.Conv3x3(in_shape[2], int(p["filters"]), rng, dt)
        if ls.kind == "Dense":
            return L.Dense(in_shape[0], int(p["units"]), rng, dt)
        if ls.kind == "BatchNorm":
            return L.BatchNorm(in_shape[-1], p.get("epsilon", 1e-3), p.get("momentum", 0.99), dt)
        if ls.kind == "Dropout":
            return L.Dropout(float(p.get("rate", 0.0)))
        return {"MaxPool2x2": L.MaxPool2x2, "Flatten": L.Flatten,
                "ReLU": L.ReLU, "Softmax": L.Softmax}[ls.kind]()

    # -- parameter access --------------------------------------------------

    def _named(self, attr):
        for i, layer in enumerate(self.layers):
            for name, arr in getattr(layer, attr).items():
                yield f"{i:02d}_{layer.kind}.{name}", layer, name, arr

    def parameters(self) -> dict:
        return {key: arr for key, _, _, arr in self._named("params")}

    def gradients(self) -> dict:
        return {key: arr for key, _, _, arr in self._named("grads")}

    def state_dict(self) -> dict:
        """Trainable parameters plus batch-norm running statistics."""
        state = {key: arr.copy() for key, _, _, arr in self._named("params")}
        state.update({key: arr.copy() for key, _, _, arr in self._named("buffers")})
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = {key: (layer, name, attr)
                    for attr in ("params", "buffers")
                    for key, layer, name, _ in self._named(attr)}
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise ShapeMismatch(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for key, (layer, name, attr) in expected.items():
            target = getattr(layer, attr)
            value = np.asarray(state[key])
            if value.shape != target[name].shape:
                raise ShapeMismatch(f"{key}: shape {value.shape} != {target[name].shape}")
            target[name] = value.astype(self.dtype, copy=True)

    def parameter_count(self, trainable_only: bool = False) -> int:
        n = sum(a.size for a in self.parameters().values())
        if not trainable_only:
            n += sum(a.size for _, _, _, a in self._named("buffers"))
        return n

    # -- forward / backward ------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape == self.spec.input_shape:
            x = x[None]
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeMismatch(f"expected input {self.spec.input_shape}, got {x.shape}")
        return x

    def forward(self, x, mode=Mode.EVAL, rng=None, upto: int | None = None) -> np.ndarray:
        """Run the stack; returns class probabilities, shape (N, class_count)."""
        train = Mode(mode) is Mode.TRAIN
        if train and rng is None:
            rng = np.random.default_rng(0)
        out = self._check_input(x)
        for layer in self.layers[:upto]:
            out = layer.forward(out, train=train, rng=rng)
        return out

    def predict_proba(self, x, batch_size: int = 256) -> np.ndarray:
        x = self._check_input(x)
        return np.concatenate([self.forward(x[i:i + batch_size])
                               for i in range(0, len(x), batch_size)], axis=0)

    def backward(self, y_true) -> None:
        """Backpropagate mean cross entropy from the last forward pass (softmax + CE fused)."""
        last = self.layers[-1]
        grad = (last._p - y_true) / len(y_true)
        for layer in reversed(self.layers[:-1]):
            grad = layer.backward(grad)
        bad = [k for k, g in self.gradients().items() if not np.all(np.isfinite(g))]
        if bad:
            raise NonFiniteGradient(f"non-finite gradient in {bad}")

    def loss_and_grad(self, x, labels, rng=None) -> float:
        """Train-mode forward, mean loss, and gradients for ``labels`` (class indices)."""
        y = one_hot(labels, self.spec.class_count, self.dtype)
        p = self.forward(x, Mode.TRAIN, rng=rng)
        loss = cross_entropy_loss(y, p)
        if not np.isfinite(loss):
            raise NonFiniteGradient(f"loss became {loss}")
        self.backward(y)
        return loss

    def step(self, learning_rate: float, momentum: float = 0.0) -> None:
        for key, layer, name, _ in list(self._named("params")):
            g = layer.grads[name]
            if momentum:
                v = self._velocity.get(key)
                if v is None:
                    v = np.zeros_like(g)
                v = momentum * v - learning_rate * g
                self._velocity[key] = v
                layer.params[name] = layer.params[name] + v
            else:
                layer.params[name] = layer.params[name] - learning_rate * g


def forward(model: Network, fmap, mode=Mode.EVAL, rng=None) -> np.ndarray:
    """Probabilities for a single map (returns a length-10 vector) or a batch."""
    single = np.shape(fmap) == model.spec.input_shape
    p = model.forward(fmap, mode, rng=rng)
    return p[0] if single else p
