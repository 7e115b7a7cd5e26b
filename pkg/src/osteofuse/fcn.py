"""Two-hidden-layer mixed-activation network with softmax output.

Each hidden layer is a block of sigmoid, identity, and Gaussian-radial units
(e^(-z^2) of the affine pre-activation), trained by full-batch gradient
descent on cross-entropy plus a squared weight penalty.  Everything runs in
float64 numpy so gradients can be checked against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DimensionMismatchError, DivergenceDetectedError

PROB_FLOOR = 1e-12


@dataclass
class MixedLayerSpec:
    n_sigmoid: int
    n_identity: int
    n_radial: int

    def __post_init__(self):
        if min(self.n_sigmoid, self.n_identity, self.n_radial) < 0:
            raise ValueError("unit counts must be non-negative")
        if self.total == 0:
            raise ValueError("a layer needs at least one unit")

    @property
    def total(self) -> int:
        return self.n_sigmoid + self.n_identity + self.n_radial


@dataclass
class FCNConfig:
    layer1: MixedLayerSpec = field(default_factory=lambda: MixedLayerSpec(25, 10, 25))
    layer2: MixedLayerSpec = field(default_factory=lambda: MixedLayerSpec(10, 5, 10))
    learning_rate: float = 0.1
    epochs: int = 100
    penalty: str = "squared"
    penalty_lambda: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.layer1, dict):
            self.layer1 = MixedLayerSpec(**self.layer1)
        if isinstance(self.layer2, dict):
            self.layer2 = MixedLayerSpec(**self.layer2)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.penalty != "squared":
            raise ValueError(f"unsupported penalty {self.penalty!r}")
        if self.penalty_lambda < 0:
            raise ValueError("penalty_lambda must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def _activate(z: np.ndarray, spec: MixedLayerSpec) -> np.ndarray:
    """Apply the per-block activations along the unit axis."""
    a = np.empty_like(z)
    s, i = spec.n_sigmoid, spec.n_identity
    a[:, :s] = 1.0 / (1.0 + np.exp(-z[:, :s]))
    a[:, s:s + i] = z[:, s:s + i]
    a[:, s + i:] = np.exp(-z[:, s + i:] ** 2)
    return a


def _activate_grad(z: np.ndarray, a: np.ndarray, spec: MixedLayerSpec) -> np.ndarray:
    """d(activation)/dz, reusing the forward activations."""
    g = np.empty_like(z)
    s, i = spec.n_sigmoid, spec.n_identity
    g[:, :s] = a[:, :s] * (1.0 - a[:, :s])
    g[:, s:s + i] = 1.0
    g[:, s + i:] = -2.0 * z[:, s + i:] * a[:, s + i:]
    return g


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class FCNModel:
    config: FCNConfig
    input_columns: list[str]
    n_classes: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    training_curve: list[tuple[float, float]] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.w1.shape[0]

    def parameter_tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2,
                "b2": self.b2, "w3": self.w3, "b3": self.b3}

    def weight_square_sum(self) -> float:
        return float((self.w1 ** 2).sum() + (self.w2 ** 2).sum()
                     + (self.w3 ** 2).sum())


def init_model(config: FCNConfig, input_dim: int, input_columns: list[str],
               n_classes: int = 3) -> FCNModel:
    """Glorot-uniform weights, zero biases, seeded."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    h1, h2 = config.layer1.total, config.layer2.total

    def glorot(fan_in, fan_out):
        r = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-r, r, size=(fan_in, fan_out))

    return FCNModel(
        config=config,
        input_columns=list(input_columns),
        n_classes=n_classes,
        w1=glorot(input_dim, h1), b1=np.zeros(h1),
        w2=glorot(h1, h2), b2=np.zeros(h2),
        w3=glorot(h2, n_classes), b3=np.zeros(n_classes),
    )


def _check_width(model: FCNModel, x: np.ndarray):
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionMismatchError(
            f"input has {x.shape[1] if x.ndim == 2 else '?'} columns, "
            f"model expects {model.input_dim}"
        )


def _forward_full(model: FCNModel, x: np.ndarray):
    z1 = x @ model.w1 + model.b1
    a1 = _activate(z1, model.config.layer1)
    z2 = a1 @ model.w2 + model.b2
    a2 = _activate(z2, model.config.layer2)
    logits = a2 @ model.w3 + model.b3
    return z1, a1, z2, a2, _softmax(logits)


def forward(model: FCNModel, x) -> np.ndarray:
    """Class-probability matrix (rows on the simplex)."""
    x = np.asarray(x, dtype=np.float64)
    _check_width(model, x)
    return _forward_full(model, x)[4]


def loss(model: FCNModel, x, y, penalty_lambda: float | None = None) -> float:
    """Mean cross-entropy plus lambda * sum of squared weights (biases free)."""
    lam = model.config.penalty_lambda if penalty_lambda is None else penalty_lambda
    probs = forward(model, x)
    y = np.asarray(y, dtype=np.int64)
    p = np.clip(probs[np.arange(len(y)), y], PROB_FLOOR, None)
    return float(-np.mean(np.log(p)) + lam * model.weight_square_sum())


def gradients(model: FCNModel, x, y,
              penalty_lambda: float | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of ``loss`` for every parameter tensor."""
    lam = model.config.penalty_lambda if penalty_lambda is None else penalty_lambda
    x = np.asarray(x, dtype=np.float64)
    _check_width(model, x)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]

    z1, a1, z2, a2, probs = _forward_full(model, x)
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    dw3 = a2.T @ dlogits + 2.0 * lam * model.w3
    db3 = dlogits.sum(axis=0)
    da2 = dlogits @ model.w3.T
    dz2 = da2 * _activate_grad(z2, a2, model.config.layer2)

    dw2 = a1.T @ dz2 + 2.0 * lam * model.w2
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ model.w2.T
    dz1 = da1 * _activate_grad(z1, a1, model.config.layer1)

    dw1 = x.T @ dz1 + 2.0 * lam * model.w1
    db1 = dz1.sum(axis=0)
    return {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2, "w3": dw3, "b3": db3}


def train(config: FCNConfig, x_train, y_train,
          input_columns: list[str] | None = None, n_classes: int = 3) -> FCNModel:
    """Full-batch gradient descent for exactly ``config.epochs`` steps."""
    x = np.asarray(x_train, dtype=np.float64)
    y = np.asarray(y_train, dtype=np.int64)
    present = np.unique(y)
    missing = sorted(set(range(n_classes)) - set(present.tolist()))
    if missing:
        raise ValueError(f"training data has no samples for class(es) {missing}")
    if input_columns is None:
        input_columns = [f"x{i}" for i in range(x.shape[1])]

    model = init_model(config, x.shape[1], input_columns, n_classes)
    lam = config.penalty_lambda
    for epoch in range(config.epochs):
        current = loss(model, x, y)
        penalty_term = lam * model.weight_square_sum()
        if not np.isfinite(current):
            raise DivergenceDetectedError(f"loss became non-finite at epoch {epoch}")
        model.training_curve.append((current, penalty_term))
        grads = gradients(model, x, y)
        for name, tensor in model.parameter_tensors().items():
            tensor -= config.learning_rate * grads[name]
    final = loss(model, x, y)
    if not np.isfinite(final):
        raise DivergenceDetectedError(
            f"loss became non-finite at epoch {config.epochs}"
        )
    return model


def predict(model: FCNModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Argmax class per row (ties resolve to the lowest index) plus probabilities."""
    probs = forward(model, x)
    return np.argmax(probs, axis=1), probs
