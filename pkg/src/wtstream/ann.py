"""Feed-forward network with one sigmoid hidden layer and a linear output.

Weights keep the bias in the last column (hidden layer) or last entry (output
layer). Inputs are z-scored with statistics fitted on the training rows. The
target is standardized while fitting and the scale is folded back into the
output layer afterwards, so a trained model emits physical units directly.

Training is plain full-batch gradient descent on the backprop error
``E = 0.5 * MSE``; :func:`gradient` returns the gradient of the MSE itself.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import (
    ArityMismatch,
    BadConfig,
    DivergenceDetected,
    EmptyDataset,
    NonConvergenceWarning,
)


@dataclass(frozen=True)
class AnnConfig:
    n_inputs: int = 3
    n_hidden: int = 10
    learning_rate: float = 0.55
    max_epochs: int = 2000
    seed: int = 0
    early_stop_window: int = 50
    min_delta: float = 1e-7

    def validate(self) -> "AnnConfig":
        if self.n_inputs < 1:
            raise BadConfig("n_inputs must be >= 1")
        if self.n_hidden < 1:
            raise BadConfig("n_hidden must be >= 1")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise BadConfig("learning_rate must be positive and finite")
        if self.max_epochs < 0:
            raise BadConfig("max_epochs must be >= 0")
        if self.early_stop_window < 1:
            raise BadConfig("early_stop_window must be >= 1")
        if self.min_delta < 0:
            raise BadConfig("min_delta must be >= 0")
        return self


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ArityMismatch("inputs and targets have different row counts")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise EmptyDataset("dataset contains non-finite values")

    def __len__(self) -> int:
        return int(self.targets.shape[0])


def split_rows(inputs, targets, n_train: int = 790) -> tuple[Dataset, Dataset]:
    """Chronological split: the first ``n_train`` rows train, the rest test."""
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    return (
        Dataset(inputs[:n_train], targets[:n_train], "train"),
        Dataset(inputs[n_train:], targets[n_train:], "test"),
    )


@dataclass
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Scaler":
        return cls(np.zeros(n), np.ones(n))

    @classmethod
    def fit(cls, inputs: np.ndarray) -> "Scaler":
        mean = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        # constant columns pass through centred but unscaled
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class AnnModel:
    config: AnnConfig
    w_hidden: np.ndarray
    w_out: np.ndarray
    scaler: Scaler
    history: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": "wtstream.ann/1",
            "config": asdict(self.config),
            "w_hidden": self.w_hidden.tolist(),
            "w_out": self.w_out.tolist(),
            "scaler": {"mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()},
            "history": list(self.history),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AnnModel":
        try:
            config = AnnConfig(**doc["config"]).validate()
            w_hidden = np.asarray(doc["w_hidden"], dtype=np.float64)
            w_out = np.asarray(doc["w_out"], dtype=np.float64).reshape(1, -1)
            scaler = Scaler(
                np.asarray(doc["scaler"]["mean"], dtype=np.float64),
                np.asarray(doc["scaler"]["std"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise BadConfig(f"malformed model document: {exc}") from exc
        if w_hidden.shape != (config.n_hidden, config.n_inputs + 1):
            raise BadConfig(f"w_hidden has shape {w_hidden.shape}")
        if w_out.shape != (1, config.n_hidden + 1):
            raise BadConfig(f"w_out has shape {w_out.shape}")
        if scaler.mean.shape != (config.n_inputs,) or scaler.std.shape != (config.n_inputs,):
            raise BadConfig("scaler does not match n_inputs")
        if not (np.all(np.isfinite(w_hidden)) and np.all(np.isfinite(w_out))):
            raise BadConfig("non-finite weights")
        if not np.all(scaler.std > 0):
            raise BadConfig("scaler std must be positive")
        return cls(config, w_hidden, w_out, scaler,
                   list(doc.get("history", [])), list(doc.get("warnings", [])))


@dataclass
class Gradient:
    w_hidden: np.ndarray
    w_out: np.ndarray


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def init_model(config: AnnConfig, seed: int | None = None) -> AnnModel:
    """Uniform weights in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``, fan_in counting the bias."""
    config.validate()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    r_h = 1.0 / math.sqrt(config.n_inputs + 1)
    r_o = 1.0 / math.sqrt(config.n_hidden + 1)
    w_hidden = rng.uniform(-r_h, r_h, size=(config.n_hidden, config.n_inputs + 1))
    w_out = rng.uniform(-r_o, r_o, size=(1, config.n_hidden + 1))
    return AnnModel(config, w_hidden, w_out, Scaler.identity(config.n_inputs))


def _check_arity(model: AnnModel, x: np.ndarray) -> None:
    if x.shape[-1] != model.config.n_inputs:
        raise ArityMismatch(f"expected {model.config.n_inputs} inputs, got {x.shape[-1]}")


def _hidden(model: AnnModel, xs: np.ndarray) -> np.ndarray:
    ones = np.ones((xs.shape[0], 1))
    return sigmoid(np.hstack([xs, ones]) @ model.w_hidden.T)


def forward_batch(model: AnnModel, xs) -> np.ndarray:
    """Outputs for already-scaled rows."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    _check_arity(model, xs)
    h = _hidden(model, xs)
    return np.hstack([h, np.ones((h.shape[0], 1))]) @ model.w_out[0]


def forward(model: AnnModel, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    return float(forward_batch(model, x[None, :])[0])


def mse(model: AnnModel, dataset: Dataset, *, scaled: bool = False) -> float:
    """Mean squared error. Inputs are run through the model's scaler unless ``scaled``."""
    if len(dataset) == 0:
        raise EmptyDataset("dataset is empty")
    xs = dataset.inputs if scaled else model.scaler.transform(dataset.inputs)
    err = forward_batch(model, xs) - dataset.targets
    return float(np.mean(err**2))


def gradient(model: AnnModel, batch: Dataset) -> Gradient:
    """Analytic gradient of the MSE over ``batch`` (rows taken as already scaled)."""
    m = len(batch)
    if m == 0:
        raise EmptyDataset("batch is empty")
    xs = batch.inputs
    _check_arity(model, xs)
    xb = np.hstack([xs, np.ones((m, 1))])
    h = sigmoid(xb @ model.w_hidden.T)
    hb = np.hstack([h, np.ones((m, 1))])
    err = hb @ model.w_out[0] - batch.targets
    d_out = (2.0 / m) * err
    g_out = d_out @ hb
    d_hidden = np.outer(d_out, model.w_out[0, :-1]) * h * (1.0 - h)
    g_hidden = d_hidden.T @ xb
    return Gradient(w_hidden=g_hidden, w_out=g_out[None, :])


def train(config: AnnConfig, train_set: Dataset) -> AnnModel:
    """Full-batch backprop from a seeded initialization.

    Stops after ``max_epochs`` or when the best MSE has improved by less than
    ``min_delta`` over the last ``early_stop_window`` epochs. The weights with
    the lowest training MSE seen are returned.
    """
    config.validate()
    if len(train_set) == 0:
        raise EmptyDataset("training set is empty")
    model = init_model(config)
    if train_set.inputs.shape[1] != config.n_inputs:
        raise ArityMismatch(f"expected {config.n_inputs} input columns, got {train_set.inputs.shape[1]}")
    model.scaler = Scaler.fit(train_set.inputs)
    # fit against a standardized target, then fold the scale into the output layer
    t_mean = float(train_set.targets.mean())
    t_std = float(train_set.targets.std()) or 1.0
    scaled = Dataset(model.scaler.transform(train_set.inputs),
                     (train_set.targets - t_mean) / t_std, train_set.split)

    history, best_weights = _descend(model, scaled, config)
    model.w_hidden, w_out = best_weights
    w_out = w_out * t_std
    w_out[0, -1] += t_mean
    model.w_out = w_out
    model.history = [v * t_std**2 for v in history]
    if history[-1] > history[0]:
        msg = f"final MSE {model.history[-1]:.6g} exceeds initial MSE {model.history[0]:.6g}"
        model.warnings.append(msg)
        warnings.warn(msg, NonConvergenceWarning, stacklevel=2)
    return model


@np.errstate(over="ignore", invalid="ignore")
def _descend(model: AnnModel, scaled: Dataset, config: AnnConfig):
    """Gradient descent in place; overflow is caught by the finiteness check instead of numpy."""
    lr = config.learning_rate
    history = [mse(model, scaled, scaled=True)]
    best = history[0]
    best_weights = (model.w_hidden.copy(), model.w_out.copy())
    best_at = [best]
    for _ in range(config.max_epochs):
        g = gradient(model, scaled)
        # step on E = 0.5 * MSE
        model.w_hidden -= 0.5 * lr * g.w_hidden
        model.w_out -= 0.5 * lr * g.w_out
        loss = mse(model, scaled, scaled=True)
        if not math.isfinite(loss) or not (np.all(np.isfinite(model.w_hidden)) and np.all(np.isfinite(model.w_out))):
            raise DivergenceDetected(f"training MSE became non-finite after {len(history)} epochs")
        history.append(loss)
        if loss < best:
            best = loss
            best_weights = (model.w_hidden.copy(), model.w_out.copy())
        best_at.append(best)
        w = config.early_stop_window
        if len(best_at) > w and best_at[-w - 1] - best < config.min_delta:
            break
    return history, best_weights


def predict(model: AnnModel, raw_x) -> float:
    x = np.asarray(raw_x, dtype=np.float64).reshape(-1)
    _check_arity(model, x)
    return forward(model, model.scaler.transform(x))


def predict_batch(model: AnnModel, raw_xs) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(raw_xs, dtype=np.float64))
    _check_arity(model, xs)
    return forward_batch(model, model.scaler.transform(xs))


@dataclass
class GridSearchSpace:
    hidden_candidates: list[int] = field(default_factory=lambda: list(range(5, 26)))
    lr_candidates: list[float] = field(
        default_factory=lambda: [round(0.05 * i, 2) for i in range(1, 21)]
    )

    def validate(self) -> "GridSearchSpace":
        if not self.hidden_candidates or not self.lr_candidates:
            raise BadConfig("grid search space must be non-empty")
        return self


@dataclass
class GridSearchResult:
    best: AnnConfig
    table: dict[tuple[int, float], float]
    model: AnnModel

    def rows(self) -> list[dict]:
        return [{"n_hidden": h, "learning_rate": lr, "mse": v} for (h, lr), v in self.table.items()]


def grid_search(space: GridSearchSpace, train_set: Dataset, val_set: Dataset,
                base: AnnConfig | None = None) -> GridSearchResult:
    """Train one network per (hidden, lr) cell and keep the lowest validation MSE.

    Cell ``i`` (row-major over hidden x lr) is seeded with ``base.seed + i``.
    Diverged cells score ``inf``. Ties prefer fewer hidden nodes, then the
    smaller learning rate.
    """
    space.validate()
    base = base or AnnConfig(n_inputs=train_set.inputs.shape[1])
    if len(val_set) == 0:
        raise EmptyDataset("validation set is empty")
    table: dict[tuple[int, float], float] = {}
    models: dict[tuple[int, float], AnnModel] = {}
    cells = [(h, lr) for h in space.hidden_candidates for lr in space.lr_candidates]
    for i, (h, lr) in enumerate(cells):
        cfg = replace(base, n_hidden=h, learning_rate=lr, seed=base.seed + i).validate()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NonConvergenceWarning)
                model = train(cfg, train_set)
            score = mse(model, val_set)
            if not math.isfinite(score):
                score = math.inf
        except DivergenceDetected:
            model, score = None, math.inf
        table[(h, lr)] = score
        if model is not None:
            models[(h, lr)] = model
    key = min(table, key=lambda c: (table[c], c[0], c[1]))
    if key not in models:
        raise DivergenceDetected("every grid cell diverged")
    return GridSearchResult(best=models[key].config, table=table, model=models[key])
