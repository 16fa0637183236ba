"""Few-shot episode sampling and Adam training with early stopping.

Training operates on one episode: k shots per class drawn from the
train split, with a held-out slice of each class's shots reserved for
the early-stopping validation metric. All randomness flows from the
config seed; shuffling uses a per-epoch stream derived from
(seed, epoch) so batch order never depends on how many draws parameter
initialization consumed. The store is read-only throughout.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterModel
from .errors import ConfigError, DataError, NumericError
from .store import EmbeddingStore
from .tensor import Parameter, backward, cross_entropy

MONITORS = ("val_acc", "train_loss")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 256
    beta1: float = 0.5  # first-moment decay; doubles as the momentum knob
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    max_epochs: int = 200
    shots: int = 16
    val_shots: int = 4
    seed: int = 0
    monitor: str = "val_acc"

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size, patience and max_epochs must be >= 1")
        if not 0 < self.val_shots < self.shots:
            raise ConfigError(
                f"val_shots must satisfy 0 < val_shots < shots, got {self.val_shots} of {self.shots}"
            )
        if self.monitor not in MONITORS:
            raise ConfigError(f"monitor must be one of {MONITORS}, got {self.monitor!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class Episode:
    """Index sets into a store's train split, k shots per listed class."""

    class_ids: list[int]
    train_indices: np.ndarray
    val_indices: np.ndarray
    shots: int
    val_shots: int
    seed: int


def sample_few_shot(
    store: EmbeddingStore, classes, k: int, seed: int, val_shots: int = 4
) -> Episode:
    """Draw k images per class without replacement, deterministically.

    The last val_shots of each class's draw are reserved for the
    early-stopping validation set.
    """
    classes = [int(c) for c in classes]
    if not classes:
        raise DataError("episode needs at least one class")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    train_parts, val_parts = [], []
    for c in classes:
        candidates = store.class_indices("train", c)
        if len(candidates) < k:
            raise DataError(
                f"class {c} ({store.class_names[c]!r}) has only {len(candidates)} "
                f"train images, need {k}"
            )
        picked = candidates[rng.permutation(len(candidates))[:k]]
        train_parts.append(picked[: k - val_shots])
        val_parts.append(picked[k - val_shots :])
    return Episode(
        class_ids=classes,
        train_indices=np.concatenate(train_parts),
        val_indices=np.concatenate(val_parts),
        shots=k,
        val_shots=val_shots,
        seed=seed,
    )


class Adam:
    """Bias-corrected Adam over a fixed parameter list; clears grads after stepping."""

    def __init__(self, params: list[Parameter], config: TrainConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = [np.zeros_like(p.tensor.data) for p in params]
        self.v = [np.zeros_like(p.tensor.data) for p in params]

    def step(self) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g is None:
                g = np.zeros_like(p.tensor.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient on {p.name} at step {t}")
            self.m[i] = cfg.beta1 * self.m[i] + (1 - cfg.beta1) * g
            self.v[i] = cfg.beta2 * self.v[i] + (1 - cfg.beta2) * (g * g)
            m_hat = self.m[i] / (1 - cfg.beta1**t)
            v_hat = self.v[i] / (1 - cfg.beta2**t)
            p.tensor.data = p.tensor.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
            p.tensor.grad = None


@dataclass
class TrainState:
    optimizer: Adam
    best_metric: float = -np.inf
    best_params: list[np.ndarray] = field(default_factory=list)
    epochs_since_improvement: int = 0


def predict(model: AdapterModel, text: np.ndarray, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Argmax class positions (ties resolve to the lowest index)."""
    preds = []
    for start in range(0, len(images), batch_size):
        logits = model.logits(text, images[start : start + batch_size]).data
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _snapshot(params: list[Parameter]) -> list[np.ndarray]:
    return [p.tensor.data.copy() for p in params]


def _restore(params: list[Parameter], snapshot: list[np.ndarray]) -> None:
    for p, data in zip(params, snapshot):
        p.tensor.data = data.copy()


def train(
    model: AdapterModel, store: EmbeddingStore, episode: Episode, config: TrainConfig
) -> tuple[AdapterModel, list[dict]]:
    """Optimize the adapter on the episode; returns the best-validation snapshot.

    History holds one record per epoch: {"epoch", "train_loss",
    "val_acc"}. Stops once the monitored metric has failed to improve
    for ``patience`` consecutive epochs, or at max_epochs.
    """
    config.validate()
    params = model.parameters()
    history: list[dict] = []
    if not params:
        return model, history
    if episode.train_indices.size == 0:
        raise DataError("episode has no training samples")

    class_pos = {c: i for i, c in enumerate(episode.class_ids)}
    text = store.text_for_classes(episode.class_ids)
    train_x = store.images("train", episode.train_indices)
    train_y = np.array([class_pos[c] for c in store.labels("train", episode.train_indices)])
    val_x = store.images("train", episode.val_indices)
    val_y = np.array([class_pos[c] for c in store.labels("train", episode.val_indices)])

    state = TrainState(optimizer=Adam(params, config), best_params=_snapshot(params))
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([int(config.seed), 3, int(epoch)])
        ).permutation(len(train_x))
        total_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            loss = cross_entropy(model.logits(text, train_x[batch]), train_y[batch])
            backward(loss)
            state.optimizer.step()
            total_loss += float(loss.data) * len(batch)
        train_loss = total_loss / len(order)
        val_acc = 100.0 * float(np.mean(predict(model, text, val_x) == val_y))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_acc": val_acc})

        metric = val_acc if config.monitor == "val_acc" else -train_loss
        if metric > state.best_metric:
            state.best_metric = metric
            state.best_params = _snapshot(params)
            state.epochs_since_improvement = 0
        else:
            state.epochs_since_improvement += 1
            if state.epochs_since_improvement >= config.patience:
                break
    _restore(params, state.best_params)
    return model, history
