"""Flat multi-class supervised classifier on the same base network, used as the comparison point."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .nn import functional as F
from .nn.layers import Dense, Module
from .nn.optim import Adam
from .nn.tensor import no_grad
from .qtest.augment import AugmentationSpec, weak_augment
from .qtest.network import FILTERS, BaseNetwork


@dataclass
class FlatConfig:
    steps: int = 300
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 3e-4
    eval_every: int = 20
    patience: int = 10
    filters: tuple[int, ...] = FILTERS
    fc_dims: tuple[int, int] = (1024, 512)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    seed: int = 0


class FlatClassifier(Module):
    def __init__(self, rng: np.random.Generator, class_count: int, channels: int = 1,
                 filters=FILTERS, fc_dims=(1024, 512)):
        self.base = BaseNetwork(rng, channels, filters, fc_dims)
        self.head = Dense(rng, fc_dims[1], class_count)

    def forward(self, x):
        return self.head(self.base.features(x))

    def _eval_batches(self, x, fn, batch_size: int = 64) -> np.ndarray:
        was = self.training
        self.eval()
        try:
            with no_grad():
                return np.concatenate([fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
        finally:
            self.train(was)

    def predict_proba(self, x) -> np.ndarray:
        return self._eval_batches(x, lambda b: F.softmax(self(b)).data)

    def features(self, x) -> np.ndarray:
        """Eval-mode ``F_base`` rows."""
        return self._eval_batches(x, lambda b: self.base.features(b).data)


@dataclass
class FlatResult:
    model: FlatClassifier
    history: list[dict]
    best_step: int


def train_flat(x, y, class_count: int, config: FlatConfig | None = None, val_x=None, val_y=None) -> FlatResult:
    """Cross-entropy training on weakly augmented labeled images with early stopping."""
    config = config or FlatConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise DataError("train_flat needs a nonempty labeled set")
    init_seed, batch_seed = np.random.SeedSequence(config.seed).spawn(2)
    model = FlatClassifier(np.random.default_rng(init_seed), class_count, x.shape[-1], config.filters,
                           config.fc_dims)
    opt = Adam(model.parameters(), config.lr, config.weight_decay)
    rng = np.random.default_rng(batch_seed)
    has_val = val_x is not None and len(val_x) > 0
    history: list[dict] = []
    best = (np.inf, config.steps - 1, None)
    bad, running, seen = 0, 0.0, 0
    for step in range(config.steps):
        idx = rng.choice(len(x), size=config.batch_size, replace=len(x) < config.batch_size)
        batch = np.stack([weak_augment(x[i], [config.seed, step, j], config.augment) for j, i in enumerate(idx)])
        model.train()
        loss = F.loss_ce(model(batch), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        running += loss.item()
        seen += 1
        if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
            val_loss, val_acc = np.nan, np.nan
            if has_val:
                probs = model.predict_proba(val_x)
                val_y = np.asarray(val_y)
                val_loss = float(-np.mean(np.log(np.clip(probs[np.arange(len(val_y)), val_y], F.PROB_EPS, 1.0))))
                val_acc = float(np.mean(probs.argmax(axis=1) == val_y))
            history.append({"step": step, "loss": running / seen, "val_loss": val_loss, "val_acc": val_acc})
            running, seen = 0.0, 0
            if has_val:
                if val_loss < best[0]:
                    best, bad = (val_loss, step, model.state_dict()), 0
                else:
                    bad += 1
                    if bad >= config.patience:
                        break
    if best[2] is not None:
        model.load_state_dict(best[2])
    model.eval()
    return FlatResult(model, history, best[1])
