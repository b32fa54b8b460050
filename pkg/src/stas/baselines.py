"""Linear-regression and MLP baselines on channel means of the current-time crop."""

from __future__ import annotations

import logging
import warnings

import numpy as np
import torch
from torch import nn

from .data import SampleSet

log = logging.getLogger(__name__)


def crop_features(samples: SampleSet) -> np.ndarray:
    """Channel means of the lag-0 crop at the largest scale, shape (N, C)."""
    return samples.fields[:, :, 0].astype(np.float64).mean(axis=(-2, -1))


class LinearBaseline:
    """Ordinary least squares via the normal equations on standardized columns."""

    def __init__(self, ridge: float = 1e-6):
        self.ridge = ridge
        self.coef: np.ndarray | None = None

    def _design(self, x: np.ndarray) -> np.ndarray:
        z = (x - self.mean) / self.std
        return np.hstack([z, np.ones((x.shape[0], 1))])

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LinearBaseline":
        # standardizing leaves the fitted values unchanged but keeps the system well scaled
        self.mean, self.std = x.mean(0), np.where(x.std(0) == 0, 1.0, x.std(0))
        X = self._design(x)
        gram = X.T @ X
        try:
            if np.linalg.cond(gram) > 1e12:
                raise np.linalg.LinAlgError("ill-conditioned normal equations")
            self.coef = np.linalg.solve(gram, X.T @ y)
        except np.linalg.LinAlgError:
            warnings.warn(f"singular normal equations, using ridge {self.ridge:g}", RuntimeWarning,
                          stacklevel=2)
            self.coef = np.linalg.solve(gram + self.ridge * np.eye(gram.shape[0]), X.T @ y)
        return self

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self._design(x) @ self.coef


class MLPBaseline:
    """Two hidden layers trained with MSE and Adam on standardized inputs and target.

    Training stops once the validation loss has not improved for ``patience``
    epochs and the best weights are kept. Without an explicit validation set the
    last 15% of the training rows are held out.
    """

    def __init__(self, hidden: int = 32, epochs: int = 200, lr: float = 1e-3, batch_size: int = 64,
                 patience: int = 15, seed: int = 0):
        self.hidden, self.epochs, self.lr, self.batch_size = hidden, epochs, lr, batch_size
        self.patience, self.seed = patience, seed
        self.net: nn.Module | None = None
        self.losses: list[float] = []
        self.val_losses: list[float] = []

    def _x(self, x: np.ndarray) -> torch.Tensor:
        return torch.as_tensor((x - self.mean) / self.std, dtype=torch.float32)

    def _y(self, y: np.ndarray) -> torch.Tensor:
        return torch.as_tensor((y - self.y_mean) / self.y_std, dtype=torch.float32)

    def fit(self, x: np.ndarray, y: np.ndarray, x_val: np.ndarray | None = None,
            y_val: np.ndarray | None = None) -> "MLPBaseline":
        if x_val is None:
            cut = max(1, int(round(0.85 * len(x))))
            x, x_val, y, y_val = x[:cut], x[cut:], y[:cut], y[cut:]
        torch.manual_seed(self.seed)
        rng = np.random.default_rng(self.seed)
        self.mean, self.std = x.mean(0), np.where(x.std(0) == 0, 1.0, x.std(0))
        self.y_mean, self.y_std = float(y.mean()), float(y.std()) or 1.0
        xt, yt = self._x(x), self._y(y)
        xv, yv = self._x(x_val), self._y(y_val)
        self.net = nn.Sequential(nn.Linear(x.shape[1], self.hidden), nn.ReLU(),
                                 nn.Linear(self.hidden, self.hidden), nn.ReLU(),
                                 nn.Linear(self.hidden, 1))
        opt = torch.optim.Adam(self.net.parameters(), lr=self.lr)
        self.losses, self.val_losses = [], []
        best, best_state, best_epoch = np.inf, None, 0
        for epoch in range(self.epochs):
            order = rng.permutation(len(xt))
            total = 0.0
            for start in range(0, len(order), self.batch_size):
                idx = torch.as_tensor(order[start:start + self.batch_size])
                loss = ((self.net(xt[idx]).squeeze(-1) - yt[idx]) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.losses.append(total / len(order))
            with torch.no_grad():
                val = ((self.net(xv).squeeze(-1) - yv) ** 2).mean().item() if len(xv) else self.losses[-1]
            self.val_losses.append(val)
            if val < best:
                best, best_epoch = val, epoch
                best_state = {k: t.clone() for k, t in self.net.state_dict().items()}
            elif epoch - best_epoch > self.patience:
                break
        self.net.load_state_dict(best_state)
        return self

    @torch.no_grad()
    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.net(self._x(x)).squeeze(-1).double().numpy() * self.y_std + self.y_mean


def run_baseline(name: str, train: SampleSet, target: SampleSet, seed: int = 0,
                 val: SampleSet | None = None) -> list:
    """Fit a baseline on `train` rain labels and predict `target` as PredictionRecords."""
    from .training import PredictionRecord

    x_train, y_train = crop_features(train), train.labels[:, 0]
    if name == "LR":
        model = LinearBaseline().fit(x_train, y_train)
    elif name == "MLP":
        if val is not None and len(val):
            model = MLPBaseline(seed=seed).fit(x_train, y_train, crop_features(val), val.labels[:, 0])
        else:
            model = MLPBaseline(seed=seed).fit(x_train, y_train)
    else:
        raise ValueError(f"unknown baseline {name!r}; expected LR or MLP")
    pred = np.maximum(model.predict(crop_features(target)), 0.0)
    return [PredictionRecord(str(sid), int(ts), float(p), 1.0, float(p))
            for sid, ts, p in zip(target.station_ids, target.timestamps, pred)]
