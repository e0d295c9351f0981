"""Scikit-learn style estimator facade.

EnergySolver bundles the full pipeline behind fit/predict: fit trains the
annealed landscape ladder on (X, y) pairs, predict descends it. Constructor
arguments follow the scikit-learn convention (stored verbatim, validated at
fit time) so get_params / set_params / clone all behave normally.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ebsolve import training as tr
from ebsolve.inference import SolveConfig, SolveTrace, anneal_solve
from ebsolve.models import ModelSpec, build_model
from ebsolve.schedule import make_cosine_schedule


def _as_matrix(name: str, arr, rows: int | None = None) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[0] == 0 or out.shape[1] == 0:
        raise ValueError(f"{name} must be a non-empty 2-D array, "
                         f"got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite values")
    if rows is not None and out.shape[0] != rows:
        raise ValueError(f"{name} has {out.shape[0]} rows, expected {rows}")
    return out


class EnergySolver(BaseEstimator):
    """Annealed energy-landscape regressor.

    Parameters mirror the library configs: (arch, width, depth, levels)
    shape the energy network, (iterations, batch_size, lr,
    contrastive_weight, negative, group_size) control training, and
    (steps, lambda0, polish) control inference-time descent. `steps` can
    be raised per predict call to spend more compute on harder inputs.
    """

    def __init__(self, arch="mlp", width=128, depth=3, levels=10,
                 iterations=2000, batch_size=128, lr=1e-3,
                 contrastive_weight=1.0, negative="continuous",
                 group_size=0, steps=10, lambda0=1.0, polish=False,
                 chunk=64, seed=0):
        self.arch = arch
        self.width = width
        self.depth = depth
        self.levels = levels
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.contrastive_weight = contrastive_weight
        self.negative = negative
        self.group_size = group_size
        self.steps = steps
        self.lambda0 = lambda0
        self.polish = polish
        self.chunk = chunk
        self.seed = seed

    # -- scikit-learn protocol ------------------------------------------
    def fit(self, X, y) -> "EnergySolver":
        X = _as_matrix("X", X)
        y = _as_matrix("y", y, rows=X.shape[0])
        spec = ModelSpec(arch=self.arch, x_dim=X.shape[1], y_dim=y.shape[1],
                         width=self.width, depth=self.depth,
                         levels=self.levels)
        cfg = tr.TrainConfig(
            iterations=self.iterations, batch_size=self.batch_size,
            lr=self.lr, contrastive_weight=self.contrastive_weight,
            seed=self.seed,
            negative=tr.NegativeSpec(self.negative, self.group_size))
        self.model_ = build_model(spec, seed=self.seed)
        self.schedule_ = make_cosine_schedule(self.levels)
        self.history_, _ = tr.train(self.model_, X, y, self.schedule_, cfg)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    def predict(self, X, steps: int | None = None) -> np.ndarray:
        Y, _ = self._solve(X, steps)
        return Y

    def score(self, X, y, steps: int | None = None) -> float:
        """Negative elementwise MSE (greater is better)."""
        y = _as_matrix("y", y)
        pred = self.predict(X, steps=steps)
        if pred.shape != y.shape:
            raise ValueError(f"y shape {y.shape} != predicted {pred.shape}")
        return -float(np.mean((pred - y) ** 2))

    # -- extras -----------------------------------------------------------
    def solve_traces(self, X, steps: int | None = None) -> list[SolveTrace]:
        """Per-instance energy traces for the same solve predict runs."""
        _, traces = self._solve(X, steps)
        return traces

    def _solve(self, X, steps):
        self._check_fitted()
        X = _as_matrix("X", X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fit saw "
                             f"{self.n_features_in_}")
        cfg = SolveConfig(steps=self.steps if steps is None else int(steps),
                          lambda0=self.lambda0, polish=self.polish,
                          seed=self.seed)
        preds = []
        traces = []
        for lo in range(0, X.shape[0], self.chunk):
            Y, trc = anneal_solve(self.model_, X[lo:lo + self.chunk],
                                  self.schedule_, cfg, index_base=lo)
            preds.append(Y)
            traces.extend(trc)
        return np.concatenate(preds, axis=0), traces

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("EnergySolver is not fitted yet; call fit")
