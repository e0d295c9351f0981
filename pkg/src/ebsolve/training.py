"""Training: denoising-gradient loss, contrastive shaping, Adam.

Each step samples one level per instance, corrupts the target with that
level's noise, and asks the energy gradient in y to reproduce the injected
noise. A contrastive term, sharing the same corruption draw so its variance
stays low, pushes the energy of a mined hard negative above the energy of
the true output.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ebsolve import autodiff as ad
from ebsolve.autodiff import Tensor
from ebsolve.models import EnergyModel
from ebsolve.schedule import NoiseSchedule
from ebsolve.util import substream


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite; carries the iteration."""

    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


def _data_tensor(arr: np.ndarray) -> Tensor:
    # Internal wrap without the finite-input check: a diverging model must
    # reach the loss check in train_step, which is the divergence gate.
    return Tensor(np.asarray(arr, dtype=np.float64), None, _checked=True)


@dataclass(frozen=True)
class NegativeSpec:
    """How to mine hard negatives for one task family.

    kind "continuous": perturb then descend the current landscape.
    kind "onehot": resample whole one-hot groups of length group_size.
    kind "binary": flip individual 0/1 entries.
    """

    kind: str = "continuous"
    group_size: int = 0

    def __post_init__(self):
        if self.kind not in ("continuous", "onehot", "binary"):
            raise ValueError(f"unknown negative kind {self.kind!r}")
        if self.kind == "onehot" and self.group_size < 2:
            raise ValueError("onehot negatives need group_size >= 2")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    contrastive_weight: float = 1.0
    lambda0: float = 1.0           # negative mining reuses lambda_k = lambda0 * sigma_k^2
    negative_noise: float = 0.3    # std of the perturbation seeding continuous negatives
    negative_steps: int = 2
    resample_frac: float = 0.2     # fraction of groups/entries resampled for discrete negatives
    seed: int = 0
    negative: NegativeSpec = field(default_factory=NegativeSpec)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.contrastive_weight < 0:
            raise ValueError("contrastive_weight must be >= 0")
        if not 0.0 <= self.resample_frac <= 1.0:
            raise ValueError("resample_frac must be in [0, 1]")


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, model: EnergyModel) -> "AdamState":
        return cls(m={k: np.zeros(p.shape) for k, p in model.params.items()},
                   v={k: np.zeros(p.shape) for k, p in model.params.items()},
                   t=0)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in self.m.items():
            out[f"adam_m/{k}"] = v
        for k, v in self.v.items():
            out[f"adam_v/{k}"] = v
        return out


def adam_step(model: EnergyModel, grads: dict[str, np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; parameters become fresh leaves."""
    state.t += 1
    t = state.t
    new_params = {}
    for name, p in model.params.items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        mh = state.m[name] / (1 - beta1 ** t)
        vh = state.v[name] / (1 - beta2 ** t)
        new_params[name] = ad.tensor(p.data - lr * mh / (np.sqrt(vh) + eps))
    model.params = new_params


# ---------------------------------------------------------------------------
# losses

def corrupt_batch(sched: NoiseSchedule, Y: np.ndarray, ks: np.ndarray,
                  eps: np.ndarray) -> np.ndarray:
    """Per-instance corruption: rows may sit at different levels."""
    ab = sched.alpha_bar[ks][:, None]
    sg = sched.sigma[ks][:, None]
    return np.sqrt(ab) * Y + sg * eps


def denoising_loss(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
                   ks: np.ndarray, eps: np.ndarray,
                   sched: NoiseSchedule) -> Tensor:
    """Mean over the batch of ||gradient_y(E) - eps||^2 at corrupted inputs."""
    B = X.shape[0]
    y_noisy = _data_tensor(corrupt_batch(sched, Y, ks, eps))
    e = model.energy_batch(X, y_noisy, ks)
    # Instances are independent, so the gradient of the summed energies
    # stacks the per-instance gradients.
    (gy,) = ad.grad(ad.tsum(e), [y_noisy])
    return ad.scale(ad.sq_l2(ad.sub(gy, ad.tensor(eps))), 1.0 / B)


def contrastive_loss(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
                     y_neg: np.ndarray, ks: np.ndarray, eps: np.ndarray,
                     sched: NoiseSchedule) -> Tensor:
    """Mean softplus(E+ - E-) with one shared corruption draw per instance."""
    B = X.shape[0]
    e_pos = model.energy_batch(X, _data_tensor(corrupt_batch(sched, Y, ks, eps)), ks)
    e_neg = model.energy_batch(X, _data_tensor(corrupt_batch(sched, y_neg, ks, eps)), ks)
    return ad.mean(ad.softplus(ad.sub(e_pos, e_neg)))


def make_negative(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
                  ks: np.ndarray, sched: NoiseSchedule, cfg: TrainConfig,
                  rng: np.random.Generator) -> np.ndarray:
    """Mine one hard negative per instance; the result is detached data.

    Continuous: perturb the target, then take two acceptance-free descent
    steps on the instance's current landscape so the negative lands near a
    spurious minimum. Discrete: resample a fraction of categorical groups
    (one-hot rows move to a different category, binary entries flip).
    """
    neg = cfg.negative
    if neg.kind == "continuous":
        y_neg = Y + cfg.negative_noise * rng.standard_normal(Y.shape)
        for _ in range(cfg.negative_steps):
            lam = cfg.lambda0 * (sched.sigma[ks] ** 2)[:, None]
            yt = _data_tensor(y_neg)
            e = model.energy_batch(X, yt, ks)
            (gy,) = ad.grad(ad.tsum(e), [yt])
            y_neg = y_neg - lam * gy.data
        return y_neg
    if neg.kind == "onehot":
        gs = neg.group_size
        if Y.shape[1] % gs:
            raise ValueError(f"y length {Y.shape[1]} not divisible by "
                             f"group_size {gs}")
        groups = Y.shape[1] // gs
        n_replace = int(round(cfg.resample_frac * groups))
        y_neg = Y.copy().reshape(Y.shape[0], groups, gs)
        for b in range(Y.shape[0]):
            rows = rng.choice(groups, size=n_replace, replace=False)
            for r in rows:
                old = int(np.argmax(y_neg[b, r]))
                shift = int(rng.integers(1, gs))
                y_neg[b, r] = 0.0
                y_neg[b, r, (old + shift) % gs] = 1.0
        return y_neg.reshape(Y.shape)
    # binary
    y_neg = Y.copy()
    n_flip = int(round(cfg.resample_frac * Y.shape[1]))
    for b in range(Y.shape[0]):
        cols = rng.choice(Y.shape[1], size=n_flip, replace=False)
        y_neg[b, cols] = 1.0 - y_neg[b, cols]
    return y_neg


def train_step(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
               sched: NoiseSchedule, cfg: TrainConfig, state: AdamState,
               rng: np.random.Generator, iteration: int = 0
               ) -> tuple[float, float, float]:
    """One batch update; returns (total, denoising, contrastive) losses."""
    B = X.shape[0]
    K = sched.levels
    ks = rng.integers(1, K + 1, size=B)
    eps = rng.standard_normal(Y.shape)

    y_noisy = _data_tensor(corrupt_batch(sched, Y, ks, eps))
    e_pos = model.energy_batch(X, y_noisy, ks)
    (gy,) = ad.grad(ad.tsum(e_pos), [y_noisy])
    loss_mse = ad.scale(ad.sq_l2(ad.sub(gy, ad.tensor(eps))), 1.0 / B)

    if cfg.contrastive_weight > 0.0:
        y_neg = make_negative(model, X, Y, ks, sched, cfg, rng)
        e_neg = model.energy_batch(
            X, _data_tensor(corrupt_batch(sched, y_neg, ks, eps)), ks)
        loss_con = ad.mean(ad.softplus(ad.sub(e_pos, e_neg)))
    else:
        loss_con = ad.tensor(0.0)

    loss = ad.add(loss_mse, ad.scale(loss_con, cfg.contrastive_weight))
    total = loss.item()
    if not np.isfinite(total):
        raise TrainingDiverged(iteration, total)

    names = list(model.params)
    grads = ad.grad(loss, [model.params[n] for n in names])
    adam_step(model, {n: g.data for n, g in zip(names, grads)}, state, cfg.lr)
    return total, loss_mse.item(), loss_con.item()


def train(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
          sched: NoiseSchedule, cfg: TrainConfig,
          state: AdamState | None = None, start_iteration: int = 0,
          callback=None) -> tuple[list[tuple[int, float, float, float]], AdamState]:
    """Uniform-with-replacement batches for cfg.iterations steps.

    The RNG is a counter-based substream keyed by (seed, iteration), so a
    run resumed from (state, start_iteration) replays the exact remainder
    of an uninterrupted run. Returns (history, adam state); history rows
    are (iteration, total, denoising, contrastive).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0] or X.shape[0] == 0:
        raise ValueError("X and Y must be non-empty with matching rows")
    if state is None:
        state = AdamState.init(model)
    history: list[tuple[int, float, float, float]] = []
    for it in range(start_iteration, cfg.iterations):
        rng = substream(cfg.seed, "train", it)
        idx = rng.integers(0, X.shape[0], size=cfg.batch_size)
        total, mse, con = train_step(model, X[idx], Y[idx], sched, cfg,
                                     state, rng, iteration=it)
        history.append((it, total, mse, con))
        if callback is not None:
            callback(it, model, state, history)
    return history, state
