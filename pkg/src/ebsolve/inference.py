"""Annealed gradient-descent solving with acceptance checks.

The solver initializes a candidate from standard normal noise and walks the
landscape ladder from the noisiest trained level (K-1) down to the cleanest
(1), taking T gradient steps per level and rescaling the candidate between
levels. A step is kept only if it strictly lowers the current level's energy,
so recorded traces are monotone and extra compute is safe to spend. A noisy
ancestral-sampling mode covers the diffusion-style ablation.

Everything operates on batches; row i of the batch draws its own init-noise
substream so results do not depend on how a dataset is chunked into calls.
Solving never mutates the model, so many solves may share one model.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import EnergyModel
from .schedule import RESCALE_FLOOR, NoiseSchedule
from .util import substream

__all__ = [
    "SolveConfig", "LandscapeTrace", "SolveTrace", "SolveAborted",
    "optimize_landscape", "anneal_solve", "noisy_reverse_step",
    "ddpm_coefficients", "discretize", "trace_is_monotone",
]


class SolveAborted(RuntimeError):
    """Non-finite energy during solving; whatever traces exist are attached.

    `traces` holds LandscapeTrace rows when raised by optimize_landscape and
    stitched SolveTrace rows when re-raised by anneal_solve. `step` is the
    in-landscape step index at abort (0 covers a bad initial state).
    """

    def __init__(self, level: int, step: int, traces: list):
        super().__init__(f"non-finite energy at level {level}, step {step}")
        self.level = int(level)
        self.step = int(step)
        self.traces = traces


@dataclass(frozen=True)
class SolveConfig:
    """Inference settings: T steps per landscape and per-level step sizes.

    Step sizes default to lambda0 * sigma_k^2, matching the scale of the
    denoising target at each level; pass `step_sizes` (indexed by level,
    length K+1) to override. `polish` appends T extra steps on the clean
    level 0 after the ladder, reusing the level-1 step size there because
    sigma_0 is zero.
    """

    steps: int = 10
    lambda0: float = 1.0
    step_sizes: tuple[float, ...] | None = None
    acceptance_check: bool = True
    noisy_mode: bool = False
    polish: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not self.lambda0 > 0.0:
            raise ValueError("lambda0 must be > 0")
        if self.step_sizes is not None:
            sizes = tuple(float(v) for v in self.step_sizes)
            if any(not v > 0.0 for v in sizes):
                raise ValueError("step sizes must be > 0")
            object.__setattr__(self, "step_sizes", sizes)

    def level_step_sizes(self, sched: NoiseSchedule) -> np.ndarray:
        K = sched.levels
        if self.step_sizes is not None:
            if len(self.step_sizes) != K + 1:
                raise ValueError(f"need {K + 1} step sizes, "
                                 f"got {len(self.step_sizes)}")
            return np.array(self.step_sizes, dtype=np.float64)
        lam = self.lambda0 * sched.sigma ** 2
        lam[0] = self.lambda0 * sched.sigma[1] ** 2
        return lam


@dataclass
class LandscapeTrace:
    """Step records for one batch row at one level.

    Each step record is (step index, energy before, proposal energy,
    accepted flag); rejected proposals leave the state at `energy before`.
    """

    level: int
    initial_energy: float
    steps: list[tuple[int, float, float, bool]]
    y_final: np.ndarray

    def retained_energies(self) -> list[float]:
        """Energy of the kept state after each step; monotone under acceptance."""
        out = [self.initial_energy]
        for _, e_before, e_prop, accepted in self.steps:
            out.append(e_prop if accepted else out[-1])
        return out


@dataclass
class SolveTrace:
    """Per-instance trace across all landscape levels visited, noisy to clean."""

    landscapes: list[LandscapeTrace]

    def final_energy(self) -> float:
        return self.landscapes[-1].retained_energies()[-1]

    def to_dict(self) -> dict:
        return {"landscapes": [
            {"level": lt.level,
             "initial_energy": float(lt.initial_energy),
             "steps": [[int(t), float(eb), float(ep), bool(acc)]
                       for t, eb, ep, acc in lt.steps],
             "retained_energies": [float(v) for v in lt.retained_energies()]}
            for lt in self.landscapes]}


def trace_is_monotone(trace: SolveTrace) -> bool:
    """True when every level's retained-energy sequence is non-increasing."""
    for lt in trace.landscapes:
        rets = lt.retained_energies()
        if any(b > a for a, b in zip(rets, rets[1:])):
            return False
    return True


def _data_tensor(arr: np.ndarray) -> Tensor:
    # Internal wrap without the finite-input check: proposals from a bad
    # model may be non-finite and must reach the acceptance/abort gates.
    return Tensor(np.asarray(arr, dtype=np.float64), None, _checked=True)


def _energies(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
              ks: np.ndarray) -> np.ndarray:
    e = model.energy_batch(X, _data_tensor(Y), ks)
    return np.array(e.data, dtype=np.float64)


def _energy_and_grad(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
                     ks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Rows are independent instances, so the gradient of the summed energy
    # stacks the per-instance gradients.
    yt = _data_tensor(Y)
    e = model.energy_batch(X, yt, ks)
    (g,) = ad.grad(ad.tsum(e), [yt])
    return np.array(e.data, dtype=np.float64), np.array(g.data, dtype=np.float64)


def optimize_landscape(model: EnergyModel, X: np.ndarray, Y0: np.ndarray,
                       k: int, steps: int, lam: float,
                       acceptance_check: bool = True,
                       ) -> tuple[np.ndarray, list[LandscapeTrace]]:
    """Run T acceptance-checked gradient steps on landscape level k.

    Proposes y' = y - lam * grad_y E(x, y, k) each step; with the acceptance
    check on, a proposal whose energy is not strictly lower is rejected and
    the state keeps its previous value. Returns the final batch and one
    LandscapeTrace per row. Raises SolveAborted if a retained state's energy
    is non-finite (rejection filters non-finite proposals automatically).
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.array(Y0, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or Y.shape[0] != X.shape[0]:
        raise ValueError(f"need matching batches, got x{X.shape} y{Y.shape}")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if not lam > 0.0:
        raise ValueError("step size must be > 0")
    B = X.shape[0]
    ks = np.full(B, int(k), dtype=np.int64)
    recs: list[list[tuple[int, float, float, bool]]] = [[] for _ in range(B)]

    def traces(e0):
        return [LandscapeTrace(int(k), float(e0[i]), recs[i], Y[i].copy())
                for i in range(B)]

    # FP garbage from wild proposals is handled by the gates, not raised.
    with np.errstate(over="ignore", invalid="ignore"):
        if steps == 0:
            e0 = _energies(model, X, Y, ks)
            if not np.all(np.isfinite(e0)):
                raise SolveAborted(k, 0, traces(e0))
            return Y, traces(e0)
        e0 = None
        for t in range(steps):
            e, grads = _energy_and_grad(model, X, Y, ks)
            if e0 is None:
                e0 = e
            if not np.all(np.isfinite(e)):
                raise SolveAborted(k, t, traces(e0))
            Yp = Y - lam * grads
            ep = _energies(model, X, Yp, ks)
            if acceptance_check:
                take = ep < e  # non-finite proposals compare False: rejected
            else:
                take = np.ones(B, dtype=bool)
            Y = np.where(take[:, None], Yp, Y)
            for i in range(B):
                recs[i].append((t, float(e[i]), float(ep[i]), bool(take[i])))
        e_last = np.where(take, ep, e)
        if not np.all(np.isfinite(e_last)):
            raise SolveAborted(k, steps - 1, traces(e0))
    return Y, traces(e0)


def _init_rows(seed: int, tag: str, index_base: int, B: int,
               y_dim: int) -> np.ndarray:
    if B == 0:
        return np.zeros((0, y_dim))
    return np.stack([
        np.random.default_rng(substream(seed, tag, index_base + i))
        .standard_normal(y_dim) for i in range(B)])


def anneal_solve(model: EnergyModel, X: np.ndarray, sched: NoiseSchedule,
                 config: SolveConfig, index_base: int = 0,
                 y_dim: int | None = None,
                 ) -> tuple[np.ndarray, list[SolveTrace]]:
    """Solve a batch of inputs across the annealed landscape ladder.

    Starts from per-row standard-normal noise, optimizes levels K-1 down
    to 1 with T steps each, and rescales the candidate between levels.
    Deterministic given (model, X, config.seed, index_base). `y_dim`
    overrides the model spec's output size for size-agnostic heads.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"x must be [batch, features], got {X.shape}")
    K = sched.levels
    if model.spec.levels != K:
        raise ValueError(f"model has {model.spec.levels} levels, "
                         f"schedule has {K}")
    B = X.shape[0]
    dy = model.spec.y_dim if y_dim is None else int(y_dim)
    if config.noisy_mode:
        return _noisy_solve(model, X, sched, config, index_base, dy)

    lam = config.level_step_sizes(sched)
    Y = _init_rows(config.seed, "init", index_base, B, dy)
    per_level: list[list[LandscapeTrace]] = []

    def stitch(extra=None):
        rows = per_level + ([extra] if extra is not None else [])
        return [SolveTrace([lvl[i] for lvl in rows]) for i in range(B)]

    ladder = list(range(K - 1, 0, -1)) + ([0] if config.polish else [])
    for k in ladder:
        try:
            Y, lts = optimize_landscape(model, X, Y, k, config.steps,
                                        float(lam[k]), config.acceptance_check)
        except SolveAborted as ex:
            raise SolveAborted(ex.level, ex.step, stitch(ex.traces)) from None
        per_level.append(lts)
        if k > 1:
            Y = sched.rescale_between(Y, k, k - 1)
    return Y, stitch()


def ddpm_coefficients(sched: NoiseSchedule, k: int,
                      ) -> tuple[float, float, float, float]:
    """(alpha_k, beta_k, noise_coef_k, sigma_tilde_k) for one reverse step.

    alpha_k = alpha_bar[k]/alpha_bar[k-1] after flooring alpha_bar at
    RESCALE_FLOOR (keeps the pure-noise endpoint finite), beta_k = 1-alpha_k,
    noise_coef_k = beta_k/sqrt(1-alpha_bar[k]) scales the predicted noise,
    and sigma_tilde_k is the posterior stddev, which vanishes at k=1.
    """
    k = sched.check_level(int(k))
    if k < 1:
        raise ValueError("reverse step needs 1 <= k <= K")
    ab_k = max(float(sched.alpha_bar[k]), RESCALE_FLOOR)
    ab_prev = max(float(sched.alpha_bar[k - 1]), RESCALE_FLOOR)
    alpha = ab_k / ab_prev
    beta = 1.0 - alpha
    noise_coef = beta / np.sqrt(1.0 - ab_k)
    var = (1.0 - ab_prev) / (1.0 - ab_k) * beta
    return float(alpha), float(beta), float(noise_coef), float(np.sqrt(var))


def noisy_reverse_step(model: EnergyModel, X: np.ndarray, Y: np.ndarray,
                       k: int, sched: NoiseSchedule,
                       rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None) -> np.ndarray:
    """One ancestral reverse-diffusion update from level k to k-1.

    The energy gradient acts as the noise predictor: the posterior mean is
    (y - noise_coef_k * grad) / sqrt(alpha_k), plus sigma_tilde_k * z for
    k > 1 (no noise at the final level). Pass `noise` to supply z directly;
    otherwise it is drawn from `rng`.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    alpha, _, noise_coef, sig = ddpm_coefficients(sched, k)
    ks = np.full(X.shape[0], int(k), dtype=np.int64)
    _, grads = _energy_and_grad(model, X, Y, ks)
    out = (Y - noise_coef * grads) / np.sqrt(alpha)
    if k > 1:
        if noise is None:
            if rng is None:
                raise ValueError("rng required when noise is injected")
            noise = rng.standard_normal(Y.shape)
        out = out + sig * np.asarray(noise, dtype=np.float64)
    return out


def _noisy_solve(model: EnergyModel, X: np.ndarray, sched: NoiseSchedule,
                 config: SolveConfig, index_base: int, dy: int,
                 ) -> tuple[np.ndarray, list[SolveTrace]]:
    """Full reverse chain K..1 for the diffusion-style ablation."""
    B = X.shape[0]
    gens = [np.random.default_rng(substream(config.seed, "noisy",
                                            index_base + i))
            for i in range(B)]
    Y = (np.stack([g.standard_normal(dy) for g in gens])
         if B else np.zeros((0, dy)))
    per_level: list[list[LandscapeTrace]] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(sched.levels, 0, -1):
            ks = np.full(B, k, dtype=np.int64)
            e_before = _energies(model, X, Y, ks)
            noise = (np.stack([g.standard_normal(dy) for g in gens])
                     if (k > 1 and B) else None)
            Y = noisy_reverse_step(model, X, Y, k, sched, noise=noise)
            e_after = _energies(model, X, Y, ks)
            per_level.append([
                LandscapeTrace(k, float(e_before[i]),
                               [(0, float(e_before[i]), float(e_after[i]),
                                 True)], Y[i].copy())
                for i in range(B)])
    return Y, [SolveTrace([lvl[i] for lvl in per_level]) for i in range(B)]


def discretize(y: np.ndarray, group_size: int | None = None) -> np.ndarray:
    """Snap continuous outputs onto the discrete output encoding.

    With a group size g, every g consecutive entries along the last axis
    form a one-hot category and the argmax wins, ties to the lowest index.
    Without one, entries are binary and threshold at 0.5.
    """
    y = np.asarray(y, dtype=np.float64)
    if group_size is None or int(group_size) == 1:
        return (y >= 0.5).astype(np.float64)
    g = int(group_size)
    if g < 2 or y.shape[-1] % g != 0:
        raise ValueError(f"last axis {y.shape[-1]} not divisible into "
                         f"groups of {g}")
    shaped = y.reshape(y.shape[:-1] + (y.shape[-1] // g, g))
    idx = np.argmax(shaped, axis=-1)  # first max wins ties
    out = np.zeros_like(shaped)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out.reshape(y.shape)
