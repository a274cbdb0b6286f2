"""Controlled SDEs, their episodic safety MDP, and Monte-Carlo safety estimation.

A system dX = f(X,U) dt + sigma(X,U) dW with a finite action set is
discretized at control interval dt (Euler-Maruyama, optional substeps with
the control held constant).  Safety over an outlook horizon tau means the
state is inside the safe set at every control boundary t_k, k = 0..floor(tau/dt).

The learning problem augments the state with the remaining horizon h.  An
augmented state is absorbing when h < 0 or x has left the safe set; a unit
(or mollified) reward is emitted exactly once, on the step out of a state
whose remaining horizon lies in [0, dt).  Episode return is then the
survival indicator, so value functions are safety probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class IntegrationDivergedError(RuntimeError):
    """Integrator produced a non-finite state; carries the offending state."""

    def __init__(self, state: np.ndarray):
        super().__init__(f"integration diverged: state={state}")
        self.state = state


class AbsorbingStateError(RuntimeError):
    """Raised when a caller steps an augmented state that is already absorbing."""


@dataclass
class SdeSystem:
    """Controlled SDE with a finite action set.

    drift(x, u) -> (n,) state units per second
    diffusion(x, u) -> (n, w) state units per sqrt(second); w = 0 means
    deterministic dynamics.
    """

    drift: Callable[[np.ndarray, np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray, np.ndarray], np.ndarray]
    state_dim: int
    noise_dim: int
    action_set: Sequence[np.ndarray]
    # optional vectorized forms over a batch of states/actions, (m,n),(m,k) -> (m,n) / (m,n,w);
    # used by Monte-Carlo estimation when present, with bit-identical results
    drift_batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None
    diffusion_batch: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.noise_dim < 0:
            raise ValueError("noise_dim must be >= 0")
        self.action_set = [np.atleast_1d(np.asarray(a, dtype=float)) for a in self.action_set]


@dataclass
class SafeSet:
    """Safe region given by a signed distance (positive inside, 0 on the boundary).

    The set is open: the boundary itself counts as unsafe.  epsilon is the
    shrink margin of the mollifier ramp; mollifier() is 1 at signed distance
    >= epsilon, 0 outside the set, linear in between.
    """

    signed_distance: Callable[[np.ndarray], float]
    epsilon: float = 0.0
    # optional vectorized signed distance over a batch of states, (m, n) -> (m,)
    signed_distance_batch: Callable[[np.ndarray], np.ndarray] | None = None

    def contains(self, x: np.ndarray) -> bool:
        return self.signed_distance(x) > 0.0

    def mollifier(self, x: np.ndarray) -> float:
        """l_eps(x) = clip(signed_distance / epsilon, 0, 1); indicator when eps = 0."""
        d = self.signed_distance(x)
        if self.epsilon <= 0.0:
            return 1.0 if d > 0.0 else 0.0
        return float(np.clip(d / self.epsilon, 0.0, 1.0))


@dataclass
class AugmentedState:
    """Remaining outlook horizon h paired with a state vector x."""

    h: float
    x: np.ndarray

    def is_absorbing(self, safe_set: SafeSet) -> bool:
        return self.h < 0.0 or not safe_set.contains(self.x)

    def reward_eligible(self, dt: float) -> bool:
        return 0.0 <= self.h < dt


@dataclass
class Transition:
    s: AugmentedState
    a: int
    reward: float
    s_next: AugmentedState
    terminal: bool


def step_euler_maruyama(
    system: SdeSystem,
    x: np.ndarray,
    u: np.ndarray,
    dt: float,
    rng: np.random.Generator,
    n_substeps: int = 1,
) -> np.ndarray:
    """One control interval of Euler-Maruyama with the control held constant.

    Noise draws: per substep, one standard-normal vector of length noise_dim
    (skipped entirely when noise_dim == 0), scaled by sqrt(dt/n_substeps).
    This draw order is a documented contract relied on by reproducibility
    tests.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float).copy()
    h = dt / n_substeps
    sqrt_h = np.sqrt(h)
    for _ in range(n_substeps):
        dx = system.drift(x, u) * h
        if system.noise_dim > 0:
            z = rng.standard_normal(system.noise_dim)
            dx = dx + system.diffusion(x, u) @ (z * sqrt_h)
        x = x + dx
    if not np.all(np.isfinite(x)):
        raise IntegrationDivergedError(x)
    return x


def reward_binary(s: AugmentedState, safe_set: SafeSet, dt: float) -> float:
    """1 iff the horizon is in [0, dt) and x is safe, else 0."""
    return 1.0 if (s.reward_eligible(dt) and safe_set.contains(s.x)) else 0.0


def reward_mollified(s: AugmentedState, safe_set: SafeSet, dt: float) -> float:
    """indicator(h in [0, dt)) * l_eps(x); equals reward_binary when eps = 0."""
    if not s.reward_eligible(dt):
        return 0.0
    return safe_set.mollifier(s.x)


def step_augmented(
    system: SdeSystem,
    safe_set: SafeSet,
    s: AugmentedState,
    a: int,
    dt: float,
    rng: np.random.Generator,
    n_substeps: int = 1,
    mollified: bool = False,
) -> tuple[AugmentedState, float, bool]:
    """Advance the augmented MDP one control step.

    Reward is a function of the *current* state (nonzero only when its
    horizon is in [0, dt)); the episode terminates either because that
    reward window was reached (horizon exhausted) or because the successor
    is absorbing.  Stepping an absorbing state is a contract violation.
    """
    if s.is_absorbing(safe_set):
        raise AbsorbingStateError(f"stepping absorbing state h={s.h}, x={s.x}")
    reward = (reward_mollified if mollified else reward_binary)(s, safe_set, dt)
    x_next = step_euler_maruyama(system, s.x, system.action_set[a], dt, rng, n_substeps)
    s_next = AugmentedState(s.h - dt, x_next)
    terminal = s.reward_eligible(dt) or s_next.is_absorbing(safe_set)
    return s_next, reward, terminal


def n_safety_checks(tau: float, dt: float) -> int:
    """N(tau) = floor(tau/dt): index of the last control boundary inside the horizon."""
    return int(np.floor(tau / dt))


def mc_safety_probability(
    system: SdeSystem,
    safe_set: SafeSet,
    policy: Callable[[float, np.ndarray], int],
    s0: AugmentedState,
    dt: float,
    n_rollouts: int,
    rng: np.random.Generator,
    n_substeps: int = 1,
    batched_policy: Callable[[float, np.ndarray], np.ndarray] | None = None,
) -> tuple[float, float]:
    """Empirical probability that x stays safe at every check time.

    Counts rollouts with x_k inside the safe set for all k = 0..N(tau); this
    is a direct trajectory count, independent of the reward/absorption
    machinery (used to cross-check the episodic-return identity).

    Noise layout: at every substep one (n_rollouts, noise_dim) matrix is drawn
    and rollout i reads row i, so the estimate does not depend on whether
    rollouts are advanced one at a time or as a batch.  ``batched_policy``,
    when given, maps (h, X (m, n)) -> action indices (m,) and enables a
    vectorized fast path with identical results.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    n_steps = n_safety_checks(s0.h, dt)
    X = np.tile(np.asarray(s0.x, dtype=float), (n_rollouts, 1))
    alive = np.full(n_rollouts, safe_set.contains(s0.x))
    h_sub = dt / n_substeps
    sqrt_h = np.sqrt(h_sub)
    actions = np.array([np.atleast_1d(a) for a in system.action_set])
    vectorized = system.drift_batch is not None
    for k in range(n_steps):
        if not np.any(alive):
            break
        if batched_policy is not None:
            a_idx = np.asarray(batched_policy(s0.h - k * dt, X))
        else:
            a_idx = np.array([policy(s0.h - k * dt, X[i]) for i in range(n_rollouts)])
        U = actions[a_idx]
        for _ in range(n_substeps):
            Z = (
                rng.standard_normal((n_rollouts, system.noise_dim))
                if system.noise_dim > 0
                else None
            )
            if vectorized:
                dX = system.drift_batch(X, U) * h_sub
                if Z is not None:
                    dX = dX + np.einsum("mnw,mw->mn", system.diffusion_batch(X, U), Z * sqrt_h)
                X[alive] = X[alive] + dX[alive]
            else:
                for i in np.flatnonzero(alive):
                    dx = system.drift(X[i], U[i]) * h_sub
                    if Z is not None:
                        dx = dx + system.diffusion(X[i], U[i]) @ (Z[i] * sqrt_h)
                    X[i] = X[i] + dx
        if safe_set.signed_distance_batch is not None:
            alive &= safe_set.signed_distance_batch(X) > 0.0
        else:
            for i in np.flatnonzero(alive):
                if not safe_set.contains(X[i]):
                    alive[i] = False
    p = float(np.mean(alive))
    half_width = 1.96 * np.sqrt(p * (1.0 - p) / n_rollouts)
    return p, half_width
