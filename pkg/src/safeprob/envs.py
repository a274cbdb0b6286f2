"""Benchmark environments: 1D controlled Brownian motion and two driving tasks.

Each environment bundles a controlled SDE, a safe set, episode/collocation/
boundary sampling regions, and the featurization the learner sees.  The
augmented-state input layout is always [tau, features...]:

* brownian: [tau, x]                                            (dim 2)
* vehicle:  [tau, v_x, beta, r, e, psi, t1x, t1y, ..., t5x, t5y] (dim 16)

Vehicle simulator state is [v_x, beta, r, e, psi, s] with s the arc-length
position along the lane centerline; s drives road curvature and the five
lookahead reference points.  The learner never sees s directly — the
reference points encode the upcoming road, as in camera/localization stacks.

For the PDE terms, drift in input coordinates is f_tilde = [-1, f(x, u)] and
diffusion sigma_tilde = [0, sigma(x, u)].  The reference-point convection
terms are zeroed (their motion is not modeled in the physics loss); vehicle
physics losses default to the convection-only PDE (zero diffusion), while the
simulator noise is configured independently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sde import AugmentedState, SafeSet, SdeSystem, step_augmented
from .vehicle import (
    RoadGeometry,
    VehicleParams,
    VehicleState,
    fiala_lateral_force,
    make_corner_track,
    slip_angles,
)


@dataclass
class ActionGrid:
    """Discrete (steering, throttle) grid, row-major with steering outer.

    index = i_steer * len(throttle_levels) + i_throttle; this bijection is a
    stable contract used by checkpoints and exported CSVs.
    """

    steering_levels: tuple = (-0.8, -0.4, 0.0, 0.4, 0.8)
    throttle_levels: tuple = (0.6, 0.7, 0.8, 0.9, 1.0)

    @property
    def values(self) -> np.ndarray:
        return np.array(
            [[s, t] for s in self.steering_levels for t in self.throttle_levels]
        )

    def __len__(self):
        return len(self.steering_levels) * len(self.throttle_levels)

    def index_of(self, steer: float, throttle: float) -> int:
        i = self.steering_levels.index(steer)
        j = self.throttle_levels.index(throttle)
        return i * len(self.throttle_levels) + j

    def steering_of(self, idx: int) -> float:
        return self.steering_levels[idx // len(self.throttle_levels)]

    def throttle_of(self, idx: int) -> float:
        return self.throttle_levels[idx % len(self.throttle_levels)]


class SafetyEnv:
    """Common machinery shared by the concrete environments."""

    name: str
    system: SdeSystem
    safe_set: SafeSet
    dt: float
    n_substeps: int
    tau_max: float
    tau_init: object  # float (fixed horizon) or (lo, hi) uniform range
    action_names: tuple
    feature_names: tuple  # without the leading "tau"
    input_offset: np.ndarray
    input_scale: np.ndarray
    reward_uses_mollifier: bool = False

    @property
    def input_dim(self) -> int:
        return 1 + len(self.feature_names)

    @property
    def n_actions(self) -> int:
        return len(self.system.action_set)

    # --- featurization -----------------------------------------------------
    def features_batch(self, H: np.ndarray, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def features(self, s: AugmentedState) -> np.ndarray:
        return self.features_batch(np.array([s.h]), np.atleast_2d(s.x))[0]

    # --- episode interface ---------------------------------------------------
    def sample_horizon(self, rng: np.random.Generator) -> float:
        if np.isscalar(self.tau_init):
            return float(self.tau_init)
        lo, hi = self.tau_init
        return float(rng.uniform(lo, hi))

    def sample_initial(self, rng: np.random.Generator) -> AugmentedState:
        return AugmentedState(self.sample_horizon(rng), self.sample_x_init(rng, 1)[0])

    def step(self, s: AugmentedState, a_idx: int, rng: np.random.Generator):
        return step_augmented(
            self.system, self.safe_set, s, a_idx, self.dt, rng,
            n_substeps=self.n_substeps, mollified=self.reward_uses_mollifier,
        )

    # --- sampling regions (uniform; x in simulator coordinates) --------------
    def sample_x_init(self, rng, n: int) -> np.ndarray:
        raise NotImplementedError

    def sample_x_collocation(self, rng, n: int) -> np.ndarray:
        raise NotImplementedError

    def sample_x_boundary(self, rng, n: int) -> np.ndarray:
        raise NotImplementedError

    # --- PDE terms in input coordinates --------------------------------------
    def pde_drift_batch(self, X: np.ndarray, a_idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def pde_diffusion_batch(self, X: np.ndarray, a_idx: np.ndarray):
        """(m, input_dim, w) diffusion columns, or None when the PDE is noiseless."""
        return None

    def boundary_mollifier_batch(self, X: np.ndarray) -> np.ndarray:
        d = self.safe_set.signed_distance_batch(X)
        eps = self.safe_set.epsilon
        if eps <= 0:
            return (d > 0).astype(float)
        return np.clip(d / eps, 0.0, 1.0)


def _uniform_box(rng, lo: np.ndarray, hi: np.ndarray, n: int) -> np.ndarray:
    return rng.uniform(size=(n, lo.size)) * (hi - lo) + lo


# --- 1D Brownian benchmark ----------------------------------------------------

@dataclass
class BrownianConfig:
    half_width: float = 1.0  # safe set (-b, b)
    sigma: float = 0.5
    u_max: float = 0.5  # control levels {-u_max, 0, +u_max}; 0 -> single no-op action
    dt: float = 0.02
    n_substeps: int = 1
    tau_max: float = 1.0
    init_half_width: float = 0.9  # Omega_D = (-0.9, 0.9) by default
    boundary_epsilon: float = 0.1  # mollifier for boundary-loss targets
    pde_sigma: float | None = None  # None: PDE uses the simulator sigma


class BrownianEnv(SafetyEnv):
    """dX = u dt + sigma dW on the interval (-b, b); the ground-truth-verifiable case."""

    def __init__(self, cfg: BrownianConfig):
        self.cfg = cfg
        self.name = "brownian"
        b = cfg.half_width
        if cfg.u_max > 0:
            actions = [[-cfg.u_max], [0.0], [cfg.u_max]]
        else:
            actions = [[0.0]]
        self.system = SdeSystem(
            drift=lambda x, u: np.array([u[0]]),
            diffusion=lambda x, u: np.array([[cfg.sigma]]),
            state_dim=1,
            noise_dim=1 if cfg.sigma > 0 else 0,
            action_set=actions,
            drift_batch=lambda X, U: U[:, :1],
            diffusion_batch=lambda X, U: np.full((X.shape[0], 1, 1), cfg.sigma),
        )
        self.safe_set = SafeSet(
            signed_distance=lambda x: b - abs(float(np.atleast_1d(x)[0])),
            epsilon=cfg.boundary_epsilon,
            signed_distance_batch=lambda X: b - np.abs(X[:, 0]),
        )
        self.dt = cfg.dt
        self.n_substeps = cfg.n_substeps
        self.tau_max = cfg.tau_max
        self.tau_init = cfg.tau_max
        self.action_names = ("u",)
        self.feature_names = ("x",)
        self.input_offset = np.array([cfg.tau_max / 2.0, 0.0])
        self.input_scale = np.array([max(cfg.tau_max / 2.0, 1e-9), b])
        self._pde_sigma = cfg.sigma if cfg.pde_sigma is None else cfg.pde_sigma

    def features_batch(self, H, X):
        return np.column_stack([H, X[:, 0]])

    def sample_x_init(self, rng, n):
        a = self.cfg.init_half_width
        return _uniform_box(rng, np.array([-a]), np.array([a]), n)

    def sample_x_collocation(self, rng, n):
        b = self.cfg.half_width
        return np.clip(_uniform_box(rng, np.array([-b]), np.array([b]), n),
                       -b * (1 - 1e-12), b * (1 - 1e-12))

    def sample_x_boundary(self, rng, n):
        b = self.cfg.half_width
        return (b * np.sign(rng.uniform(-1.0, 1.0, size=n)))[:, None]

    def pde_drift_batch(self, X, a_idx):
        U = np.asarray(self.system.action_set)[a_idx]
        return np.column_stack([-np.ones(X.shape[0]), U[:, 0]])

    def pde_diffusion_batch(self, X, a_idx):
        if self._pde_sigma <= 0:
            return None
        cols = np.zeros((X.shape[0], 2, 1))
        cols[:, 1, 0] = self._pde_sigma
        return cols


def make_brownian_benchmark(cfg: BrownianConfig | None = None) -> BrownianEnv:
    return BrownianEnv(cfg or BrownianConfig())


# --- vehicle environments -------------------------------------------------------

@dataclass
class VehicleEnvConfig:
    """Desk-scale driving scenario on a straight-arc-straight lane."""

    e_max: float = 1.0
    corner_radius: float = 20.0
    corner_angle_deg: float = 90.0
    entry_length: float = 30.0
    exit_length: float = 150.0
    left_turn: bool = True
    dt: float = 0.05
    n_substeps: int = 5
    tau_max: float = 5.0
    tau_init: tuple = (0.0, 5.0)
    lookaheads: tuple = (2.0, 4.0, 6.0, 8.0, 10.0)
    # spawn ranges (P_D); scalars mean a fixed value
    vx0: object = (5.0, 15.0)
    beta0: object = 0.0
    r0: object = 0.0
    e0: object = (-0.8, 0.8)
    psi0: object = (-0.2, 0.2)
    s0: object = (0.0, 40.0)
    # simulator noise intensities (additive, per sqrt(s))
    noise_beta: float = 0.03
    noise_r: float = 0.15
    pde_use_noise: bool = False  # physics loss defaults to the noiseless PDE
    boundary_epsilon: float = 0.2
    # collocation ranges (Omega_P); also set the feature normalization
    vx_range: tuple = (3.0, 18.0)
    beta_range: tuple = (-0.3, 0.3)
    r_range: tuple = (-1.2, 1.2)
    psi_range: tuple = (-0.5, 0.5)
    s_range: tuple = (0.0, 80.0)
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    actions: ActionGrid = field(default_factory=ActionGrid)


def drift_scenario_config() -> VehicleEnvConfig:
    """High-speed corner entry: survivable only by shedding speed in a drift."""
    return VehicleEnvConfig(
        e_max=8.0,
        corner_radius=40.0,
        corner_angle_deg=90.0,
        entry_length=20.0,
        exit_length=150.0,
        vx0=30.0,
        beta0=(np.deg2rad(-25.0), np.deg2rad(-20.0)),
        r0=(np.deg2rad(50.0), np.deg2rad(70.0)),
        e0=(-2.0, 2.0),
        psi0=(-0.15, 0.15),
        s0=(2.0, 12.0),
        noise_beta=0.02,
        noise_r=0.10,
        boundary_epsilon=1.0,
        vx_range=(5.0, 38.0),
        beta_range=(-0.7, 0.35),
        r_range=(-0.8, 2.0),
        psi_range=(-0.7, 0.7),
        s_range=(0.0, 110.0),
    )


class VehicleEnv(SafetyEnv):
    """Single-track vehicle on a curved lane; safe while |e| < E_max."""

    STATE_NAMES = ("v_x", "beta", "r", "e", "psi", "s")

    def __init__(self, cfg: VehicleEnvConfig, name: str = "cornering"):
        self.cfg = cfg
        self.name = name
        self.params = cfg.vehicle
        self.geom = make_corner_track(
            cfg.entry_length, cfg.corner_radius, cfg.corner_angle_deg,
            cfg.exit_length, cfg.e_max, left=cfg.left_turn,
        )
        self.action_grid = cfg.actions
        u_values = self.action_grid.values
        noise_cols = []
        if cfg.noise_beta > 0:
            noise_cols.append((1, cfg.noise_beta))
        if cfg.noise_r > 0:
            noise_cols.append((2, cfg.noise_r))
        w = len(noise_cols)
        G = np.zeros((6, w))
        for j, (row, scale) in enumerate(noise_cols):
            G[row, j] = scale
        self.system = SdeSystem(
            drift=lambda x, u: self._drift_batch(x[None, :], u[None, :])[0],
            diffusion=lambda x, u: G,
            state_dim=6,
            noise_dim=w,
            action_set=list(u_values),
            drift_batch=self._drift_batch,
            diffusion_batch=lambda X, U: np.broadcast_to(G, (X.shape[0], 6, w)),
        )
        self._noise_matrix = G
        self.safe_set = SafeSet(
            signed_distance=lambda x: cfg.e_max - abs(float(np.asarray(x)[3])),
            epsilon=cfg.boundary_epsilon,
            signed_distance_batch=lambda X: cfg.e_max - np.abs(X[:, 3]),
        )
        self.dt = cfg.dt
        self.n_substeps = cfg.n_substeps
        self.tau_max = cfg.tau_max
        self.tau_init = cfg.tau_init
        self.action_names = ("delta", "d")
        self.feature_names = ("v_x", "beta", "r", "e", "psi") + tuple(
            f"t{i}{ax}" for i in range(1, 6) for ax in ("x", "y")
        )
        self._build_normalization()

    def _build_normalization(self):
        cfg = self.cfg
        la = np.asarray(cfg.lookaheads)
        # reference points live roughly in [0, max lookahead] x (lateral span)
        tx_off, tx_scale = la.max() / 2.0, max(la.max() / 2.0, 1.0)
        ty_scale = max(2.0 * cfg.e_max, 0.25 * la.max())
        offs = [cfg.tau_max / 2.0,
                0.5 * (cfg.vx_range[0] + cfg.vx_range[1]), 0.0, 0.0, 0.0, 0.0]
        scales = [max(cfg.tau_max / 2.0, 1e-9),
                  0.5 * (cfg.vx_range[1] - cfg.vx_range[0]),
                  max(abs(cfg.beta_range[0]), abs(cfg.beta_range[1])),
                  max(abs(cfg.r_range[0]), abs(cfg.r_range[1])),
                  cfg.e_max,
                  max(abs(cfg.psi_range[0]), abs(cfg.psi_range[1]))]
        for _ in range(5):
            offs.extend([tx_off, 0.0])
            scales.extend([tx_scale, ty_scale])
        self.input_offset = np.array(offs)
        self.input_scale = np.array(scales)

    # --- dynamics -------------------------------------------------------------
    def _forces_batch(self, X, U):
        p = self.params
        vx = np.maximum(X[:, 0], p.v_min)  # singularity floor
        beta, r = X[:, 1], X[:, 2]
        delta = U[:, 0] * p.max_steer
        fxr = U[:, 1] * p.throttle_force_max
        alpha_f, alpha_r = slip_angles(p, vx, beta, r, delta)
        fyf = fiala_lateral_force(p.front_tire, alpha_f, p.front_normal_load)
        fyr = fiala_lateral_force(p.rear_tire, alpha_r, p.rear_normal_load)
        return vx, delta, fxr, fyf, fyr

    def _drift_batch(self, X, U):
        """Time derivative of [v_x, beta, r, e, psi, s] for normalized actions U."""
        p = self.params
        vx, delta, fxr, fyf, fyr = self._forces_batch(X, U)
        beta, r, e, psi, s = X[:, 1], X[:, 2], X[:, 3], X[:, 4], X[:, 5]
        vy = vx * np.tan(beta)
        vx_dot = (fxr - fyf * np.sin(delta)) / p.mass + r * vx * beta
        beta_dot = (fyr + fyf * np.cos(delta)) / (p.mass * vx) - r
        r_dot = (p.lf * fyf * np.cos(delta) - p.lr * fyr) / p.inertia_z
        rho = self.geom.curvature(s)
        psi_dot = r - vx * rho
        e_dot = vy * np.cos(psi) + vx * np.sin(psi)
        # arc-length progression; denominator guarded away from the curvature center
        s_dot = (vx * np.cos(psi) - vy * np.sin(psi)) / np.maximum(1.0 - rho * e, 0.2)
        return np.stack([vx_dot, beta_dot, r_dot, e_dot, psi_dot, s_dot], axis=1)

    # --- featurization ----------------------------------------------------------
    def features_batch(self, H, X):
        refs = self.geom.reference_points(
            X[:, 5], X[:, 3], X[:, 4], self.cfg.lookaheads
        ).reshape(X.shape[0], -1)
        return np.column_stack([H, X[:, :5], refs])

    def vehicle_state(self, x: np.ndarray) -> VehicleState:
        refs = self.geom.reference_points(x[5], x[3], x[4], self.cfg.lookaheads)
        return VehicleState(x[0], x[1], x[2], x[3], x[4], refs)

    # --- sampling regions ---------------------------------------------------------
    def _spawn_draw(self, rng, spec, n):
        if np.isscalar(spec):
            return np.full(n, float(spec))
        lo, hi = spec
        return rng.uniform(lo, hi, size=n)

    def sample_x_init(self, rng, n):
        cfg = self.cfg
        cols = [self._spawn_draw(rng, spec, n)
                for spec in (cfg.vx0, cfg.beta0, cfg.r0, cfg.e0, cfg.psi0, cfg.s0)]
        return np.stack(cols, axis=1)

    def _collocation_bounds(self):
        cfg = self.cfg
        lo = np.array([cfg.vx_range[0], cfg.beta_range[0], cfg.r_range[0],
                       -cfg.e_max, cfg.psi_range[0], cfg.s_range[0]])
        hi = np.array([cfg.vx_range[1], cfg.beta_range[1], cfg.r_range[1],
                       cfg.e_max, cfg.psi_range[1], cfg.s_range[1]])
        return lo, hi

    def sample_x_collocation(self, rng, n):
        lo, hi = self._collocation_bounds()
        X = _uniform_box(rng, lo, hi, n)
        X[:, 3] = np.clip(X[:, 3], -self.cfg.e_max * (1 - 1e-12), self.cfg.e_max * (1 - 1e-12))
        return X

    def sample_x_boundary(self, rng, n):
        X = self.sample_x_collocation(rng, n)
        X[:, 3] = self.cfg.e_max * np.sign(rng.uniform(-1.0, 1.0, size=n))
        return X

    # --- PDE terms -------------------------------------------------------------------
    def pde_drift_batch(self, X, a_idx):
        U = self.action_grid.values[a_idx]
        f6 = self._drift_batch(X, U)
        out = np.zeros((X.shape[0], self.input_dim))
        out[:, 0] = -1.0
        out[:, 1:6] = f6[:, :5]  # reference-point convection terms stay zero
        return out

    def pde_diffusion_batch(self, X, a_idx):
        if not self.cfg.pde_use_noise or self.system.noise_dim == 0:
            return None
        w = self.system.noise_dim
        cols = np.zeros((X.shape[0], self.input_dim, w))
        cols[:, 1:7, :] = self._noise_matrix[None, :, :]
        return cols[:, : self.input_dim, :]


def make_cornering_env(cfg: VehicleEnvConfig | None = None) -> VehicleEnv:
    """Lane keeping through a moderate corner; E_max = 1 m by default."""
    return VehicleEnv(cfg or VehicleEnvConfig(), name="cornering")


def make_drift_env(cfg: VehicleEnvConfig | None = None) -> VehicleEnv:
    """High-speed corner with drift-entry initial conditions; E_max = 8 m."""
    return VehicleEnv(cfg or drift_scenario_config(), name="drift")


# --- rollouts -------------------------------------------------------------------

@dataclass
class Trajectory:
    """One closed-loop episode: states, actions, rewards at control steps."""

    times: np.ndarray
    states: np.ndarray  # (k+1, n) simulator states
    actions: np.ndarray  # (k,) action indices
    rewards: np.ndarray  # (k,)
    survived: bool  # reward 1 collected (binary case)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


def rollout(env: SafetyEnv, policy, s0: AugmentedState, rng) -> Trajectory:
    """Run a greedy/stochastic policy until the episode terminates.

    policy: callable (h, x) -> action index.
    """
    times, states, actions, rewards = [0.0], [np.asarray(s0.x, dtype=float)], [], []
    s = s0
    t = 0.0
    terminal = s.is_absorbing(env.safe_set)
    while not terminal:
        a = int(policy(s.h, s.x))
        s, r, terminal = env.step(s, a, rng)
        t += env.dt
        times.append(t)
        states.append(s.x)
        actions.append(a)
        rewards.append(r)
    return Trajectory(
        np.array(times), np.array(states), np.array(actions), np.array(rewards),
        survived=bool(np.sum(rewards) > 0.0),
    )


def trajectory_csv_header(env: SafetyEnv) -> list[str]:
    """Stable column order: time, simulator state, action components, reward."""
    if isinstance(env, VehicleEnv):
        return ["t", "v_x", "beta", "r", "e", "psi", "delta", "d", "reward"]
    return ["t"] + [f"x{i}" for i in range(env.system.state_dim)] + list(env.action_names) + ["reward"]


def trajectory_rows(env: SafetyEnv, traj: Trajectory):
    """Rows matching trajectory_csv_header; one row per executed control step."""
    rows = []
    acts = np.asarray(env.system.action_set)
    for k in range(len(traj.actions)):
        state = traj.states[k]
        u = acts[traj.actions[k]]
        if isinstance(env, VehicleEnv):
            rows.append([traj.times[k], *state[:5], u[0], u[1], traj.rewards[k]])
        else:
            rows.append([traj.times[k], *state, *u, traj.rewards[k]])
    return rows
