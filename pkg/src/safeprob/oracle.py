"""Independent ground-truth engines for safety probabilities.

Three routes that never share code with the learner:

* solve_hjb_fd — explicit monotone finite differences (upwind convection,
  central diffusion, per-node max over the action set) marching the safety
  PDE in remaining horizon; valid for 1D/2D systems.  Converges to the
  continuous-time viscosity solution.
* brownian_survival_series — closed-form Dirichlet heat-kernel eigenseries
  for the uncontrolled interval benchmark.  With ``monitor_dt`` set it
  applies the Broadie–Glasserman–Kou barrier continuity correction, giving
  the survival probability under *discrete* safety monitoring — which is
  what step-based Monte-Carlo estimates.
* brownian_discrete_dp — exact dynamic programming with the Gaussian
  transition operator on a grid (optimal or fixed action), the discrete-time
  reference used to validate both the MC estimator and the correction above.

Plus evaluate_policy_mc (batched Monte-Carlo with common random numbers) and
compare_field (error statistics of a learned net against a gridded field).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import qnet
from .rng import substream
from .sde import AugmentedState, SafeSet, SdeSystem, mc_safety_probability

FIELD_FORMAT = "safeprob-field"
FIELD_VERSION = 1

# -zeta(1/2)/sqrt(2*pi): barrier shift per unit sigma*sqrt(dt) for discretely
# monitored absorption (Broadie–Glasserman–Kou continuity correction)
BGK_BETA = 0.5825971579390107


class CflViolationError(ValueError):
    """Requested time step breaks the monotone-scheme stability bound."""

    def __init__(self, dtau: float, dtau_max: float):
        super().__init__(
            f"dtau={dtau:g} violates the CFL bound; use dtau <= {dtau_max:g}"
        )
        self.suggested = dtau_max


@dataclass
class Grid:
    """Rectangular grid over the safe-set closure, >= 3 points per dimension."""

    mins: tuple
    maxs: tuple
    points: tuple

    def __post_init__(self):
        self.mins = tuple(float(v) for v in np.atleast_1d(self.mins))
        self.maxs = tuple(float(v) for v in np.atleast_1d(self.maxs))
        self.points = tuple(int(v) for v in np.atleast_1d(self.points))
        if not (len(self.mins) == len(self.maxs) == len(self.points)):
            raise ValueError("grid descriptor lengths differ")
        if any(p < 3 for p in self.points):
            raise ValueError("need at least 3 points per dimension")
        if any(hi <= lo for lo, hi in zip(self.mins, self.maxs)):
            raise ValueError("grid extent must be positive")

    @property
    def ndim(self) -> int:
        return len(self.points)

    @property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, p) for lo, hi, p in zip(self.mins, self.maxs, self.points)]

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (p - 1) for lo, hi, p in zip(self.mins, self.maxs, self.points)])

    def nodes(self) -> np.ndarray:
        """All grid nodes, shape (prod(points), ndim), row-major (first axis slowest)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class SafetyField:
    """Psi(tau, x) on a grid; values in [0, 1], tau axis ascending from 0."""

    grid: Grid
    taus: np.ndarray
    values: np.ndarray  # (n_tau, *grid.points)
    system_id: str = ""
    policy_id: str = "optimal"

    def __post_init__(self):
        self.taus = np.asarray(self.taus, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.taus.size, *self.grid.points):
            raise ValueError("field values shape does not match grid")
        self._interp = None

    def query(self, tau, x) -> np.ndarray:
        """Multilinear interpolation at (tau, x); x shape (ndim,) or (m, ndim)."""
        if self._interp is None:
            self._interp = RegularGridInterpolator(
                (self.taus, *self.grid.axes), self.values,
                method="linear", bounds_error=False, fill_value=None,
            )
        X = np.atleast_2d(np.asarray(x, dtype=float))
        pts = np.column_stack([np.full(X.shape[0], tau), X])
        out = self._interp(pts)
        return float(out[0]) if np.ndim(x) <= 1 else out

    def save(self, path) -> None:
        payload = base64.b64encode(self.values.astype("<f8").tobytes()).decode("ascii")
        doc = {
            "format": FIELD_FORMAT,
            "version": FIELD_VERSION,
            "system_id": self.system_id,
            "policy_id": self.policy_id,
            "grid": {"mins": list(self.grid.mins), "maxs": list(self.grid.maxs),
                     "points": list(self.grid.points)},
            "taus": self.taus.tolist(),
            "dtype": "float64",
            "byte_order": "little",
            "order": "row-major",
            "values_b64": payload,
        }
        Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "SafetyField":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != FIELD_FORMAT or doc.get("version") != FIELD_VERSION:
            raise ValueError("not a compatible safety-field file")
        grid = Grid(tuple(doc["grid"]["mins"]), tuple(doc["grid"]["maxs"]),
                    tuple(doc["grid"]["points"]))
        taus = np.array(doc["taus"])
        raw = base64.b64decode(doc["values_b64"])
        values = np.frombuffer(raw, dtype="<f8").reshape(taus.size, *grid.points)
        return cls(grid, taus, values.copy(), doc.get("system_id", ""), doc.get("policy_id", ""))

    def to_csv(self, path, tau: float | None = None) -> None:
        """1D fields: rows tau x columns x-nodes; 2D fields: one tau slice."""
        axes = self.grid.axes
        with open(path, "w") as f:
            if self.grid.ndim == 1:
                f.write("tau\\x," + ",".join(f"{v:.10g}" for v in axes[0]) + "\n")
                for t, row in zip(self.taus, self.values):
                    f.write(f"{t:.10g}," + ",".join(f"{v:.10g}" for v in row) + "\n")
            else:
                t = self.taus[-1] if tau is None else tau
                sl = self.query(t, self.grid.nodes()).reshape(self.grid.points)
                f.write("x0\\x1," + ",".join(f"{v:.10g}" for v in axes[1]) + "\n")
                for v0, row in zip(axes[0], sl):
                    f.write(f"{v0:.10g}," + ",".join(f"{v:.10g}" for v in row) + "\n")


# --- finite-difference HJB solver ------------------------------------------------

def _mollifier_on_grid(safe_set: SafeSet, nodes: np.ndarray, eps: float) -> np.ndarray:
    if safe_set.signed_distance_batch is not None:
        d = safe_set.signed_distance_batch(nodes)
    else:
        d = np.array([safe_set.signed_distance(x) for x in nodes])
    if eps <= 0:
        return (d > 0).astype(float)
    return np.clip(d / eps, 0.0, 1.0)


def solve_hjb_fd(
    system: SdeSystem,
    safe_set: SafeSet,
    grid: Grid,
    tau_max: float,
    dtau: float | None = None,
    eps_cells: float = 2.0,
    cfl: float = 0.5,
    store_slices: int = 201,
    system_id: str = "",
) -> SafetyField:
    """March the maximal-safety PDE  d_tau Psi = max_u [f·grad Psi + 1/2 tr(D) lap Psi].

    Explicit in remaining horizon, first-order upwind for convection, central
    second differences for diffusion, exhaustive max over the finite action
    set at every node — a monotone scheme under the CFL bound
    dtau * (sum_d |f_d|/dx_d + D_dd/dx_d^2) <= 1.  Initial slice is the
    mollifier with eps = eps_cells grid cells; nodes outside the safe set
    (boundary included) are clamped to 0 every step.

    Only diagonal diffusion is supported (no cross second derivatives).
    """
    n = grid.ndim
    if system.state_dim != n:
        raise ValueError("grid dimension must match the system state dimension")
    if n > 2:
        raise ValueError("FD solver supports at most 2 state dimensions")
    nodes = grid.nodes()
    dx = grid.spacing
    shape = grid.points

    # per-action drift and diagonal diffusion on all nodes (time-independent)
    F, D = [], []
    for u in system.action_set:
        u = np.atleast_1d(u)
        if system.drift_batch is not None:
            f = system.drift_batch(nodes, np.tile(u, (nodes.shape[0], 1)))
        else:
            f = np.array([system.drift(x, u) for x in nodes])
        if system.noise_dim > 0:
            if system.diffusion_batch is not None:
                g = system.diffusion_batch(nodes, np.tile(u, (nodes.shape[0], 1)))
            else:
                g = np.array([system.diffusion(x, u) for x in nodes])
            gg = np.einsum("mij,mkj->mik", g, g)
            off = gg - gg * np.eye(n)[None, :, :]
            if np.max(np.abs(off)) > 1e-12:
                raise ValueError("FD solver requires diagonal sigma sigma^T")
            d = np.einsum("mii->mi", gg)
        else:
            d = np.zeros((nodes.shape[0], n))
        F.append(f.reshape(*shape, n))
        D.append(d.reshape(*shape, n))

    # CFL bound over all nodes and actions
    rate = max(
        float(np.max(np.sum(np.abs(f) / dx + d / dx**2, axis=-1)))
        for f, d in zip(F, D)
    )
    dtau_max = 1.0 / max(rate, 1e-300)
    if dtau is None:
        n_steps = max(int(np.ceil(tau_max / (cfl * dtau_max))), 1)
        dtau = tau_max / n_steps
    else:
        if dtau > dtau_max * (1 + 1e-12):
            raise CflViolationError(dtau, dtau_max)
        n_steps = int(round(tau_max / dtau))
        if abs(n_steps * dtau - tau_max) > 1e-9 * max(tau_max, 1.0):
            raise ValueError("tau_max must be an integer multiple of dtau")

    eps = eps_cells * float(np.max(dx))
    inside = (_mollifier_on_grid(safe_set, nodes, 0.0) > 0).reshape(shape)
    psi = _mollifier_on_grid(safe_set, nodes, eps).reshape(shape)
    psi[~inside] = 0.0

    stride = max(1, int(np.ceil(n_steps / max(store_slices - 1, 1))))
    taus = [0.0]
    slices = [psi.copy()]
    for j in range(1, n_steps + 1):
        best = None
        for f, d in zip(F, D):
            cand = psi.copy()
            for ax in range(n):
                fwd = np.zeros_like(psi)
                bwd = np.zeros_like(psi)
                lap = np.zeros_like(psi)
                sl_lo = [slice(None)] * n
                sl_hi = [slice(None)] * n
                sl_lo[ax] = slice(None, -1)
                sl_hi[ax] = slice(1, None)
                diff = (psi[tuple(sl_hi)] - psi[tuple(sl_lo)]) / dx[ax]
                fwd[tuple(sl_lo)] = diff
                bwd[tuple(sl_hi)] = diff
                mid = [slice(None)] * n
                mid[ax] = slice(1, -1)
                lo = [slice(None)] * n
                lo[ax] = slice(None, -2)
                hi = [slice(None)] * n
                hi[ax] = slice(2, None)
                lap[tuple(mid)] = (
                    psi[tuple(hi)] - 2.0 * psi[tuple(mid)] + psi[tuple(lo)]
                ) / dx[ax] ** 2
                fa = f[..., ax]
                cand += dtau * (
                    np.maximum(fa, 0.0) * fwd + np.minimum(fa, 0.0) * bwd
                    + 0.5 * d[..., ax] * lap
                )
            best = cand if best is None else np.maximum(best, cand)
        psi = np.clip(best, 0.0, 1.0)
        psi[~inside] = 0.0
        if j % stride == 0 or j == n_steps:
            taus.append(j * dtau)
            slices.append(psi.copy())
    return SafetyField(grid, np.array(taus), np.array(slices), system_id=system_id)


# --- closed-form and operator oracles for the interval benchmark ------------------

def brownian_survival_series(
    x: float,
    tau: float,
    sigma: float,
    half_width: float = 1.0,
    n_terms: int = 512,
    monitor_dt: float | None = None,
) -> float:
    """Survival probability of Brownian motion in (-b, b), Dirichlet eigenseries.

    Psi = sum_k c_k sin(k pi (x + b) / (2 b)) exp(-sigma^2 (k pi / (2b))^2 tau / 2),
    c_k = 4/(k pi) for odd k.  ``monitor_dt`` applies the barrier continuity
    correction b -> b + BGK_BETA * sigma * sqrt(dt), turning the continuous
    value into the discretely-monitored one (error o(sqrt(dt))).
    """
    b = half_width
    if monitor_dt is not None:
        b = b + BGK_BETA * sigma * np.sqrt(monitor_dt)
    if abs(x) >= half_width:
        return 0.0
    k = np.arange(1, n_terms + 1)
    lam = 0.5 * sigma**2 * (k * np.pi / (2.0 * b)) ** 2
    coef = (2.0 / (k * np.pi)) * (1.0 - np.cos(k * np.pi))
    val = np.sum(coef * np.sin(k * np.pi * (x + b) / (2.0 * b)) * np.exp(-lam * tau))
    return float(np.clip(val, 0.0, 1.0))


def brownian_discrete_dp(
    sigma: float,
    dt: float,
    tau: float,
    half_width: float = 1.0,
    u_levels=(0.0,),
    n_nodes: int = 2001,
):
    """Exact discrete-monitoring survival by Gaussian-operator dynamic programming.

    Returns (xs, V) where V[i] is the probability of staying inside
    (-b, b) at all checks k = 0..floor(tau/dt), maximized over the action
    levels each step.  Quadrature on a trapezoid grid; the only approximation
    is the grid itself.
    """
    b = half_width
    xs = np.linspace(-b, b, n_nodes)
    dxg = xs[1] - xs[0]
    s = sigma * np.sqrt(dt)
    weights = np.full(n_nodes, dxg)
    weights[0] = weights[-1] = dxg / 2.0
    Ks = []
    for u in np.atleast_1d(u_levels):
        K = (
            np.exp(-((xs[None, :] + u * dt - xs[:, None]) ** 2) / (2.0 * s * s))
            / (np.sqrt(2.0 * np.pi) * s)
        )
        Ks.append((K * weights[:, None]).T)  # row j: from x_j, sum over destinations
    V = np.ones(n_nodes)
    V[0] = V[-1] = 0.0
    for _ in range(int(round(tau / dt))):
        V = np.max(np.stack([K @ V for K in Ks]), axis=0)
        V[0] = V[-1] = 0.0
    return xs, V


# --- policy evaluation and field comparison ----------------------------------------

def evaluate_policy_mc(
    env,
    policy,
    states: list[AugmentedState],
    n_rollouts: int,
    seed: int,
    batched_policy=None,
):
    """Per-state MC safety estimates with 95% CIs.

    Rollout noise for state i comes from substream (seed, "mc", i), so two
    policies evaluated with the same seed see identical noise — common random
    numbers for paired comparisons.
    """
    out = []
    for i, s0 in enumerate(states):
        rng = substream(seed, "mc", i)
        out.append(
            mc_safety_probability(
                env.system, env.safe_set, policy, s0, env.dt, n_rollouts, rng,
                n_substeps=env.n_substeps, batched_policy=batched_policy,
            )
        )
    return out


def greedy_policy(env, net: qnet.QNetwork):
    """(h, x) -> argmax_a Q for single states."""

    def pol(h, x):
        return int(np.argmax(qnet.forward(net, env.features_batch(np.array([h]), np.atleast_2d(x))[0])))

    return pol


def batched_greedy_policy(env, net: qnet.QNetwork):
    """(h, X (m, n)) -> action indices (m,); same decisions as greedy_policy."""

    def pol(h, X):
        S = env.features_batch(np.full(X.shape[0], h), X)
        return np.argmax(qnet.forward(net, S), axis=1)

    return pol


@dataclass
class FieldComparison:
    mae: float
    max_abs: float
    regions: dict  # region name -> (mae, count)
    table: np.ndarray  # columns: x..., learned, reference


def compare_field(
    net: qnet.QNetwork,
    field: SafetyField,
    env,
    tau: float,
    points: np.ndarray | None = None,
) -> FieldComparison:
    """max_a Q(tau, x) against the field at the same (tau, x).

    points defaults to all grid nodes; the breakdown buckets nodes by signed
    distance to the safe-set boundary (near / mid / interior thirds).
    """
    X = field.grid.nodes() if points is None else np.atleast_2d(points)
    S = env.features_batch(np.full(X.shape[0], tau), X)
    if S.shape[1] != net.spec.input_dim:
        raise ValueError("network featurization does not match the field grid")
    learned = np.max(qnet.forward(net, S), axis=1)
    truth = np.atleast_1d(field.query(tau, X))
    err = np.abs(learned - truth)
    if env.safe_set.signed_distance_batch is not None:
        dist = env.safe_set.signed_distance_batch(X)
    else:
        dist = np.array([env.safe_set.signed_distance(x) for x in X])
    dmax = float(np.max(dist)) if X.size else 1.0
    regions = {}
    bands = [("near_boundary", 0.0, 1 / 3), ("mid", 1 / 3, 2 / 3), ("interior", 2 / 3, 1.0 + 1e-9)]
    for name, lo, hi in bands:
        m = (dist >= lo * dmax) & (dist < hi * dmax)
        regions[name] = (float(np.mean(err[m])) if np.any(m) else float("nan"), int(np.sum(m)))
    table = np.column_stack([X, learned, truth])
    return FieldComparison(float(np.mean(err)), float(np.max(err)), regions, table)
