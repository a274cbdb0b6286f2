"""3-DOF bicycle model with Fiala lateral tire forces and road-coordinate errors.

State per the single-track drift literature: longitudinal speed v_x, sideslip
beta (= atan(v_y/v_x)), yaw rate r, plus lateral error e and heading error psi
relative to a lane centerline of piecewise-constant curvature.  The governing
equations:

    dv_x/dt  = (F_xr - F_yf sin(delta)) / M + r v_x beta
    dbeta/dt = (F_yr + F_yf cos(delta)) / (M v_x) - r
    dr/dt    = (L_f F_yf cos(delta) - L_r F_yr) / I_z
    dpsi/dt  = r - v_x rho(s)
    de/dt    = v_y cos(psi) + v_x sin(psi),      v_y = v_x tan(beta)

Sign conventions: positive curvature rho turns left; positive e is left of the
centerline; positive psi is heading left of the road tangent.

Tire forces use the standard Fiala brush model (linear stiffness -C_alpha near
zero slip, saturation at mu F_z) with static per-axle normal loads.  Slip
angles follow the usual single-track kinematics alpha_f = atan((v_y + L_f r)/v_x)
- delta, alpha_r = atan((v_y - L_r r)/v_x).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SingularitySpeedError(ValueError):
    """v_x below the configured floor; the model is singular at v_x = 0."""


@dataclass
class TireParams:
    cornering_stiffness: float  # C_alpha, N/rad
    friction: float  # mu

    def __post_init__(self):
        if self.cornering_stiffness <= 0 or self.friction <= 0:
            raise ValueError("tire parameters must be positive")


@dataclass
class VehicleParams:
    mass: float = 1500.0  # kg
    lf: float = 1.2  # m, CG to front axle
    lr: float = 1.4  # m, CG to rear axle
    inertia_z: float = 2500.0  # kg m^2
    front_tire: TireParams = field(default_factory=lambda: TireParams(1.2e5, 0.95))
    rear_tire: TireParams = field(default_factory=lambda: TireParams(1.0e5, 0.90))
    max_steer: float = np.deg2rad(35.0)  # physical angle at |steer command| = 1
    throttle_force_max: float = 6000.0  # N at throttle = 1 (affine map from 0)
    v_min: float = 0.5  # m/s floor guarding tan(beta), 1/v_x
    gravity: float = 9.81

    def __post_init__(self):
        if min(self.mass, self.lf, self.lr, self.inertia_z, self.max_steer,
               self.throttle_force_max, self.v_min) <= 0:
            raise ValueError("vehicle parameters must be positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    @property
    def front_normal_load(self) -> float:
        return self.mass * self.gravity * self.lr / self.wheelbase

    @property
    def rear_normal_load(self) -> float:
        return self.mass * self.gravity * self.lf / self.wheelbase


@dataclass
class VehicleState:
    """Learner-visible vehicle state; 15 features as laid out by features()."""

    vx: float
    beta: float
    r: float
    e: float
    psi: float
    refs: np.ndarray  # (5, 2) lookahead points on the centerline, vehicle frame

    def features(self) -> np.ndarray:
        """[v_x, beta, r, e, psi, t1x, t1y, ..., t5x, t5y] — stable layout."""
        return np.concatenate(
            [[self.vx, self.beta, self.r, self.e, self.psi], np.asarray(self.refs).ravel()]
        )

    @classmethod
    def from_features(cls, f: np.ndarray) -> "VehicleState":
        f = np.asarray(f, dtype=float)
        if f.shape != (15,):
            raise ValueError("vehicle feature vector must have 15 entries")
        return cls(f[0], f[1], f[2], f[3], f[4], f[5:].reshape(5, 2).copy())


def fiala_lateral_force(tire: TireParams, slip_angle, normal_load):
    """Lateral force of the brush model; accepts scalars or arrays.

    Below the saturation slip angle atan(3 mu F_z / C_alpha):
        F = -C t (1 - |C t|/(3 mu F_z) + (C t)^2 / (27 mu^2 F_z^2)),  t = tan(alpha)
    beyond it the force is clamped to -mu F_z sign(alpha).  Odd in the slip
    angle, magnitude bounded by mu F_z, slope -C_alpha at zero slip.
    """
    if np.any(np.asarray(normal_load) <= 0):
        raise ValueError("normal_load must be positive")
    c = tire.cornering_stiffness
    lim = tire.friction * normal_load
    t = np.tan(slip_angle)
    ct = c * t
    inside = np.abs(ct) <= 3.0 * lim
    f_brush = -ct * (1.0 - np.abs(ct) / (3.0 * lim) + ct**2 / (27.0 * lim**2))
    f = np.where(inside, f_brush, -lim * np.sign(t))
    return float(f) if np.isscalar(slip_angle) or np.ndim(slip_angle) == 0 else f


def slip_angles(params: VehicleParams, vx, beta, r, delta):
    """Front/rear slip angles from single-track kinematics (v_y = v_x tan beta)."""
    vy = vx * np.tan(beta)
    alpha_f = np.arctan2(vy + params.lf * r, vx) - delta
    alpha_r = np.arctan2(vy - params.lr * r, vx)
    return alpha_f, alpha_r


def bicycle_derivatives(params: VehicleParams, state: VehicleState, delta: float, forces):
    """(dv_x/dt, dbeta/dt, dr/dt) for given steering angle and axle forces.

    forces = (F_xr, F_yf, F_yr) in newtons.  Pure evaluation of the three
    governing equations; raises below the v_x floor where the model is
    singular.
    """
    fxr, fyf, fyr = forces
    vx, beta, r = state.vx, state.beta, state.r
    if vx < params.v_min:
        raise SingularitySpeedError(f"v_x={vx} below floor {params.v_min}")
    vx_dot = (fxr - fyf * np.sin(delta)) / params.mass + r * vx * beta
    beta_dot = (fyr + fyf * np.cos(delta)) / (params.mass * vx) - r
    r_dot = (params.lf * fyf * np.cos(delta) - params.lr * fyr) / params.inertia_z
    return np.array([vx_dot, beta_dot, r_dot])


def road_error_derivatives(state: VehicleState, rho: float):
    """(dpsi/dt, de/dt) for road curvature rho."""
    vy = state.vx * np.tan(state.beta)
    psi_dot = state.r - state.vx * rho
    e_dot = vy * np.cos(state.psi) + state.vx * np.sin(state.psi)
    return psi_dot, e_dot


# --- road geometry -----------------------------------------------------------

@dataclass
class RoadGeometry:
    """Centerline of piecewise-constant-curvature segments.

    segments: list of (arc length, curvature).  Beyond the declared extent the
    road continues straight along the final heading (and straight backwards
    behind s = 0); curvature there is 0.
    """

    segments: list
    lane_half_width: float  # E_max, m

    def __post_init__(self):
        if self.lane_half_width <= 0:
            raise ValueError("lane_half_width must be positive")
        segs = [(float(L), float(k)) for L, k in self.segments]
        if any(L <= 0 for L, _ in segs):
            raise ValueError("segment lengths must be positive")
        self.segments = segs
        # cumulative arc length and pose at each segment start
        self._s0 = np.zeros(len(segs) + 1)
        poses = [np.array([0.0, 0.0, 0.0])]  # x, y, heading
        for i, (L, k) in enumerate(segs):
            self._s0[i + 1] = self._s0[i] + L
            x, y, th = poses[-1]
            if k == 0.0:
                poses.append(np.array([x + L * np.cos(th), y + L * np.sin(th), th]))
            else:
                cx, cy = x - np.sin(th) / k, y + np.cos(th) / k
                th2 = th + k * L
                poses.append(np.array([cx + np.sin(th2) / k, cy - np.cos(th2) / k, th2]))
        self._poses = np.array(poses)
        self._curv = np.array([k for _, k in segs])

    @property
    def total_length(self) -> float:
        return float(self._s0[-1])

    def _segment_index(self, s):
        return np.clip(np.searchsorted(self._s0, s, side="right") - 1, 0, len(self.segments) - 1)

    def curvature(self, s):
        """rho(s); 0 outside the declared extent."""
        s = np.asarray(s, dtype=float)
        idx = self._segment_index(s)
        out = np.where((s < 0) | (s >= self.total_length), 0.0, self._curv[idx])
        return float(out) if out.ndim == 0 else out

    def centerline_pose(self, s):
        """(x, y, heading) of the centerline point at arc length s (vectorized).

        Outside [0, total_length] the centerline continues straight along the
        boundary heading, consistently with curvature() returning 0 there.
        """
        scalar = np.ndim(s) == 0
        s = np.atleast_1d(np.asarray(s, dtype=float))
        s_in = np.clip(s, 0.0, self.total_length)
        idx = self._segment_index(np.clip(s_in, 0.0, np.nextafter(self.total_length, 0.0)))
        base = self._poses[idx]
        ds = s_in - self._s0[idx]
        k = self._curv[idx]
        x, y, th = base[:, 0], base[:, 1], base[:, 2]
        straight = np.abs(k) < 1e-12
        k_safe = np.where(straight, 1.0, k)
        th2 = th + k * ds
        xc = np.where(straight, x + ds * np.cos(th), x - np.sin(th) / k_safe + np.sin(th2) / k_safe)
        yc = np.where(straight, y + ds * np.sin(th), y + np.cos(th) / k_safe - np.cos(th2) / k_safe)
        pose = np.stack([xc, yc, np.where(straight, th, th2)], axis=1)
        # straight extrapolation beyond either end
        over = s - s_in
        pose[:, 0] += over * np.cos(pose[:, 2])
        pose[:, 1] += over * np.sin(pose[:, 2])
        return pose[0] if scalar else pose

    def reference_points(self, s, e, psi, lookaheads):
        """Centerline points at s + lookaheads, expressed in the vehicle frame.

        Vectorized over a batch when s, e, psi are arrays of shape (m,);
        returns (m, k, 2) then, else (k, 2).
        """
        s_arr = np.atleast_1d(np.asarray(s, dtype=float))
        e_arr = np.atleast_1d(np.asarray(e, dtype=float))
        psi_arr = np.atleast_1d(np.asarray(psi, dtype=float))
        m, k = s_arr.size, len(lookaheads)
        here = self.centerline_pose(s_arr).reshape(m, 3)
        targets = self.centerline_pose(
            (s_arr[:, None] + np.asarray(lookaheads)[None, :]).ravel()
        ).reshape(m, k, 3)
        th = here[:, 2]
        veh_xy = here[:, :2] + e_arr[:, None] * np.stack([-np.sin(th), np.cos(th)], axis=1)
        heading = th + psi_arr
        d = targets[:, :, :2] - veh_xy[:, None, :]
        ch, sh = np.cos(heading)[:, None], np.sin(heading)[:, None]
        local = np.stack([d[:, :, 0] * ch + d[:, :, 1] * sh,
                          -d[:, :, 0] * sh + d[:, :, 1] * ch], axis=2)
        return local[0] if np.ndim(s) == 0 else local


def make_corner_track(entry: float, radius: float, angle_deg: float, exit_len: float,
                      lane_half_width: float, left: bool = True) -> RoadGeometry:
    """Straight-arc-straight track used by the desk-scale scenarios."""
    rho = (1.0 if left else -1.0) / radius
    return RoadGeometry(
        segments=[(entry, 0.0), (np.deg2rad(angle_deg) * radius, rho), (exit_len, 0.0)],
        lane_half_width=lane_half_width,
    )
