"""Dynamic bicycle model with Pacejka lateral tires.

Ground-truth vehicle physics: slip kinematics, the magic-formula tire law,
the planar force/moment balance, RK4 integration and friction scheduling.
The same functions double as the differentiable physics layer of the hybrid
model, so everything here is written ufunc-style: scalars and numpy arrays
of matching shape both work, and analytic coefficient gradients are provided
next to the forward formulas.

Longitudinal dynamics are deliberately simple: the commanded acceleration
maps directly onto the longitudinal balance (no longitudinal slip, no load
transfer). Friction enters only by scaling the peak-force coefficient D.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields, replace

import numpy as np

# Slip angles use max(vx, V_EPS) in the denominator; the bicycle model has
# no meaningful slip at standstill.
V_EPS = 0.5

# Any state component beyond this magnitude marks an unstable configuration.
DIVERGENCE_LIMIT = 1e6

GRAVITY = 9.81

TRAJECTORY_CSV_HEADER = "t,x,y,psi,vx,vy,omega,steer,accel,alpha_f,alpha_r,fy_f,fy_r,mu"


class NumericalDivergence(RuntimeError):
    """A simulated state component exceeded DIVERGENCE_LIMIT."""


@dataclass(frozen=True)
class VehicleParams:
    """Bicycle-model vehicle constants.

    m: mass (kg); Iz: yaw inertia (kg m^2); lf/lr: CoG to front/rear axle
    distance (m); max_steer: steering limit (rad); max_accel: longitudinal
    command limit (m/s^2).
    """

    m: float = 1500.0
    Iz: float = 2500.0
    lf: float = 1.2
    lr: float = 1.4
    max_steer: float = 0.5
    max_accel: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"VehicleParams.{f.name} must be strictly positive")

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr

    @property
    def front_load(self) -> float:
        """Static front-axle vertical load (N)."""
        return self.m * GRAVITY * self.lr / self.wheelbase

    @property
    def rear_load(self) -> float:
        """Static rear-axle vertical load (N)."""
        return self.m * GRAVITY * self.lf / self.wheelbase


@dataclass(frozen=True)
class PacejkaCoeffs:
    """Per-axle magic-formula parameters (B stiffness, C shape, D peak N, E curvature)."""

    b_f: float
    c_f: float
    d_f: float
    e_f: float
    b_r: float
    c_r: float
    d_r: float
    e_r: float

    def __post_init__(self):
        for axle in ("f", "r"):
            b, c, d, e = (getattr(self, f"{k}_{axle}") for k in "bcde")
            if not b > 0:
                raise ValueError(f"B_{axle} must be > 0, got {b}")
            if not 1.0 < c < 3.0:
                raise ValueError(f"C_{axle} must be in (1, 3), got {c}")
            if not d > 0:
                raise ValueError(f"D_{axle} must be > 0, got {d}")
            if not e <= 1.0:
                raise ValueError(f"E_{axle} must be <= 1, got {e}")

    @classmethod
    def default(cls, params: VehicleParams) -> "PacejkaCoeffs":
        """Representative passenger-car coefficients; peak force is 0.9x the static axle load."""
        return cls(
            b_f=10.0, c_f=1.9, d_f=0.9 * params.front_load, e_f=0.97,
            b_r=10.0, c_r=1.9, d_r=0.9 * params.rear_load, e_r=0.97,
        )

    def as_array(self) -> np.ndarray:
        """Coefficient vector in (B_f, C_f, D_f, E_f, B_r, C_r, D_r, E_r) order."""
        return np.array([self.b_f, self.c_f, self.d_f, self.e_f,
                         self.b_r, self.c_r, self.d_r, self.e_r])

    @classmethod
    def from_array(cls, arr) -> "PacejkaCoeffs":
        arr = np.asarray(arr, dtype=float)
        if arr.shape != (8,):
            raise ValueError(f"expected 8 coefficients, got shape {arr.shape}")
        return cls(*arr.tolist())


@dataclass
class VehicleState:
    """Planar pose, body-frame velocities and yaw rate."""

    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.vx, self.vy, self.omega])

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        x, y, psi, vx, vy, omega = np.asarray(arr, dtype=float)
        return cls(x, y, psi, vx, vy, omega)


@dataclass(frozen=True)
class ControlInput:
    """Front steering angle (rad) and commanded longitudinal acceleration (m/s^2)."""

    steer: float = 0.0
    accel: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.accel])

    def clipped(self, params: VehicleParams) -> "ControlInput":
        return ControlInput(
            steer=float(np.clip(self.steer, -params.max_steer, params.max_steer)),
            accel=float(np.clip(self.accel, -params.max_accel, params.max_accel)),
        )


@dataclass
class TireState:
    """Slip angles (rad) and lateral tire forces (N), front and rear."""

    alpha_f: float = 0.0
    alpha_r: float = 0.0
    fy_f: float = 0.0
    fy_r: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_f, self.alpha_r, self.fy_f, self.fy_r])


@dataclass(frozen=True)
class FrictionSchedule:
    """Piecewise-constant friction scale over time or traveled arc length.

    ``mu[i]`` applies from ``breakpoints[i]`` (inclusive) until the next
    breakpoint; ``breakpoints[0]`` must be 0 so the schedule is total.
    ``basis`` selects whether breakpoints are seconds ("time") or meters of
    traveled path ("arclength").
    """

    breakpoints: tuple = (0.0,)
    mu: tuple = (1.0,)
    basis: str = "time"

    def __post_init__(self):
        if self.basis not in ("time", "arclength"):
            raise ValueError(f"unknown schedule basis {self.basis!r}")
        if len(self.breakpoints) != len(self.mu) or not self.breakpoints:
            raise ValueError("breakpoints and mu must be equal-length and nonempty")
        if self.breakpoints[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        bp = np.asarray(self.breakpoints)
        if np.any(np.diff(bp) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if any(m <= 0 or m > 1.5 for m in self.mu):
            raise ValueError("mu values must lie in (0, 1.5]")

    @classmethod
    def constant(cls, mu: float) -> "FrictionSchedule":
        return cls((0.0,), (float(mu),), "time")

    def mu_at(self, t: float, arclength: float = 0.0) -> float:
        key = t if self.basis == "time" else arclength
        idx = int(np.searchsorted(self.breakpoints, key, side="right")) - 1
        return self.mu[max(idx, 0)]


def _state_array(state) -> np.ndarray:
    if isinstance(state, VehicleState):
        return state.as_array()
    return np.asarray(state, dtype=float)


def _control_array(u) -> np.ndarray:
    if isinstance(u, ControlInput):
        return u.as_array()
    return np.asarray(u, dtype=float)


def _coeff_columns(coeffs):
    """Split PacejkaCoeffs or an (..., 8) array into 8 broadcastable columns."""
    if isinstance(coeffs, PacejkaCoeffs):
        return coeffs.as_array()
    arr = np.asarray(coeffs, dtype=float)
    return np.moveaxis(arr, -1, 0)


def slip_angles(state, steer, params: VehicleParams):
    """Front/rear slip angles from bicycle kinematics.

    ``state`` may be a VehicleState or an (..., 6) array; ``steer`` broadcasts.
    vx is floored at V_EPS to keep the expression total near standstill.
    """
    s = _state_array(state)
    vx = np.maximum(s[..., 3], V_EPS)
    vy = s[..., 4]
    omega = s[..., 5]
    alpha_f = steer - np.arctan2(vy + params.lf * omega, vx)
    alpha_r = -np.arctan2(vy - params.lr * omega, vx)
    return alpha_f, alpha_r


def magic_formula(alpha, b, c, d, e):
    """Pacejka lateral force: D sin(C arctan(B a - E (B a - arctan(B a))))."""
    t = b * alpha
    g = t - e * (t - np.arctan(t))
    return d * np.sin(c * np.arctan(g))


def magic_formula_coeff_grads(alpha, b, c, d, e):
    """Partials of magic_formula w.r.t. (B, C, D, E), broadcast like the inputs.

    These make the physics layer differentiable in its coefficients; the
    hybrid model backpropagates through them.
    """
    t = b * alpha
    at = np.arctan(t)
    g = t - e * (t - at)
    inner = np.arctan(g)
    s = np.sin(c * inner)
    dcos = d * np.cos(c * inner)
    dfy_dg = dcos * c / (1.0 + g * g)
    grad_b = dfy_dg * alpha * (1.0 - e + e / (1.0 + t * t))
    grad_c = dcos * inner
    grad_d = s
    grad_e = dfy_dg * (at - t)
    return grad_b, grad_c, grad_d, grad_e


def lateral_forces(state, steer, coeffs, params: VehicleParams):
    """Slip angles plus front/rear lateral forces for the given coefficients."""
    alpha_f, alpha_r = slip_angles(state, steer, params)
    b_f, c_f, d_f, e_f, b_r, c_r, d_r, e_r = _coeff_columns(coeffs)
    fy_f = magic_formula(alpha_f, b_f, c_f, d_f, e_f)
    fy_r = magic_formula(alpha_r, b_r, c_r, d_r, e_r)
    return alpha_f, alpha_r, fy_f, fy_r


def state_derivative(state, u, coeffs, params: VehicleParams) -> np.ndarray:
    """Time derivative of the full state under the dynamic bicycle model.

    Returns an array shaped like the state input:
    (x', y', psi', vx', vy', omega').
    """
    s = _state_array(state)
    c = _control_array(u)
    steer = c[..., 0]
    accel = c[..., 1]
    psi, vx, vy, omega = s[..., 2], s[..., 3], s[..., 4], s[..., 5]

    _, _, fy_f, fy_r = lateral_forces(s, steer, coeffs, params)
    cos_d, sin_d = np.cos(steer), np.sin(steer)

    out = np.empty_like(s)
    out[..., 0] = vx * np.cos(psi) - vy * np.sin(psi)
    out[..., 1] = vx * np.sin(psi) + vy * np.cos(psi)
    out[..., 2] = omega
    out[..., 3] = accel - fy_f * sin_d / params.m + vy * omega
    out[..., 4] = (fy_f * cos_d + fy_r) / params.m - vx * omega
    out[..., 5] = (params.lf * fy_f * cos_d - params.lr * fy_r) / params.Iz
    return out


def deriv_coeff_jacobian(state, u, coeffs, params: VehicleParams) -> np.ndarray:
    """Jacobian of (vx', vy', omega') w.r.t. the 8 Pacejka coefficients.

    Shape (..., 3, 8); coefficient order matches PacejkaCoeffs.as_array().
    Slip angles do not depend on the coefficients, so the chain is just the
    force partials routed through the force balance.
    """
    s = _state_array(state)
    c = _control_array(u)
    steer = c[..., 0]
    alpha_f, alpha_r = slip_angles(s, steer, params)
    b_f, c_f, d_f, e_f, b_r, c_r, d_r, e_r = _coeff_columns(coeffs)

    gf = np.stack(magic_formula_coeff_grads(alpha_f, b_f, c_f, d_f, e_f), axis=-1)
    gr = np.stack(magic_formula_coeff_grads(alpha_r, b_r, c_r, d_r, e_r), axis=-1)

    cos_d = np.cos(steer)[..., None]
    sin_d = np.sin(steer)[..., None]
    jac = np.zeros(s.shape[:-1] + (3, 8))
    jac[..., 0, :4] = -sin_d / params.m * gf
    jac[..., 1, :4] = cos_d / params.m * gf
    jac[..., 1, 4:] = gr / params.m
    jac[..., 2, :4] = params.lf * cos_d / params.Iz * gf
    jac[..., 2, 4:] = -params.lr / params.Iz * gr
    return jac


def rk4_step(state, u, coeffs, params: VehicleParams, dt: float) -> np.ndarray:
    """Classical 4th-order Runge-Kutta step; vx is clamped to >= 0 afterwards."""
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1], got {dt}")
    s = _state_array(state)
    k1 = state_derivative(s, u, coeffs, params)
    k2 = state_derivative(s + 0.5 * dt * k1, u, coeffs, params)
    k3 = state_derivative(s + 0.5 * dt * k2, u, coeffs, params)
    k4 = state_derivative(s + dt * k3, u, coeffs, params)
    out = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[..., 3] = np.maximum(out[..., 3], 0.0)
    return out


def apply_friction(coeffs: PacejkaCoeffs, mu: float) -> PacejkaCoeffs:
    """Scale both peak forces by the friction factor; B, C, E are untouched."""
    if mu <= 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    return replace(coeffs, d_f=mu * coeffs.d_f, d_r=mu * coeffs.d_r)


@dataclass
class Trajectory:
    """Logged ground-truth rollout: one entry per state (len(controls) + 1 total).

    ``controls`` holds the input applied while leaving each state; the final
    row repeats the last input so every array has a row per state. Tire states
    are evaluated at each state with that row's steer and friction.
    """

    t: np.ndarray          # (N+1,)
    states: np.ndarray     # (N+1, 6)
    controls: np.ndarray   # (N+1, 2)
    tires: np.ndarray      # (N+1, 4) alpha_f, alpha_r, fy_f, fy_r
    mu: np.ndarray         # (N+1,)
    dt: float

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int):
        return (
            VehicleState.from_array(self.states[i]),
            TireState(*self.tires[i]),
            float(self.mu[i]),
        )

    def to_csv(self) -> str:
        """CSV per the trajectory export format, 9 significant digits."""
        buf = io.StringIO()
        buf.write(TRAJECTORY_CSV_HEADER + "\n")
        cols = np.column_stack([self.t, self.states, self.controls, self.tires, self.mu])
        for row in cols:
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return buf.getvalue()


def simulate(
    initial,
    controls,
    schedule: FrictionSchedule,
    params: VehicleParams,
    coeffs: PacejkaCoeffs,
    dt: float,
) -> Trajectory:
    """Roll the ground-truth model over a control sequence.

    Friction is looked up from the schedule at every step (by time or by
    traveled arc length) and applied to the peak-force coefficients. Raises
    NumericalDivergence as soon as any state component passes 1e6.
    """
    ctrl = np.array([_control_array(u) for u in controls], dtype=float)
    if ctrl.ndim != 2 or ctrl.shape[0] == 0 or ctrl.shape[1] != 2:
        raise ValueError("controls must be a nonempty sequence of (steer, accel)")
    n = ctrl.shape[0]
    base = coeffs.as_array()

    states = np.empty((n + 1, 6))
    tires = np.empty((n + 1, 4))
    mus = np.empty(n + 1)
    states[0] = _state_array(initial)

    arclength = 0.0
    for i in range(n):
        mu = schedule.mu_at(i * dt, arclength)
        scaled = base.copy()
        scaled[2] *= mu
        scaled[6] *= mu
        tires[i] = np.array(
            lateral_forces(states[i], ctrl[i, 0], scaled, params)
        )
        mus[i] = mu
        states[i + 1] = rk4_step(states[i], ctrl[i], scaled, params, dt)
        if not np.all(np.isfinite(states[i + 1])) or np.any(
            np.abs(states[i + 1]) > DIVERGENCE_LIMIT
        ):
            raise NumericalDivergence(f"state diverged at step {i + 1}")
        arclength += float(np.hypot(*(states[i + 1, :2] - states[i, :2])))

    mu = schedule.mu_at(n * dt, arclength)
    scaled = base.copy()
    scaled[2] *= mu
    scaled[6] *= mu
    tires[n] = np.array(lateral_forces(states[n], ctrl[n - 1, 0], scaled, params))
    mus[n] = mu

    return Trajectory(
        t=np.arange(n + 1) * dt,
        states=states,
        controls=np.vstack([ctrl, ctrl[-1:]]),
        tires=tires,
        mu=mus,
        dt=dt,
    )
