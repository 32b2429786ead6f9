"""Smooth MPPI with a proprioceptive tire-saturation risk cost.

The controller samples perturbations on the *derivative* of the action
sequence and integrates them, so every candidate plan is smooth by
construction; plain action-space MPPI is available behind the same interface
as the ablation baseline. Rollouts use a learned dynamics model only — the
controller never sees the simulator's friction schedule. When the model
exposes latent tire forces and peak-force estimates (the hybrid model does),
a hinge-squared cost penalizes predicted forces that approach the predicted
peak, and velocity-dependent scheduling shrinks steering exploration and
grows the risk weight as speed rises.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dynamics import ControlInput, VehicleParams, lateral_forces, state_derivative
from .tracks import Track, nearest_reference

SENTINEL_COST = 1e9

COST_TERMS = ("track", "heading", "speed", "rate", "jerk", "risk")


class AllInfeasible(RuntimeError):
    """Every sampled rollout diverged."""


@dataclass(frozen=True)
class SmppiConfig:
    n_samples: int = 256          # K
    horizon: int = 30             # T
    temperature: float = 20.0     # lambda
    sigma_steer: float = 1.2      # derivative-space noise std, rad/s
    sigma_accel: float = 8.0      # derivative-space noise std, m/s^3
    dt_ctrl: float = 0.04
    steer_rate_limit: float = 1.2   # rad/s
    accel_rate_limit: float = 20.0  # m/s^2 per s
    w_track: float = 6.0
    w_heading: float = 20.0
    w_speed: float = 1.0
    w_rate: float = 1.0
    w_jerk: float = 1.0
    w_risk: float = 0.0
    rho: float = 0.85             # risk threshold ratio of predicted peak
    v0: float = 5.0               # velocity-scheduling knee, m/s
    sigma_floor: float = 0.2      # lower clamp on the steering-noise scale
    v_ref_cap: float = np.inf     # optional speed-reference cap hook
    sampling: str = "derivative"  # "derivative" = SMPPI, "action" = plain MPPI

    def __post_init__(self):
        if self.n_samples < 2 or self.horizon < 2:
            raise ValueError("need n_samples >= 2 and horizon >= 2")
        if self.temperature <= 0 or self.sigma_steer <= 0 or self.sigma_accel <= 0:
            raise ValueError("temperature and noise stds must be positive")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must be in (0, 1)")
        if self.sampling not in ("derivative", "action"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")


def velocity_schedule(vx: float, config: SmppiConfig):
    """Speed-dependent controller parameters.

    Steering exploration shrinks as clamp(v0 / max(vx, v0), floor, 1); the
    risk weight grows as (vx / v0)^2. Both laws are continuous in vx. The
    returned v_ref cap is a config hook, constant by default.
    """
    vx = max(float(vx), 0.0)
    scale = float(np.clip(config.v0 / max(vx, config.v0), config.sigma_floor, 1.0))
    sigma = np.array([config.sigma_steer * scale, config.sigma_accel])
    w_risk = config.w_risk * (vx / config.v0) ** 2
    return sigma, w_risk, config.v_ref_cap


def sample_perturbations(config: SmppiConfig, rng, sigma=None) -> np.ndarray:
    """(K, T, 2) i.i.d. zero-mean Gaussian noise; sample 0 is forced to zero.

    The zero sample guarantees the unperturbed nominal plan is always among
    the evaluated candidates.
    """
    sigma = np.array([config.sigma_steer, config.sigma_accel]) if sigma is None else sigma
    noise = rng.normal(size=(config.n_samples, config.horizon, 2)) * sigma
    noise[0] = 0.0
    return noise


def integrate_actions(U_prev, dU, config: SmppiConfig, params: VehicleParams) -> np.ndarray:
    """Candidate plans from perturbed action derivatives.

    Integrates the sampled derivatives onto the previous plan, then clips to
    actuator boxes and per-step rate limits.
    """
    cand = U_prev[None] + np.cumsum(dU, axis=1) * config.dt_ctrl
    return _clip_plans(cand, config, params)


def perturb_actions(U_prev, eps, config: SmppiConfig, params: VehicleParams) -> np.ndarray:
    """Plain-MPPI candidates: noise added directly in action space."""
    return _clip_plans(U_prev[None] + eps, config, params)


def matched_action_sigma(config: SmppiConfig, sigma=None) -> np.ndarray:
    """Action-space noise std with the same RMS magnitude that derivative
    sampling induces over the horizon (random-walk variance averaged over t)."""
    sigma = np.array([config.sigma_steer, config.sigma_accel]) if sigma is None else sigma
    return sigma * config.dt_ctrl * np.sqrt((config.horizon + 1) / 2.0)


def _clip_plans(cand, config: SmppiConfig, params: VehicleParams) -> np.ndarray:
    lo = np.array([-params.max_steer, -params.max_accel])
    hi = -lo
    rate = np.array([config.steer_rate_limit, config.accel_rate_limit]) * config.dt_ctrl
    out = np.clip(cand, lo, hi)
    for t in range(1, out.shape[1]):
        out[:, t] = np.clip(out[:, t], out[:, t - 1] - rate, out[:, t - 1] + rate)
        out[:, t] = np.clip(out[:, t], lo, hi)
    return out


def mppi_weights(costs, temperature: float) -> np.ndarray:
    """Information-theoretic weights: w_k proportional to exp(-(S_k - min S) / lambda)."""
    costs = np.asarray(costs, float)
    feasible = costs < SENTINEL_COST
    if not np.any(feasible):
        raise AllInfeasible("every rollout hit the infeasibility sentinel")
    shifted = costs - costs[feasible].min()
    w = np.where(feasible, np.exp(-shifted / temperature), 0.0)
    return w / w.sum()


@dataclass
class RolloutResult:
    """Batched rollout evaluation: predicted states, latents and costs."""

    states: np.ndarray        # (K, T+1, 6)
    tires: np.ndarray | None  # (K, T, 4) latent slip/force readouts
    costs: np.ndarray         # (K,)
    term_means: dict          # mean per cost term over feasible rollouts


def rollout_cost(model, state0, hist0, plans, track: Track, config: SmppiConfig,
                 *, w_risk=None, v_ref_cap=None, u_last=None) -> RolloutResult:
    """Roll the learned model over candidate plans and accumulate stage costs.

    S_k sums tracking (lateral deviation, heading, speed), action smoothness
    (first and second differences) and the latent-force risk hinge. Rollouts
    that leave the finite range get the sentinel cost.
    """
    K, T, _ = plans.shape
    w_risk = config.w_risk if w_risk is None else w_risk
    v_ref_cap = config.v_ref_cap if v_ref_cap is None else v_ref_cap
    if w_risk > 0 and model.predict(hist0, state0, plans[0, 0])[1] is None:
        raise ValueError("risk cost requires a model with latent tire forces")

    states = np.empty((K, T + 1, 6))
    states[:, 0] = state0
    hist = np.broadcast_to(hist0, (K,) + hist0.shape).copy()
    tires = None if w_risk == 0 else np.zeros((K, T, 4))
    terms = np.zeros((K, len(COST_TERMS)))
    alive = np.ones(K, dtype=bool)

    s = states[:, 0].copy()
    for t in range(T):
        u = plans[:, t]
        deriv, tire, peaks = model.predict(hist, s, u)
        nxt = s.copy()
        nxt[:, 0] += config.dt_ctrl * (s[:, 3] * np.cos(s[:, 2]) - s[:, 4] * np.sin(s[:, 2]))
        nxt[:, 1] += config.dt_ctrl * (s[:, 3] * np.sin(s[:, 2]) + s[:, 4] * np.cos(s[:, 2]))
        nxt[:, 2] += config.dt_ctrl * s[:, 5]
        nxt[:, 3:6] += config.dt_ctrl * deriv
        nxt[:, 3] = np.maximum(nxt[:, 3], 0.0)

        bad = ~np.all(np.isfinite(nxt), axis=1) | (np.abs(nxt[:, 3:]).max(axis=1) > 1e3)
        alive &= ~bad
        nxt[bad] = s[bad]

        dev, head_err, v_ref = nearest_reference(track, nxt[:, :2], nxt[:, 2])
        v_ref = np.minimum(v_ref, v_ref_cap)
        terms[:, 0] += config.w_track * dev**2
        terms[:, 1] += config.w_heading * head_err**2
        terms[:, 2] += config.w_speed * (nxt[:, 3] - v_ref) ** 2
        if w_risk > 0:
            margin_f = np.maximum(0.0, np.abs(tire[:, 2]) - config.rho * peaks[:, 0])
            margin_r = np.maximum(0.0, np.abs(tire[:, 3]) - config.rho * peaks[:, 1])
            terms[:, 5] += w_risk * (margin_f**2 + margin_r**2)
            tires[:, t] = tire

        hist = np.concatenate(
            [hist[:, 1:], np.concatenate([s[:, 3:6], u], axis=1)[:, None, :]], axis=1
        )
        s = nxt
        states[:, t + 1] = s

    du = np.diff(plans, axis=1)
    if u_last is not None:
        du = np.concatenate([(plans[:, :1] - np.asarray(u_last)[None, None]), du], axis=1)
    terms[:, 3] = config.w_rate * np.sum(du**2, axis=(1, 2))
    terms[:, 4] = config.w_jerk * np.sum(np.diff(du, axis=1) ** 2, axis=(1, 2))

    costs = np.where(alive, terms.sum(axis=1), SENTINEL_COST)
    term_means = {
        name: float(terms[alive, i].mean()) if alive.any() else float("nan")
        for i, name in enumerate(COST_TERMS)
    }
    return RolloutResult(states, tires, costs, term_means)


def smppi_update(rollout_fn, U_prev, config: SmppiConfig, rng,
                 *, sigma=None, params: VehicleParams = None):
    """One optimization pass: sample, roll out, weight, average.

    Returns the updated (unshifted) plan and diagnostics. ``rollout_fn`` maps
    candidate plans (K, T, 2) to a RolloutResult or a plain cost array, so
    toy problems and the driving cost share this code path.
    """
    params = params if params is not None else VehicleParams()
    if config.sampling == "derivative":
        noise = sample_perturbations(config, rng, sigma)
        cands = integrate_actions(U_prev, noise, config, params)
    else:
        eps = sample_perturbations(config, rng, matched_action_sigma(config, sigma))
        cands = perturb_actions(U_prev, eps, config, params)

    result = rollout_fn(cands)
    costs = result.costs if isinstance(result, RolloutResult) else np.asarray(result, float)
    weights = mppi_weights(costs, config.temperature)
    U_new = np.einsum("k,ktc->tc", weights, cands)
    diag = {
        "ess": float(1.0 / np.sum(weights**2)),
        "min_cost": float(costs.min()),
        "mean_cost": float(costs[costs < SENTINEL_COST].mean()),
        "n_infeasible": int(np.sum(costs >= SENTINEL_COST)),
    }
    if isinstance(result, RolloutResult):
        diag["cost_terms"] = result.term_means
    return U_new, diag


def smppi_step(rollout_fn, U_prev, config: SmppiConfig, rng,
               *, sigma=None, params: VehicleParams = None):
    """Receding-horizon step: update, extract the first command, shift."""
    U_new, diag = smppi_update(rollout_fn, U_prev, config, rng, sigma=sigma, params=params)
    command = ControlInput(float(U_new[0, 0]), float(U_new[0, 1]))
    U_next = np.vstack([U_new[1:], U_new[-1:]])
    return command, U_next, diag


class HeldCoeffModel:
    """Rollout predictor with tire coefficients frozen over the horizon.

    The hybrid model estimates coefficients once per control step from the
    live history; friction varies slowly compared to the horizon, so the
    rollouts run the bare physics with the held estimate.
    """

    def __init__(self, params: VehicleParams, coeffs, history_len: int, dt: float):
        self.params = params
        self.coeffs = np.asarray(coeffs, float)
        self.history_len = history_len
        self.dt = dt

    def predict(self, hist, state, u):
        state = np.asarray(state, float)
        u = np.asarray(u, float)
        deriv = state_derivative(state, u, self.coeffs, self.params)[..., 3:6]
        tire = np.stack(lateral_forces(state, u[..., 0], self.coeffs, self.params), axis=-1)
        peaks = np.broadcast_to(self.coeffs[[2, 6]], state.shape[:-1] + (2,))
        return deriv, tire, peaks


class SmppiController:
    """Receding-horizon wrapper holding the plan and the observation history.

    The controller sees only vehicle states and its own model: friction and
    the simulator internals are invisible to it. ``mode`` selects derivative
    sampling ("smppi") or plain action sampling ("mppi"); ``use_risk``
    toggles the latent-force saturation cost.
    """

    def __init__(self, model, track: Track, config: SmppiConfig, seed: int,
                 mode: str = "smppi", use_risk: bool = True):
        sampling = {"smppi": "derivative", "mppi": "action"}[mode]
        if not use_risk:
            config = replace(config, w_risk=0.0, sampling=sampling)
        else:
            config = replace(config, sampling=sampling)
        if config.w_risk > 0:
            probe = model.predict(np.zeros((model.history_len, 5)),
                                  np.array([0, 0, 0, 1.0, 0, 0]), np.zeros(2))
            if probe[1] is None:
                raise ValueError("risk-aware control needs a model with tire-force latents")
        self.model = model
        self.track = track
        self.config = config
        self.params = model.params
        self.seed = seed
        self.plan = np.zeros((config.horizon, 2))
        self.history = None
        self.last_command = np.zeros(2)
        self.step_index = 0

    def reset(self):
        self.plan = np.zeros((self.config.horizon, 2))
        self.history = None
        self.last_command = np.zeros(2)
        self.step_index = 0

    def observe(self, state, control):
        """Push one executed step (called at the model's native step rate)."""
        state = np.asarray(state, float)
        control = np.asarray(control, float)
        row = np.concatenate([state[3:6], control])
        if self.history is None:
            self.history = np.tile(row, (self.model.history_len, 1))
        else:
            self.history = np.vstack([self.history[1:], row])

    def step(self, state):
        """Plan from the current state; returns (ControlInput, diagnostics)."""
        state = np.asarray(state, float)
        if self.history is None:
            row = np.concatenate([state[3:6], self.last_command])
            self.history = np.tile(row, (self.model.history_len, 1))

        sigma, w_risk, v_ref_cap = velocity_schedule(state[3], self.config)
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, self.step_index)))

        if hasattr(self.model, "estimate_coeffs"):
            coeffs = self.model.estimate_coeffs(self.history, state, self.last_command)
            rollout_model = HeldCoeffModel(self.params, coeffs,
                                           self.model.history_len, self.model.dt)
        else:
            rollout_model = self.model

        def rollout_fn(cands):
            return rollout_cost(
                rollout_model, state, self.history, cands, self.track, self.config,
                w_risk=w_risk, v_ref_cap=v_ref_cap, u_last=self.last_command,
            )

        command, self.plan, diag = smppi_step(
            rollout_fn, self.plan, self.config, rng, sigma=sigma, params=self.params
        )
        diag["step"] = self.step_index
        diag["sigma_steer"] = float(sigma[0])
        diag["w_risk"] = float(w_risk)

        deriv, tire, peaks = rollout_model.predict(self.history, state, command.as_array())
        if tire is not None:
            diag["latent_fy_f"] = float(tire[2])
            diag["latent_fy_r"] = float(tire[3])
            diag["peak_f"] = float(peaks[0])
            diag["peak_r"] = float(peaks[1])
            diag["saturation"] = float(max(abs(tire[2]) / peaks[0], abs(tire[3]) / peaks[1]))

        self.last_command = command.as_array()
        self.step_index += 1
        return command, diag
