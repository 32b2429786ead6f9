"""Closed-loop experiments: scenarios, episode runner, metrics, comparisons.

The simulator integrates the ground-truth model with the scheduled friction;
the controller sees only vehicle states and its own learned model. Episode
metrics are pure functions of the logged rows (everything is rounded to the
log's 9-significant-digit precision before metrics are computed, so
recomputing from the exported CSV reproduces the report bit-exactly).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .dynamics import (
    TRAJECTORY_CSV_HEADER,
    FrictionSchedule,
    NumericalDivergence,
    PacejkaCoeffs,
    VehicleParams,
    VehicleState,
    lateral_forces,
    rk4_step,
)
from .smppi import SmppiConfig, SmppiController
from .tracks import Track, double_lane_change_track, nearest_reference, oval_track

DIVERGENCE_LATERAL_M = 5.0

EPISODE_CSV_HEADER = (
    TRAJECTORY_CSV_HEADER
    + ",deviation,head_err,v_ref,latent_fy_f,latent_fy_r,peak_f,peak_r,saturation,ess"
)

TASK_KINDS = ("lap_tracking", "double_lane_change")


@dataclass
class Scenario:
    """Track, friction schedule and initial condition for one closed loop."""

    track: Track
    schedule: FrictionSchedule
    initial: VehicleState
    n_steps: int
    dt_sim: float = 0.02
    task: str = "lap_tracking"
    name: str = ""

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task!r}")
        dev, _, _ = nearest_reference(self.track, (self.initial.x, self.initial.y))
        if abs(dev) >= 2.0:
            raise ValueError(f"initial state is {dev:.2f} m off the track (limit 2 m)")


def oval_scenario(
    mu_drop: float = 0.5,
    n_steps: int = 2200,
    v_straight: float = 10.0,
    v_turn: float = 8.0,
    radius: float = 15.0,
    straight: float = 60.0,
) -> Scenario:
    """Closed oval lap whose second half has reduced friction."""
    track = oval_track(straight=straight, radius=radius,
                       v_straight=v_straight, v_turn=v_turn)
    half = 0.5 * track.arclength
    schedule = FrictionSchedule((0.0, half), (1.0, mu_drop), "arclength")
    initial = VehicleState(x=2.0, y=0.0, psi=0.0, vx=v_straight * 0.8)
    return Scenario(track, schedule, initial, n_steps,
                    task="lap_tracking", name=f"oval_drop_{mu_drop:g}")


def lane_change_scenario(mu: float = 0.5, v_entry: float = 9.0, n_steps: int = 900) -> Scenario:
    """ISO-3888-style double lane change on uniformly low friction."""
    track = double_lane_change_track(v_entry=v_entry)
    initial = VehicleState(x=1.0, y=0.0, psi=0.0, vx=v_entry)
    return Scenario(track, FrictionSchedule.constant(mu), initial, n_steps,
                    task="double_lane_change", name=f"dlc_mu_{mu:g}")


@dataclass
class EpisodeLog:
    """Per-sim-step record of the closed loop, log-precision rounded."""

    columns: list
    rows: np.ndarray  # (N, len(columns))

    def __len__(self):
        return self.rows.shape[0]

    def col(self, name: str) -> np.ndarray:
        return self.rows[:, self.columns.index(name)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EpisodeLog":
        lines = text.strip().split("\n")
        columns = lines[0].split(",")
        rows = (np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
                if len(lines) > 1 else np.empty((0, len(columns))))
        return cls(columns, rows)


@dataclass
class EpisodeMetrics:
    lateral_rms: float = 0.0
    lateral_max: float = 0.0
    speed_rms: float = 0.0
    saturation_max: float = 0.0
    time_above_rho: float = 0.0
    diverged: bool = False
    latent_force_mae: float = 0.0
    n_steps: int = 0

    def as_dict(self) -> dict:
        return {
            "lateral_rms": self.lateral_rms,
            "lateral_max": self.lateral_max,
            "speed_rms": self.speed_rms,
            "saturation_max": self.saturation_max,
            "time_above_rho": self.time_above_rho,
            "diverged": self.diverged,
            "latent_force_mae": self.latent_force_mae,
            "n_steps": self.n_steps,
        }


def _round_sig9(arr):
    """Round to the 9-significant-digit precision the CSV log carries."""
    out = np.asarray(arr, float).copy()
    flat = out.ravel()
    for i, v in enumerate(flat):
        flat[i] = float(f"{v:.9g}")
    return out


def metrics_from_log(log: EpisodeLog, rho: float, dt_sim: float,
                     diverged: bool = False) -> EpisodeMetrics:
    """Metrics as a pure function of the (rounded) episode log."""
    if len(log) == 0:
        return EpisodeMetrics(diverged=diverged)
    dev = log.col("deviation")
    sat = log.col("saturation")
    fy_err = np.abs(log.col("latent_fy_f") - log.col("fy_f"))
    speed_err = log.col("vx") - log.col("v_ref")
    return EpisodeMetrics(
        lateral_rms=float(np.sqrt(np.mean(dev**2))),
        lateral_max=float(np.max(np.abs(dev))),
        speed_rms=float(np.sqrt(np.mean(speed_err**2))),
        saturation_max=float(np.max(sat)),
        time_above_rho=float(np.sum(sat > rho) * dt_sim),
        diverged=diverged,
        latent_force_mae=float(np.mean(fy_err)),
        n_steps=len(log),
    )


def run_episode(scenario: Scenario, controller, params: VehicleParams = None,
                coeffs: PacejkaCoeffs = None, ctrl_every: int = 2):
    """Closed loop: simulator with scheduled friction vs. the controller.

    ``params``/``coeffs`` are the ground-truth plant; the controller never
    touches them or the friction schedule. It is asked for a command every
    ``ctrl_every`` sim steps, the command is held in between, and it observes
    every executed step at the simulator rate. Episodes end early (flagged
    diverged) when the lateral deviation exceeds 5 m or the simulator detects
    numerical divergence.

    Returns (EpisodeLog, EpisodeMetrics).
    """
    params = params if params is not None else VehicleParams()
    coeffs = coeffs if coeffs is not None else PacejkaCoeffs.default(params)
    base = scenario.schedule

    state = scenario.initial.as_array()
    arclength = 0.0
    base_arr = coeffs.as_array()
    rows = []
    diverged = False
    command = np.zeros(2)
    diag = {}

    for i in range(scenario.n_steps):
        t = i * scenario.dt_sim
        if i % ctrl_every == 0:
            cmd, diag = controller.step(state.copy())
            command = cmd.as_array()

        mu = base.mu_at(t, arclength)
        scaled = base_arr.copy()
        scaled[2] *= mu
        scaled[6] *= mu
        tire = np.array(lateral_forces(state, command[0], scaled, params))
        dev, head_err, v_ref = nearest_reference(
            scenario.track, state[:2], float(state[2])
        )
        rows.append(np.concatenate([
            [t], state, command, tire, [mu],
            [dev, head_err, v_ref,
             diag.get("latent_fy_f", 0.0), diag.get("latent_fy_r", 0.0),
             diag.get("peak_f", np.nan), diag.get("peak_r", np.nan),
             diag.get("saturation", 0.0), diag.get("ess", np.nan)],
        ]))

        if abs(dev) > DIVERGENCE_LATERAL_M:
            diverged = True
            break

        nxt = rk4_step(state, command, scaled, params, scenario.dt_sim)
        if not np.all(np.isfinite(nxt)) or np.any(np.abs(nxt) > 1e6):
            diverged = True
            break
        controller.observe(state, command)
        arclength += float(np.hypot(*(nxt[:2] - state[:2])))
        state = nxt

    columns = EPISODE_CSV_HEADER.split(",")
    log = EpisodeLog(columns, _round_sig9(np.array(rows)) if rows else np.empty((0, len(columns))))
    rho = getattr(controller, "config", SmppiConfig()).rho
    return log, metrics_from_log(log, rho, scenario.dt_sim, diverged)


CONTROLLER_ARMS = {
    "smppi-risk": {"mode": "smppi", "use_risk": True},
    "smppi": {"mode": "smppi", "use_risk": False},
    "mppi": {"mode": "mppi", "use_risk": False},
    "mppi-risk": {"mode": "mppi", "use_risk": True},
}


def run_arm(arm: str, scenario: Scenario, model, config: SmppiConfig, seed: int,
            params: VehicleParams = None, coeffs: PacejkaCoeffs = None):
    """One paired-episode cell: same seed stream regardless of arm."""
    controller = SmppiController(model, scenario.track, config, seed=seed,
                                 **CONTROLLER_ARMS[arm])
    return run_episode(scenario, controller, params, coeffs)


def compare(arms, scenarios, model, config: SmppiConfig, seeds,
            params: VehicleParams = None, coeffs: PacejkaCoeffs = None) -> dict:
    """Paired closed-loop comparison over identical (scenario, seed) cells.

    Every arm consumes the same per-cell seed, so differences are attributable
    to the arm alone. Returns a report dict with one row per
    (arm, scenario, seed) plus per-arm aggregates.
    """
    seeds = list(seeds)
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    rows = []
    for scenario in scenarios:
        for seed in seeds:
            for arm in arms:
                _, metrics = run_arm(arm, scenario, model, config, seed, params, coeffs)
                rows.append({"arm": arm, "scenario": scenario.name, "seed": seed,
                             **metrics.as_dict()})
    aggregates = {}
    metric_keys = [k for k in rows[0] if k not in ("arm", "scenario", "seed", "diverged", "n_steps")]
    for arm in arms:
        sub = [r for r in rows if r["arm"] == arm]
        agg = {"divergence_rate": float(np.mean([r["diverged"] for r in sub]))}
        for k in metric_keys:
            vals = np.array([r[k] for r in sub])
            agg[f"{k}_mean"] = float(vals.mean())
            agg[f"{k}_std"] = float(vals.std())
        aggregates[arm] = agg
    return {"rows": rows, "aggregates": aggregates,
            "n_cells": len(scenarios) * len(seeds), "arms": list(arms)}


def report_to_csv(report: dict) -> str:
    """Flat CSV of the per-episode rows for plotting."""
    rows = report["rows"]
    keys = list(rows[0].keys())
    buf = io.StringIO()
    buf.write(",".join(keys) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(r[k]) for k in keys) + "\n")
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"
