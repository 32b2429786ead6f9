"""Dataset generation, training loop and the in/out-of-distribution protocol.

Training data comes from the ground-truth simulator driven by a filtered-noise
(Ornstein-Uhlenbeck) excitation policy with weak speed regulation, so the
slip-angle range covers the nonlinear tire regime. Targets are the exact
state derivatives at each sample step. Supervision never touches tire forces
or coefficients: the hybrid model's latents stay unsupervised.

Splits are by whole trajectories and normalization statistics come from the
training split only; evaluation on friction values outside the training range
is the out-of-distribution protocol.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    PacejkaCoeffs,
    VehicleParams,
    deriv_coeff_jacobian,
    rk4_step,
    state_derivative,
)
from .models import (
    BaselineModel,
    DeepPacejkaModel,
    NormalizationStats,
    extract_latent_forces,
)


class DivergedTraining(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class ExcitationConfig:
    """Ornstein-Uhlenbeck steering/acceleration noise with speed regulation."""

    steer_theta: float = 1.5
    steer_sigma: float = 0.25
    accel_theta: float = 1.0
    accel_sigma: float = 1.5
    speed_gain: float = 1.0
    v_min: float = 6.0
    v_max: float = 12.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 25
    val_fraction: float = 0.2
    hidden: tuple = (64, 64)
    seed: int = 0
    # train-time augmentation: Gaussian noise on the history-window features,
    # in units of each channel's std. Simulator windows are noiselessly
    # self-consistent, which no measured data would be; without this both
    # models overfit a finite-differencing shortcut that the history makes
    # available.
    history_noise: float = 0.05
    # hybrid model only: weight of the self-supervised window-consistency
    # term. The predicted coefficients must also explain the velocity
    # transitions observed inside the history window through the physics
    # layer, which forces the coefficient readout to track the window's
    # force evidence instead of memorizing the training friction level.
    consistency_weight: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.patience <= 0:
            raise ValueError("epochs must be >= 0, batch_size and patience positive")
        if not 0.0 < self.learning_rate < 1.0:
            raise ValueError("learning_rate must be in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.history_noise < 0 or self.consistency_weight < 0:
            raise ValueError("history_noise and consistency_weight must be >= 0")


DATASET_CSV_COLUMNS = (
    ["traj_id", "mu"]
    + ["x", "y", "psi", "vx", "vy", "omega"]
    + ["steer", "accel"]
    + ["dvx", "dvy", "domega"]
    + ["alpha_f", "alpha_r", "fy_f", "fy_r"]
)


@dataclass
class Dataset:
    """Windowed samples sliced from simulator trajectories."""

    hist: np.ndarray      # (N, H, 5) past steps, oldest first
    states: np.ndarray    # (N, 6) state at the prediction step
    controls: np.ndarray  # (N, 2) input at the prediction step
    targets: np.ndarray   # (N, 3) exact (vx', vy', omega')
    tires: np.ndarray     # (N, 4) ground-truth slip/force log
    mu: np.ndarray        # (N,)
    traj_id: np.ndarray   # (N,) trajectory provenance
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def history_len(self) -> int:
        return self.hist.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.hist[idx], self.states[idx], self.controls[idx],
                       self.targets[idx], self.tires[idx], self.mu[idx],
                       self.traj_id[idx], self.meta)

    def to_csv(self) -> str:
        h = self.history_len
        header = DATASET_CSV_COLUMNS + [
            f"h{j}_{c}" for j in range(h) for c in ("vx", "vy", "omega", "steer", "accel")
        ]
        cols = np.column_stack([
            self.traj_id, self.mu, self.states, self.controls,
            self.targets, self.tires, self.hist.reshape(len(self), -1),
        ])
        buf = io.StringIO()
        buf.write(",".join(header) + "\n")
        for row in cols:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def save(self, csv_path):
        """Write the sample CSV plus a sidecar JSON with provenance metadata."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.to_csv())
        csv_path.with_suffix(".json").write_text(json.dumps(self.meta, indent=1) + "\n")

    @classmethod
    def load(cls, csv_path) -> "Dataset":
        csv_path = Path(csv_path)
        with open(csv_path) as f:
            header = f.readline().strip().split(",")
            data = np.loadtxt(f, delimiter=",", ndmin=2)
        n_fixed = len(DATASET_CSV_COLUMNS)
        h = (len(header) - n_fixed) // 5
        meta_path = csv_path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(
            hist=data[:, n_fixed:].reshape(-1, h, 5),
            states=data[:, 2:8],
            controls=data[:, 8:10],
            targets=data[:, 10:13],
            tires=data[:, 13:17],
            mu=data[:, 1],
            traj_id=data[:, 0].astype(int),
            meta=meta,
        )


def concat_datasets(parts) -> "Dataset":
    parts = list(parts)
    return Dataset(
        *[np.concatenate([getattr(p, name) for p in parts])
          for name in ("hist", "states", "controls", "targets", "tires", "mu", "traj_id")],
        meta=parts[0].meta,
    )


def _excite_trajectory(mu, params, coeffs, n_steps, dt, rng, exc: ExcitationConfig):
    """Closed-loop OU excitation rollout; returns per-step logs and targets."""
    from .dynamics import FrictionSchedule, simulate

    v_target = rng.uniform(exc.v_min, exc.v_max)
    state = np.array([0.0, 0.0, 0.0, v_target, 0.0, 0.0])
    scaled = coeffs.as_array()
    scaled[2] *= mu
    scaled[6] *= mu

    controls = np.empty((n_steps, 2))
    steer_ou, accel_ou = 0.0, 0.0
    sq = np.sqrt(dt)
    noise = rng.normal(size=(n_steps, 2))
    for i in range(n_steps):
        steer_ou += -exc.steer_theta * steer_ou * dt + exc.steer_sigma * sq * noise[i, 0]
        accel_ou += -exc.accel_theta * accel_ou * dt + exc.accel_sigma * sq * noise[i, 1]
        steer = np.clip(steer_ou, -params.max_steer, params.max_steer)
        accel = np.clip(accel_ou + exc.speed_gain * (v_target - state[3]),
                        -params.max_accel, params.max_accel)
        controls[i] = (steer, accel)
        state = rk4_step(state, controls[i], scaled, params, dt)

    traj = simulate(np.array([0.0, 0.0, 0.0, v_target, 0.0, 0.0]), controls,
                    FrictionSchedule.constant(mu), params, coeffs, dt)
    targets = state_derivative(traj.states[:-1], controls, scaled, params)[:, 3:6]
    return traj, targets


def window_trajectory(traj, targets, history_len, traj_id):
    """Slice one trajectory into windowed samples.

    A sample at step t carries the H strictly preceding steps as history, so a
    trajectory of n steps yields n - H samples.
    """
    n = len(traj) - 1
    h = history_len
    rows = np.column_stack([traj.states[:n, 3:6], traj.controls[:n]])
    idx = np.arange(h, n)
    hist = np.stack([rows[t - h:t] for t in idx])
    return Dataset(
        hist=hist,
        states=traj.states[idx],
        controls=traj.controls[idx],
        targets=targets[idx],
        tires=traj.tires[idx],
        mu=traj.mu[idx],
        traj_id=np.full(len(idx), traj_id, dtype=int),
    )


def generate_dataset(
    mus,
    params: VehicleParams,
    coeffs: PacejkaCoeffs,
    *,
    trajs_per_mu: int = 5,
    n_steps: int = 1000,
    history_len: int = 8,
    dt: float = 0.02,
    seed: int = 0,
    excitation: ExcitationConfig = ExcitationConfig(),
) -> Dataset:
    """Excitation rollouts at each friction value, sliced into windows."""
    parts = []
    root = np.random.SeedSequence(seed)
    traj_id = 0
    for mu in mus:
        for _ in range(trajs_per_mu):
            rng = np.random.default_rng(root.spawn(1)[0])
            traj, targets = _excite_trajectory(mu, params, coeffs, n_steps, dt, rng, excitation)
            parts.append(window_trajectory(traj, targets, history_len, traj_id))
            traj_id += 1
    ds = concat_datasets(parts)
    ds.meta = {
        "seed": seed,
        "mus": list(map(float, mus)),
        "trajs_per_mu": trajs_per_mu,
        "n_steps": n_steps,
        "history_len": history_len,
        "dt": dt,
        "n_samples": len(ds),
        "vehicle": {"m": params.m, "Iz": params.Iz, "lf": params.lf, "lr": params.lr,
                    "max_steer": params.max_steer, "max_accel": params.max_accel},
        "true_coeffs": coeffs.as_array().tolist(),
        "excitation": asdict(excitation),
    }
    return ds


# ---------------------------------------------------------------------------
# Optimization


class Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _window_consistency(model, coeffs, hist, dt, inv_std, params):
    """Self-supervised coefficient check against the window's own transitions.

    The clean history rows provide (velocities, inputs) at H consecutive
    steps; finite differences of the logged velocities are the observed
    derivatives there. The predicted coefficients must reproduce them through
    the physics layer. Returns (loss, d loss / d coeffs). Uses no quantity
    outside the network's own input window.
    """
    v = hist[:, :, :3]
    fd = (v[:, 1:] - v[:, :-1]) / dt                      # (B, H-1, 3)
    v_mid = 0.5 * (v[:, 1:] + v[:, :-1])                  # midpoint, matching fd to O(dt^2)
    state_w = np.concatenate([np.zeros_like(v_mid), v_mid], axis=-1)
    u_w = hist[:, :-1, 3:5]
    coeffs_b = coeffs[:, None, :]
    pred = state_derivative(state_w, u_w, coeffs_b, params)[..., 3:6]
    resid = (pred - fd) * inv_std
    loss = float(np.mean(resid * resid))
    jac = deriv_coeff_jacobian(state_w, u_w, coeffs_b, params)  # (B, H-1, 3, 8)
    grad_coeffs = (2.0 / resid.size) * np.einsum("bhic,bhi->bc", jac, resid * inv_std)
    return loss, grad_coeffs


def split_by_trajectory(dataset: Dataset, val_fraction: float, rng):
    """Whole-trajectory split: no window in one side overlaps the other."""
    ids = np.unique(dataset.traj_id)
    perm = rng.permutation(ids)
    n_val = max(1, int(round(val_fraction * len(ids))))
    if len(ids) < 2:
        raise ValueError("need at least 2 trajectories to split train/validation")
    val_ids = set(perm[:n_val].tolist())
    val_mask = np.isin(dataset.traj_id, list(val_ids))
    return dataset.subset(~val_mask), dataset.subset(val_mask)


def _normalized_mse(model, ds: Dataset, chunk=8192) -> float:
    total = 0.0
    for lo in range(0, len(ds), chunk):
        sl = slice(lo, min(lo + chunk, len(ds)))
        pred = model.forward(ds.hist[sl], ds.states[sl], ds.controls[sl])
        if hasattr(pred, "deriv"):
            pred = pred.deriv
        resid = model.stats.normalize_targets(pred) - model.stats.normalize_targets(ds.targets[sl])
        total += float(np.sum(resid * resid))
    return total / (len(ds) * 3)


def train(kind: str, dataset: Dataset, config: TrainConfig, params: VehicleParams = None):
    """Fit a model of the given kind; returns (model, history).

    The returned model carries the best-validation weights. History is a list
    of (epoch, train_loss, val_loss) rows, identical for identical seeds.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if params is None:
        params = VehicleParams(**dataset.meta["vehicle"])
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))

    train_ds, val_ds = split_by_trajectory(dataset, config.val_fraction, rng)
    current_rows = np.concatenate([train_ds.states[:, 3:6], train_ds.controls], axis=1)
    stats = NormalizationStats.fit(
        np.concatenate([train_ds.hist.reshape(-1, 5), current_rows], axis=0),
        train_ds.targets,
    )

    h = dataset.history_len
    dt = float(dataset.meta.get("dt", 0.02))
    ctor = {"dpm": DeepPacejkaModel, "baseline": BaselineModel}[kind]
    model = ctor.init(params, history_len=h, dt=dt, hidden=tuple(config.hidden), rng=rng)
    model.stats = stats

    history = []
    if config.epochs == 0:
        return model, history

    opt = Adam(model.net.param_list(), config.learning_rate,
               config.beta1, config.beta2, config.eps)
    best_val = np.inf
    best_weights = model.net.copy()
    stale = 0
    n = len(train_ds)
    inv_std = 1.0 / model.stats.target_std

    hist_noise_scale = config.history_noise * model.stats.feat_std
    use_consistency = kind == "dpm" and config.consistency_weight > 0

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        train_loss = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            hist_batch = train_ds.hist[idx]
            if config.history_noise > 0:
                hist_batch = hist_batch + rng.normal(size=hist_batch.shape) * hist_noise_scale
            out, cache = model.forward_cached(
                hist_batch, train_ds.states[idx], train_ds.controls[idx]
            )
            pred = out.deriv if kind == "dpm" else out
            resid = (pred - train_ds.targets[idx]) * inv_std
            loss = float(np.mean(resid * resid))
            if not np.isfinite(loss):
                raise DivergedTraining(f"non-finite loss at epoch {epoch}")
            grad = 2.0 * resid * inv_std / (resid.size)
            grads = model.backward(cache, grad)
            if use_consistency:
                c_loss, c_grad = _window_consistency(
                    model, out.coeffs, train_ds.hist[idx], dt, inv_std, params
                )
                loss += config.consistency_weight * c_loss
                grads.add_(model.backward_from_coeff_grad(
                    cache, config.consistency_weight * c_grad
                ))
            opt.step(model.net.param_list(), grads.param_list())
            train_loss += loss * len(idx)
        train_loss /= n

        val_loss = _normalized_mse(model, val_ds)
        if not np.isfinite(val_loss):
            raise DivergedTraining(f"non-finite validation loss at epoch {epoch}")
        history.append((epoch, train_loss, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_weights = model.net.copy()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.net = best_weights
    return model, history


def evaluate(model, dataset: Dataset, chunk=8192) -> dict:
    """Deterministic metric report on a dataset the model has not seen.

    Latent-force correlation compares the hybrid model's unsupervised force
    readout against the simulator's logged forces; it is undefined for the
    black-box baseline.
    """
    preds = []
    tire_preds = []
    coeff_preds = []
    for lo in range(0, len(dataset), chunk):
        sl = slice(lo, min(lo + chunk, len(dataset)))
        if model.kind == "dpm":
            out = model.forward_refined(dataset.hist[sl], dataset.states[sl], dataset.controls[sl])
            preds.append(out.deriv)
            tire_preds.append(extract_latent_forces(out))
            coeff_preds.append(out.coeffs)
        else:
            preds.append(model.forward(dataset.hist[sl], dataset.states[sl], dataset.controls[sl]))
    pred = np.concatenate(preds)
    resid_norm = model.stats.normalize_targets(pred) - model.stats.normalize_targets(dataset.targets)
    resid_phys = pred - dataset.targets

    metrics = {
        "n_samples": len(dataset),
        "rmse_norm": np.sqrt(np.mean(resid_norm**2, axis=0)).tolist(),
        "rmse_norm_mean": float(np.sqrt(np.mean(resid_norm**2))),
        "rmse_phys": np.sqrt(np.mean(resid_phys**2, axis=0)).tolist(),
    }
    if model.kind == "dpm":
        tire = np.concatenate(tire_preds)
        coeffs = np.concatenate(coeff_preds)
        metrics["latent_force_corr_f"] = _pearson(tire[:, 2], dataset.tires[:, 2])
        metrics["latent_force_corr_r"] = _pearson(tire[:, 3], dataset.tires[:, 3])
        metrics["latent_force_rmse_f"] = float(np.sqrt(np.mean((tire[:, 2] - dataset.tires[:, 2]) ** 2)))
        true_base = np.asarray(dataset.meta.get("true_coeffs", [np.nan] * 8))
        true = np.tile(true_base, (len(dataset), 1))
        true[:, 2] *= dataset.mu
        true[:, 6] *= dataset.mu
        metrics["coeff_recovery_rel_err"] = (
            np.mean(np.abs(coeffs - true) / np.abs(true), axis=0).tolist()
            if np.all(np.isfinite(true_base)) else None
        )
    return metrics


def _pearson(a, b) -> float:
    return float(np.corrcoef(a, b)[0, 1])
