"""Neural dynamics models: black-box baseline and the hybrid Pacejka model.

Both models consume the same features (a short history window of motion and
actuation plus the current state and input) and predict the dynamic state
derivatives (vx', vy', omega'). The baseline regresses them directly. The
hybrid model instead predicts bounded Pacejka coefficients and pushes them
through the bicycle physics, which makes its internal tire forces physically
meaningful latents that can be read out with no extra training.

Gradients are hand-rolled reverse mode: an MLP backward pass chained with
the analytic coefficient Jacobian of the physics layer. Everything accepts
leading batch dimensions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    ControlInput,
    PacejkaCoeffs,
    TireState,
    VehicleParams,
    VehicleState,
    deriv_coeff_jacobian,
    lateral_forces,
    state_derivative,
)

FEATURE_CHANNELS = ("vx", "vy", "omega", "steer", "accel")
STD_FLOOR = 1e-6


class DimensionMismatch(ValueError):
    """Input vector length does not match the network's first layer."""


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Plain MLP with explicit forward/backward


@dataclass
class Mlp:
    """Feed-forward network: tanh hidden layers, identity output, and an
    optional linear input-to-output bypass.

    The bypass (zero-initialized) lets the network extrapolate linearly
    outside the training support; the tanh stack alone saturates there and
    systematically under-extrapolates.
    """

    weights: list  # per layer, shape (n_out, n_in)
    biases: list   # per layer, shape (n_out,)
    skip: np.ndarray | None = None  # (n_out_last, n_in_first) bypass

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, layer_sizes, rng, with_skip=True) -> "Mlp":
        """Glorot-uniform weights, zero biases, zero bypass."""
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            weights.append(rng.uniform(-lim, lim, size=(n_out, n_in)))
            biases.append(np.zeros(n_out))
        skip = np.zeros((layer_sizes[-1], layer_sizes[0])) if with_skip else None
        return cls(weights, biases, skip)

    def param_list(self):
        """Flat list of parameter arrays (W0, b0, W1, b1, ..., [skip])."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        if self.skip is not None:
            out.append(self.skip)
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights],
                   [b.copy() for b in self.biases],
                   None if self.skip is None else self.skip.copy())


@dataclass
class MlpGrads:
    weights: list
    biases: list
    skip: np.ndarray | None = None

    def param_list(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        if self.skip is not None:
            out.append(self.skip)
        return out

    def add_(self, other: "MlpGrads") -> "MlpGrads":
        for a, b in zip(self.param_list(), other.param_list()):
            a += b
        return self

    @classmethod
    def zeros_like(cls, net: Mlp) -> "MlpGrads":
        return cls([np.zeros_like(w) for w in net.weights],
                   [np.zeros_like(b) for b in net.biases],
                   None if net.skip is None else np.zeros_like(net.skip))


def mlp_forward(net: Mlp, x):
    """Forward pass for (..., n_in) input; returns output and backward cache."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.weights[0].shape[1]:
        raise DimensionMismatch(
            f"input has {x.shape[-1]} features, network expects {net.weights[0].shape[1]}"
        )
    acts = [x]
    pre = []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pre.append(z)
        a = z if i == last else np.tanh(z)
        acts.append(a)
    if net.skip is not None:
        a = a + x @ net.skip.T
    return a, (acts, pre)


def mlp_backward(net: Mlp, cache, grad_output):
    """Exact reverse-mode gradients; grad_output shaped like the forward output.

    Parameter gradients are summed over any leading batch dimensions with a
    fixed reduction order, so results are deterministic.
    """
    acts, pre = cache
    grad_z = np.asarray(grad_output, dtype=float)
    g_w = [None] * len(net.weights)
    g_b = [None] * len(net.biases)
    g_skip = None
    grad_x_skip = 0.0
    if net.skip is not None:
        x = acts[0]
        n_out, n_in = net.skip.shape
        g_skip = grad_z.reshape(-1, n_out).T @ x.reshape(-1, n_in)
        grad_x_skip = grad_z @ net.skip
    for i in range(len(net.weights) - 1, -1, -1):
        if i < len(net.weights) - 1:
            grad_z = grad_z * (1.0 - np.tanh(pre[i]) ** 2)
        a_prev = acts[i]
        n_out, n_in = net.weights[i].shape
        g_w[i] = grad_z.reshape(-1, n_out).T @ a_prev.reshape(-1, n_in)
        g_b[i] = grad_z.reshape(-1, n_out).sum(axis=0)
        grad_z = grad_z @ net.weights[i]
    return MlpGrads(g_w, g_b, g_skip), grad_z + grad_x_skip


# ---------------------------------------------------------------------------
# Featurization and coefficient bounding


@dataclass
class NormalizationStats:
    """Per-channel feature stats plus target stats, fitted on training data only."""

    feat_mean: np.ndarray   # (5,)
    feat_std: np.ndarray    # (5,)
    target_mean: np.ndarray  # (3,)
    target_std: np.ndarray   # (3,)

    def __post_init__(self):
        self.feat_std = np.maximum(np.asarray(self.feat_std, float), STD_FLOOR)
        self.target_std = np.maximum(np.asarray(self.target_std, float), STD_FLOOR)
        self.feat_mean = np.asarray(self.feat_mean, float)
        self.target_mean = np.asarray(self.target_mean, float)

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls(np.zeros(5), np.ones(5), np.zeros(3), np.ones(3))

    @classmethod
    def fit(cls, hist, targets) -> "NormalizationStats":
        """hist: (N, H, 5) raw windows; targets: (N, 3) physical derivatives."""
        flat = np.asarray(hist, float).reshape(-1, 5)
        return cls(
            flat.mean(axis=0), flat.std(axis=0),
            np.asarray(targets, float).mean(axis=0),
            np.asarray(targets, float).std(axis=0),
        )

    def normalize_targets(self, targets):
        return (targets - self.target_mean) / self.target_std

    def denormalize_targets(self, normed):
        return normed * self.target_std + self.target_mean


def current_step_row(state, u):
    """(vx, vy, omega, steer, accel) row(s) for the step being predicted."""
    if isinstance(state, VehicleState):
        state = state.as_array()
    if isinstance(u, ControlInput):
        u = u.as_array()
    state = np.asarray(state, float)
    u = np.asarray(u, float)
    return np.concatenate([state[..., 3:6], u], axis=-1)


def make_features(hist, state, u, stats: NormalizationStats):
    """Normalized, flattened network input: H history rows plus the current row.

    hist: (..., H, 5) windows in time-major order (oldest first).
    """
    hist = np.asarray(hist, float)
    row = current_step_row(state, u)[..., None, :]
    window = np.concatenate([hist, row], axis=-2)
    normed = (window - stats.feat_mean) / stats.feat_std
    return normed.reshape(normed.shape[:-2] + (-1,))


@dataclass(eq=False)
class CoeffBounds:
    """Open-interval bounds for the 8 predicted coefficients.

    Order matches PacejkaCoeffs.as_array(). Peak-force bounds scale with the
    static load each axle carries.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float)
        self.hi = np.asarray(self.hi, float)
        if self.lo.shape != (8,) or self.hi.shape != (8,):
            raise ValueError("bounds must have 8 entries")
        if np.any(self.lo >= self.hi):
            raise ValueError("every lower bound must be below its upper bound")

    @classmethod
    def default(cls, params: VehicleParams) -> "CoeffBounds":
        lo, hi = [], []
        for load in (params.front_load, params.rear_load):
            lo.extend([4.0, 1.2, 0.1 * load, -2.0])
            hi.extend([25.0, 2.5, 1.5 * load, 1.0])
        return cls(np.array(lo), np.array(hi))

    @property
    def peak_indices(self):
        return np.array([2, 6])


def squash_to_bounds(raw, bounds: CoeffBounds):
    """Map unconstrained network output into the bound box via a scaled sigmoid."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != 8:
        raise DimensionMismatch(f"expected 8 raw coefficients, got {raw.shape[-1]}")
    return bounds.lo + (bounds.hi - bounds.lo) * sigmoid(raw)


def squash_jacobian(raw, bounds: CoeffBounds):
    """Elementwise d(coeff)/d(raw) of squash_to_bounds."""
    s = sigmoid(raw)
    return (bounds.hi - bounds.lo) * s * (1.0 - s)


# ---------------------------------------------------------------------------
# The two models


@dataclass
class DpmOutput:
    """Hybrid-model prediction: coefficient latents, derivatives, tire readout."""

    coeffs: np.ndarray  # (..., 8)
    deriv: np.ndarray   # (..., 3) physical (vx', vy', omega')
    tire: np.ndarray    # (..., 4) alpha_f, alpha_r, fy_f, fy_r

    def tire_state(self) -> TireState:
        return TireState(*np.asarray(self.tire, float).reshape(4))

    def pacejka(self) -> PacejkaCoeffs:
        return PacejkaCoeffs.from_array(np.asarray(self.coeffs, float).reshape(8))


def extract_latent_forces(output: DpmOutput) -> np.ndarray:
    """Lateral tire forces implied by the predicted coefficients.

    Pure readout of the forward pass: the magic formula evaluated at the
    current slip angles with the predicted coefficients, no additional
    parameters and no additional training.
    """
    return output.tire


@dataclass
class DeepPacejkaModel:
    """NN -> bounded Pacejka coefficients -> differentiable bicycle physics."""

    net: Mlp
    stats: NormalizationStats
    bounds: CoeffBounds
    params: VehicleParams
    history_len: int
    dt: float

    kind = "dpm"

    @classmethod
    def init(cls, params: VehicleParams, history_len=8, dt=0.02,
             hidden=(64, 64), rng=None) -> "DeepPacejkaModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [(history_len + 1) * 5, *hidden, 8]
        return cls(Mlp.init(sizes, rng), NormalizationStats.identity(),
                   CoeffBounds.default(params), params, history_len, dt)

    def forward_cached(self, hist, state, u):
        feats = make_features(hist, state, u, self.stats)
        raw, net_cache = mlp_forward(self.net, feats)
        coeffs = squash_to_bounds(raw, self.bounds)
        state_arr = state.as_array() if isinstance(state, VehicleState) else np.asarray(state, float)
        u_arr = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, float)
        deriv = state_derivative(state_arr, u_arr, coeffs, self.params)[..., 3:6]
        tire = np.stack(lateral_forces(state_arr, u_arr[..., 0], coeffs, self.params), axis=-1)
        out = DpmOutput(coeffs, deriv, tire)
        cache = (net_cache, raw, coeffs, state_arr, u_arr)
        return out, cache

    def forward(self, hist, state, u) -> DpmOutput:
        out, _ = self.forward_cached(hist, state, u)
        return out

    def backward(self, cache, grad_deriv) -> MlpGrads:
        """Chain rule from d(loss)/d(vx', vy', omega') to network parameters."""
        net_cache, raw, coeffs, state_arr, u_arr = cache
        jac = deriv_coeff_jacobian(state_arr, u_arr, coeffs, self.params)
        grad_coeffs = np.einsum("...i,...ij->...j", np.asarray(grad_deriv, float), jac)
        return self.backward_from_coeff_grad(cache, grad_coeffs)

    def backward_from_coeff_grad(self, cache, grad_coeffs) -> MlpGrads:
        """Reverse pass entering at d(loss)/d(coefficients)."""
        net_cache, raw, _, _, _ = cache
        grad_raw = np.asarray(grad_coeffs, float) * squash_jacobian(raw, self.bounds)
        grads, _ = mlp_backward(self.net, net_cache, grad_raw)
        return grads

    def predict(self, hist, state, u, refine=True):
        """Deployment interface: derivatives plus latent tire forces and peaks.

        By default the amortized coefficient estimate is polished against the
        window's own transitions (see refine_coeffs); the trained forward
        chain itself is unchanged.
        """
        if not refine:
            out = self.forward(hist, state, u)
        else:
            out = self.forward_refined(hist, state, u)
        peaks = out.coeffs[..., self.bounds.peak_indices]
        return out.deriv, out.tire, peaks

    def estimate_coeffs(self, hist, state=None, u=None) -> np.ndarray:
        """Refined coefficient estimate (..., 8) from a history window.

        Without an explicit current state/input the last window row stands in
        for them in the network features.
        """
        hist = np.asarray(hist, float)
        if state is None:
            state = np.concatenate(
                [np.zeros(hist.shape[:-2] + (3,)), hist[..., -1, :3]], axis=-1
            )
        if u is None:
            u = hist[..., -1, 3:5]
        feats = make_features(hist, state, u, self.stats)
        raw, _ = mlp_forward(self.net, feats)
        return refine_coeffs(self, hist, raw)

    def forward_refined(self, hist, state, u) -> DpmOutput:
        """Forward pass with window-refined coefficients."""
        state_arr = state.as_array() if isinstance(state, VehicleState) else np.asarray(state, float)
        u_arr = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, float)
        feats = make_features(hist, state_arr, u_arr, self.stats)
        raw, _ = mlp_forward(self.net, feats)
        coeffs = refine_coeffs(self, np.asarray(hist, float), raw)
        deriv = state_derivative(state_arr, u_arr, coeffs, self.params)[..., 3:6]
        tire = np.stack(lateral_forces(state_arr, u_arr[..., 0], coeffs, self.params), axis=-1)
        return DpmOutput(coeffs, deriv, tire)


@dataclass
class BaselineModel:
    """Black-box MLP regressing the normalized state derivatives directly."""

    net: Mlp
    stats: NormalizationStats
    params: VehicleParams
    history_len: int
    dt: float

    kind = "baseline"

    @classmethod
    def init(cls, params: VehicleParams, history_len=8, dt=0.02,
             hidden=(64, 64), rng=None) -> "BaselineModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [(history_len + 1) * 5, *hidden, 3]
        return cls(Mlp.init(sizes, rng), NormalizationStats.identity(),
                   params, history_len, dt)

    def forward_cached(self, hist, state, u):
        feats = make_features(hist, state, u, self.stats)
        out_norm, net_cache = mlp_forward(self.net, feats)
        return self.stats.denormalize_targets(out_norm), net_cache

    def forward(self, hist, state, u):
        deriv, _ = self.forward_cached(hist, state, u)
        return deriv

    def backward(self, cache, grad_deriv) -> MlpGrads:
        grad_out = np.asarray(grad_deriv, float) * self.stats.target_std
        grads, _ = mlp_backward(self.net, cache, grad_out)
        return grads

    def predict(self, hist, state, u):
        """Rollout interface; a black box has no tire-force latents."""
        return self.forward(hist, state, u), None, None


# Per-coefficient prior strengths for window refinement, in squash (raw)
# space, order (B, C, D, E) per axle. The curve-shape coefficients are
# friction-invariant, so the amortized estimate is trusted there; the peak
# forces carry the friction evidence, so the window data dominates them.
REFINE_PRIOR = np.array([0.5, 0.5, 0.01, 0.5, 0.5, 0.5, 0.01, 0.5])
REFINE_ITERS = 6


def refine_coeffs(model, hist, raw_init, iters=REFINE_ITERS, prior=REFINE_PRIOR):
    """Polish amortized coefficients against the window's own transitions.

    Damped Gauss-Newton in raw (pre-squash) space on the residuals between
    the physics prediction and finite differences of the logged velocities
    inside the window, with a quadratic prior toward the network output.
    Pure inference: uses the same physics layer, the same window, and no
    labels. Where the window carries no slip evidence the prior wins; where
    it does, the evidence pins the peak-force estimates.
    """
    hist = np.asarray(hist, float)
    lead = hist.shape[:-2]
    h = hist.shape[-2]
    rows = hist.reshape(-1, h, 5)
    raw = np.asarray(raw_init, float).reshape(-1, 8).copy()

    v = rows[:, :, :3]
    fd = (v[:, 1:] - v[:, :-1]) / model.dt
    # the finite difference approximates the derivative at the interval
    # midpoint to second order, so the physics is evaluated there too
    v_mid = 0.5 * (v[:, 1:] + v[:, :-1])
    state_w = np.concatenate([np.zeros_like(v_mid), v_mid], axis=-1)
    u_w = rows[:, :-1, 3:5]
    inv_std = 1.0 / model.stats.target_std

    eye = np.eye(8) * 1e-9
    for _ in range(iters):
        coeffs = squash_to_bounds(raw, model.bounds)
        pred = state_derivative(state_w, u_w, coeffs[:, None, :], model.params)[..., 3:6]
        resid = ((pred - fd) * inv_std).reshape(raw.shape[0], -1)
        jac = deriv_coeff_jacobian(state_w, u_w, coeffs[:, None, :], model.params)
        jac = (jac * inv_std[:, None]).reshape(raw.shape[0], -1, 8)
        jac = jac * squash_jacobian(raw, model.bounds)[:, None, :]
        A = np.einsum("bmi,bmj->bij", jac, jac) + np.diag(prior) + eye
        g = np.einsum("bmi,bm->bi", jac, resid) + prior * (raw - np.asarray(raw_init, float).reshape(-1, 8))
        raw -= np.linalg.solve(A, g[..., None])[..., 0]
    return squash_to_bounds(raw, model.bounds).reshape(lead + (8,))


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_dict(model) -> dict:
    doc = {
        "kind": model.kind,
        "layer_sizes": model.net.layer_sizes,
        "weights": [w.tolist() for w in model.net.weights],
        "biases": [b.tolist() for b in model.net.biases],
        "skip": None if model.net.skip is None else model.net.skip.tolist(),
        "normalization": {
            "feat_mean": model.stats.feat_mean.tolist(),
            "feat_std": model.stats.feat_std.tolist(),
            "target_mean": model.stats.target_mean.tolist(),
            "target_std": model.stats.target_std.tolist(),
        },
        "history_len": model.history_len,
        "dt": model.dt,
        "vehicle": {
            "m": model.params.m, "Iz": model.params.Iz,
            "lf": model.params.lf, "lr": model.params.lr,
            "max_steer": model.params.max_steer, "max_accel": model.params.max_accel,
        },
    }
    if model.kind == "dpm":
        doc["coeff_bounds"] = {"lo": model.bounds.lo.tolist(), "hi": model.bounds.hi.tolist()}
    return doc


def save_checkpoint(model, path):
    Path(path).write_text(json.dumps(checkpoint_dict(model), indent=1) + "\n")


def model_from_dict(doc: dict):
    skip = doc.get("skip")
    net = Mlp([np.array(w, float) for w in doc["weights"]],
              [np.array(b, float) for b in doc["biases"]],
              None if skip is None else np.array(skip, float))
    norm = doc["normalization"]
    stats = NormalizationStats(
        np.array(norm["feat_mean"]), np.array(norm["feat_std"]),
        np.array(norm["target_mean"]), np.array(norm["target_std"]),
    )
    params = VehicleParams(**doc["vehicle"])
    if doc["kind"] == "dpm":
        bounds = CoeffBounds(np.array(doc["coeff_bounds"]["lo"]),
                             np.array(doc["coeff_bounds"]["hi"]))
        return DeepPacejkaModel(net, stats, bounds, params,
                                doc["history_len"], doc["dt"])
    if doc["kind"] == "baseline":
        return BaselineModel(net, stats, params, doc["history_len"], doc["dt"])
    raise ValueError(f"unknown model kind {doc['kind']!r}")


def load_checkpoint(path):
    return model_from_dict(json.loads(Path(path).read_text()))
