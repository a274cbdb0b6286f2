"""Small feed-forward q-network with hand-written derivative machinery.

The network is an MLP with tanh hidden layers and a sigmoid output layer,
mapping an augmented state (remaining horizon + state features) to one
q-value per discrete action, each in (0, 1).  Everything the physics losses
need is computed analytically from stored activations:

* parameter gradients (reverse mode) for optimizer steps,
* input gradients and Hessian-vector products (forward-over-reverse) for
  the convection / diffusion terms of the safety PDE,
* second-order directional jets together with the reverse pass *through*
  the jet computation, which yields the exact parameter gradient of the
  PDE residual (third-order mixed derivatives; needs activation
  derivatives up to order three).

Finite differences are used only in the test suite as an independent check,
never here.

Inputs are normalized internally by a per-feature affine map stored in the
spec; all public derivatives are with respect to the *raw* inputs.

Parameter layout (flat theta): layer-major, weights before biases;
W_l has shape (fan_out, fan_in) and is raveled row-major.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "safeprob-qnet"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Version mismatch or corrupt checkpoint payload."""


# --- activations: value and first three derivatives ----------------------

def _tanh_derivs(a, order):
    t = np.tanh(a)
    d1 = 1.0 - t * t
    if order == 1:
        return t, d1, None, None
    d2 = -2.0 * t * d1
    if order == 2:
        return t, d1, d2, None
    d3 = d1 * (6.0 * t * t - 2.0)
    return t, d1, d2, d3


def _sigmoid_derivs(a, order):
    s = 1.0 / (1.0 + np.exp(-a))
    d1 = s * (1.0 - s)
    if order == 1:
        return s, d1, None, None
    d2 = d1 * (1.0 - 2.0 * s)
    if order == 2:
        return s, d1, d2, None
    d3 = d1 * (1.0 - 2.0 * s) ** 2 - 2.0 * d1 * d1
    return s, d1, d2, d3


def _identity_derivs(a, order):
    one = np.ones_like(a)
    zero = np.zeros_like(a)
    return a, one, zero if order >= 2 else None, zero if order >= 3 else None


_ACTIVATIONS = {"tanh": _tanh_derivs, "sigmoid": _sigmoid_derivs, "identity": _identity_derivs}


@dataclass
class NetworkSpec:
    """Architecture plus the input normalization it was trained with.

    output_activation "identity" exists for diagnostics and tests (a truly
    linear network has zero curvature); production nets use the default
    sigmoid so outputs stay in (0, 1).
    """

    input_dim: int
    output_dim: int
    hidden_layers: int = 3
    hidden_width: int = 32
    output_activation: str = "sigmoid"
    input_offset: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_width < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        self.input_offset = (
            np.zeros(self.input_dim) if self.input_offset is None
            else np.asarray(self.input_offset, dtype=float)
        )
        self.input_scale = (
            np.ones(self.input_dim) if self.input_scale is None
            else np.asarray(self.input_scale, dtype=float)
        )
        if self.input_offset.shape != (self.input_dim,) or self.input_scale.shape != (self.input_dim,):
            raise ValueError("normalization arrays must match input_dim")
        if np.any(self.input_scale <= 0):
            raise ValueError("input_scale must be positive")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    @property
    def param_count(self) -> int:
        dims = self.layer_dims
        return sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1))


@dataclass
class QNetwork:
    spec: NetworkSpec
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (self.spec.param_count,):
            raise ValueError(
                f"theta has {self.theta.shape}, spec wants ({self.spec.param_count},)"
            )
        self._build_views()

    def _build_views(self):
        dims = self.spec.layer_dims
        self._weights, self._biases = [], []
        off = 0
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            self._weights.append(self.theta[off : off + fan_in * fan_out].reshape(fan_out, fan_in))
            off += fan_in * fan_out
            self._biases.append(self.theta[off : off + fan_out])
            off += fan_out
        self._acts = ["tanh"] * self.spec.hidden_layers + [self.spec.output_activation]

    def copy(self) -> "QNetwork":
        return QNetwork(self.spec, self.theta.copy())

    def normalize(self, s_raw: np.ndarray) -> np.ndarray:
        return (s_raw - self.spec.input_offset) / self.spec.input_scale


def init_glorot(spec: NetworkSpec, rng: np.random.Generator) -> QNetwork:
    """Uniform Glorot fan-based initialization (standard for tanh stacks)."""
    dims = spec.layer_dims
    parts = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return QNetwork(spec, np.concatenate(parts))


# --- forward ---------------------------------------------------------------

def _forward_core(net: QNetwork, Z: np.ndarray, order: int = 0, keep: bool = False):
    """Run the network on normalized inputs Z (m, d).

    Returns (output, trace); trace holds per-layer preactivation derivative
    arrays when ``keep`` (for subsequent reverse passes).
    """
    trace = []
    for W, b, act in zip(net._weights, net._biases, net._acts):
        A = Z @ W.T + b
        Zn, d1, d2, d3 = _ACTIVATIONS[act](A, max(order, 1))
        if keep:
            trace.append((Z, d1, d2, d3))
        Z = Zn
    return Z, trace


def forward(net: QNetwork, s_raw: np.ndarray) -> np.ndarray:
    """q-values for a raw augmented-state vector (d,) or batch (m, d)."""
    s_raw = np.asarray(s_raw, dtype=float)
    single = s_raw.ndim == 1
    S = np.atleast_2d(s_raw)
    if S.shape[1] != net.spec.input_dim:
        raise ValueError(f"input dim {S.shape[1]} != spec {net.spec.input_dim}")
    q, _ = _forward_core(net, net.normalize(S))
    return q[0] if single else q


def greedy_actions(net: QNetwork, s_raw: np.ndarray) -> np.ndarray | int:
    """argmax_a q(s, a); ties resolve to the lowest index (np.argmax)."""
    q = forward(net, s_raw)
    return int(np.argmax(q)) if q.ndim == 1 else np.argmax(q, axis=1)


# --- reverse mode: parameter gradients --------------------------------------

def grad_params_batch(
    net: QNetwork, S_raw: np.ndarray, a_idx: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    """Flat-theta gradient of sum_m upstream[m] * q(s_m, a_m)."""
    S = np.atleast_2d(np.asarray(S_raw, dtype=float))
    m = S.shape[0]
    _, trace = _forward_core(net, net.normalize(S), order=1, keep=True)
    grad = np.zeros_like(net.theta)
    # seed: d(sum upstream*q_sel)/dZ_L is one-hot at the chosen action
    lam_Z = np.zeros((m, net.spec.layer_dims[-1]))
    lam_Z[np.arange(m), a_idx] = upstream
    off = net.theta.size
    for (Zin, d1, _, _), W, b in zip(reversed(trace), reversed(net._weights), reversed(net._biases)):
        lam_A = lam_Z * d1
        off -= b.size
        grad[off : off + b.size] = lam_A.sum(axis=0)
        off -= W.size
        grad[off : off + W.size] = (lam_A.T @ Zin).ravel()
        lam_Z = lam_A @ W
    return grad


def grad_params(net: QNetwork, s_raw: np.ndarray, a: int, upstream: float = 1.0) -> np.ndarray:
    """Gradient of upstream * q(s, a) with respect to flat theta."""
    return grad_params_batch(net, np.atleast_2d(s_raw), np.array([a]), np.array([upstream]))


# --- input derivatives -------------------------------------------------------

def grad_input(net: QNetwork, s_raw: np.ndarray, a: int) -> np.ndarray:
    """d q(s, a) / d s for the raw (unnormalized) input, shape (input_dim,)."""
    S = np.atleast_2d(np.asarray(s_raw, dtype=float))
    _, trace = _forward_core(net, net.normalize(S), order=1, keep=True)
    lam_Z = np.zeros((1, net.spec.layer_dims[-1]))
    lam_Z[0, a] = 1.0
    for (Zin, d1, _, _), W in zip(reversed(trace), reversed(net._weights)):
        lam_Z = (lam_Z * d1) @ W
    return lam_Z[0] / net.spec.input_scale


def hessian_vector_product(net: QNetwork, s_raw: np.ndarray, a: int, v: np.ndarray) -> np.ndarray:
    """(d^2 q / d s^2) @ v in raw input coordinates, via forward-over-reverse.

    Only directional second derivatives are ever formed; the full Hessian is
    never materialized.
    """
    S = np.atleast_2d(np.asarray(s_raw, dtype=float))
    v_norm = np.atleast_2d(np.asarray(v, dtype=float) / net.spec.input_scale)
    # forward with first-order tangents in direction v
    Z, Zdot = net.normalize(S), v_norm
    trace = []
    for W, b, act in zip(net._weights, net._biases, net._acts):
        A = Z @ W.T + b
        Adot = Zdot @ W.T
        val, d1, d2, _ = _ACTIVATIONS[act](A, 2)
        trace.append((Z, Zdot, Adot, d1, d2))
        Z = val
        Zdot = d1 * Adot
    # reverse pass carrying tangents of the adjoints
    lam = np.zeros((1, net.spec.layer_dims[-1]))
    lam[0, a] = 1.0
    lam_dot = np.zeros_like(lam)
    for (Zin, Zdotin, Adot, d1, d2), W in zip(reversed(trace), reversed(net._weights)):
        lam_A = lam * d1
        lam_A_dot = lam_dot * d1 + lam * d2 * Adot
        lam = lam_A @ W
        lam_dot = lam_A_dot @ W
    return lam_dot[0] / net.spec.input_scale


# --- second-order jets (PDE residual machinery) ------------------------------

def input_jets(
    net: QNetwork,
    S_raw: np.ndarray,
    a_idx: np.ndarray,
    V_raw: np.ndarray,
    order2: bool = True,
    keep: bool = False,
):
    """Directional derivatives of q(s, a) along a set of raw directions.

    S_raw: (m, d) states; V_raw: (m, D, d) directions per state.
    Returns (q_sel (m,), ydot (m, D), yddot (m, D) or None, trace) where
    ydot[m, j] is the first and yddot[m, j] the second directional
    derivative along V_raw[m, j].  ``trace`` (when kept) feeds
    jets_param_grad for the reverse pass through this computation.
    """
    S = np.atleast_2d(np.asarray(S_raw, dtype=float))
    m = S.shape[0]
    Z = net.normalize(S)
    Zdot = np.asarray(V_raw, dtype=float) / net.spec.input_scale
    Zddot = np.zeros_like(Zdot) if order2 else None
    order = 3 if (order2 and keep) else (2 if order2 else (2 if keep else 1))
    trace = []
    for W, b, act in zip(net._weights, net._biases, net._acts):
        A = Z @ W.T + b
        Adot = Zdot @ W.T
        Addot = Zddot @ W.T if order2 else None
        val, d1, d2, d3 = _ACTIVATIONS[act](A, order)
        if keep:
            trace.append((Z, Zdot, Zddot, Adot, Addot, d1, d2, d3))
        Z = val
        Zdot = d1[:, None, :] * Adot
        if order2:
            Zddot = d2[:, None, :] * Adot**2 + d1[:, None, :] * Addot
    rows = np.arange(m)
    q_sel = Z[rows, a_idx]
    ydot = Zdot[rows, :, a_idx]
    yddot = Zddot[rows, :, a_idx] if order2 else None
    return q_sel, ydot, yddot, trace


def jets_param_grad(
    net: QNetwork,
    trace,
    a_idx: np.ndarray,
    seed_dot: np.ndarray,
    seed_ddot: np.ndarray | None,
) -> np.ndarray:
    """Reverse pass through input_jets: flat-theta gradient of

        sum_{m,j} seed_dot[m,j] * ydot[m,j]  (+ seed_ddot[m,j] * yddot[m,j])

    i.e. the exact parameter gradient of any linear combination of first and
    second directional derivatives — the PDE residual in particular.  The
    adjoint of the activation value stream needs phi''' because yddot
    depends on phi'' of the preactivations.
    """
    m, D = seed_dot.shape
    order2 = seed_ddot is not None
    out_dim = net.spec.layer_dims[-1]
    rows = np.arange(m)
    lam_Z = np.zeros((m, out_dim))
    lam_Zdot = np.zeros((m, D, out_dim))
    lam_Zdot[rows, :, a_idx] = seed_dot
    lam_Zddot = None
    if order2:
        lam_Zddot = np.zeros((m, D, out_dim))
        lam_Zddot[rows, :, a_idx] = seed_ddot
    grad = np.zeros_like(net.theta)
    off = net.theta.size
    for (Z, Zdot, Zddot, Adot, Addot, d1, d2, d3), W, b in zip(
        reversed(trace), reversed(net._weights), reversed(net._biases)
    ):
        # adjoints of the preactivation streams
        lam_A = lam_Z * d1 + np.einsum("mdo,mdo->mo", lam_Zdot, d2[:, None, :] * Adot)
        lam_Adot = lam_Zdot * d1[:, None, :]
        lam_Addot = None
        if order2:
            lam_A += np.einsum(
                "mdo,mdo->mo", lam_Zddot, d3[:, None, :] * Adot**2 + d2[:, None, :] * Addot
            )
            lam_Adot = lam_Adot + 2.0 * lam_Zddot * d2[:, None, :] * Adot
            lam_Addot = lam_Zddot * d1[:, None, :]
        # parameter gradients
        off -= b.size
        grad[off : off + b.size] = lam_A.sum(axis=0)
        off -= W.size
        gW = lam_A.T @ Z + np.einsum("mdo,mdi->oi", lam_Adot, Zdot)
        if order2:
            gW += np.einsum("mdo,mdi->oi", lam_Addot, Zddot)
        grad[off : off + W.size] = gW.ravel()
        # propagate to previous layer
        lam_Z = lam_A @ W
        lam_Zdot = lam_Adot @ W
        if order2:
            lam_Zddot = lam_Addot @ W
    return grad


# --- checkpoint io -----------------------------------------------------------

def checkpoint_save(net: QNetwork, path) -> None:
    """Versioned JSON checkpoint; payload is base64 of little-endian float64.

    Serialization is canonical (sorted keys, fixed separators) so identical
    networks produce byte-identical files.
    """
    payload = base64.b64encode(net.theta.astype("<f8").tobytes()).decode("ascii")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": "float64",
        "byte_order": "little",
        "spec": {
            "input_dim": net.spec.input_dim,
            "output_dim": net.spec.output_dim,
            "hidden_layers": net.spec.hidden_layers,
            "hidden_width": net.spec.hidden_width,
            "output_activation": net.spec.output_activation,
            "input_offset": net.spec.input_offset.tolist(),
            "input_scale": net.spec.input_scale.tolist(),
        },
        "theta_b64": payload,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def checkpoint_load(path) -> QNetwork:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')}")
    spec = NetworkSpec(**doc["spec"])
    raw = base64.b64decode(doc["theta_b64"])
    if len(raw) != spec.param_count * 8:
        raise CheckpointError(
            f"payload holds {len(raw)} bytes, spec wants {spec.param_count * 8}"
        )
    theta = np.frombuffer(raw, dtype="<f8").astype(float)
    return QNetwork(spec, theta)
