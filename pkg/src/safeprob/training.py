"""Physics-informed DQN for maximal safety probability.

The learner runs episodic DQN on the horizon-augmented MDP and regularizes
the q-network with two physics terms:

    L = L_D + lambda * L_P + mu * L_B

* L_D — mean squared Bellman error on replayed transitions with target
  values y = r (terminal) or r + max_a Qhat(s', a) (no discounting; returns
  are survival probabilities in [0, 1]).
* L_P — mean squared PDE residual W_P = dQ/ds · f_tilde
  + 1/2 sum_j sigma_j^T (d^2Q/ds^2) sigma_j at collocation states, evaluated
  at the greedy action (held fixed while differentiating).
* L_B — mean squared boundary mismatch W_B = Q(s, a*) - l_eps(x) on the
  h = 0 slice and on the lateral safe-set boundary.

Sampling distributions: episodes start from P_D (fixed-horizon states in the
spawn region); collocation states come from P_P (uniform horizon x interior);
boundary states from P_B (an exact 50/50 mixture of the temporal and lateral
boundaries).  The target network tracks by theta_hat <- eta*theta +
(1-eta)*theta_hat after every gradient step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import qnet
from .envs import SafetyEnv
from .rng import substream
from .sde import AugmentedState


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries a diagnostics snapshot."""

    def __init__(self, snapshot: dict):
        super().__init__(f"training diverged: {snapshot}")
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    episodes: int = 5000
    learning_rate: float = 5e-4
    lambda_pde: float = 1e-4  # lambda
    mu_boundary: float = 1e-4  # mu
    eta_target: float = 0.005  # soft target smoothing, in (0, 1]
    eps_start: float = 1.0  # exploration epsilon (distinct from mollifier eps)
    eps_end: float = 0.05
    eps_decay_frac: float = 0.2  # linear decay over this fraction of episodes
    replay_capacity: int = 100_000
    batch_data: int = 32
    batch_pde: int = 32
    batch_boundary: int = 32
    tau_d: float | None = None  # episode horizon; None -> env default policy
    update_every: int = 1  # env steps per gradient step
    pde_grad_mode: str = "exact"  # "exact" | "stop_hessian"
    optimizer: str = "adam"  # "adam" | "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    moving_avg_window: int = 500
    checkpoint_every: int = 0  # episodes; 0 disables periodic checkpoints

    def __post_init__(self):
        if self.lambda_pde < 0 or self.mu_boundary < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0.0 < self.eta_target <= 1.0):
            raise ValueError("eta_target must be in (0, 1]")
        if min(self.batch_data, self.batch_pde, self.batch_boundary) < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.pde_grad_mode not in ("exact", "stop_hessian"):
            raise ValueError("pde_grad_mode must be 'exact' or 'stop_hessian'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")

    def epsilon_at(self, episode: int) -> float:
        """Linear decay from eps_start to eps_end over the first decay fraction."""
        horizon = max(int(self.episodes * self.eps_decay_frac), 1)
        frac = min(episode / horizon, 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac


@dataclass
class LossReport:
    l_data: float
    l_pde: float
    l_boundary: float
    mean_abs_wp: float = 0.0
    mean_abs_wb: float = 0.0
    mean_target: float = 0.0

    def total(self, lam: float, mu: float) -> float:
        return self.l_data + lam * self.l_pde + mu * self.l_boundary


class ReplayMemory:
    """FIFO ring buffer of transitions in feature coordinates.

    Minibatches are drawn uniformly without replacement (batch size capped at
    the current fill level).
    """

    def __init__(self, capacity: int, input_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, input_dim))
        self.a = np.zeros(self.capacity, dtype=np.int64)
        self.r = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, input_dim))
        self.terminal = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def push(self, s_feat, a, r, s2_feat, terminal):
        i = self._next
        self.s[i] = s_feat
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2_feat
        self.terminal[i] = terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int):
        k = min(batch, self.size)
        idx = rng.choice(self.size, size=k, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.terminal[idx]


# --- sampling distributions ---------------------------------------------------

def sample_initial_state_PD(env: SafetyEnv, tau_d: float, rng) -> AugmentedState:
    """P_D: fixed horizon tau_d, state uniform on the spawn region."""
    return AugmentedState(float(tau_d), env.sample_x_init(rng, 1)[0])


def sample_collocation_PP(env: SafetyEnv, rng, n: int = 1):
    """P_P: horizon uniform on [0, tau_max] x interior states; returns (H, X)."""
    H = rng.uniform(0.0, env.tau_max, size=n)
    X = env.sample_x_collocation(rng, n)
    return H, X


def sample_boundary_PB(env: SafetyEnv, rng, n: int = 1):
    """P_B: exact 50/50 mixture of (h = 0, interior) and (h ~ U[0, tau], boundary)."""
    temporal = rng.uniform(size=n) < 0.5
    H = np.where(temporal, 0.0, rng.uniform(0.0, env.tau_max, size=n))
    X = np.empty((n, env.system.state_dim))
    n_t = int(np.sum(temporal))
    if n_t:
        X[temporal] = env.sample_x_collocation(rng, n_t)
    if n - n_t:
        X[~temporal] = env.sample_x_boundary(rng, n - n_t)
    return H, X


# --- loss pieces ------------------------------------------------------------------

def dqn_targets(target_net: qnet.QNetwork, r, s2_feat, terminal) -> np.ndarray:
    """y = r for terminal transitions else r + max_a Qhat(s', a); undiscounted."""
    y = np.asarray(r, dtype=float).copy()
    live = ~np.asarray(terminal)
    if np.any(live):
        q2 = qnet.forward(target_net, np.atleast_2d(s2_feat)[live])
        y[live] += np.max(q2, axis=1)
    return y


def loss_data(net: qnet.QNetwork, s_feat, a, y, with_grad: bool = True):
    """Mean squared Bellman error; gradient flows through Q only."""
    S = np.atleast_2d(s_feat)
    q = qnet.forward(net, S)[np.arange(S.shape[0]), a]
    resid = q - np.asarray(y, dtype=float)
    loss = float(np.mean(resid**2))
    if not with_grad:
        return loss, None
    grad = qnet.grad_params_batch(net, S, np.asarray(a), 2.0 * resid / S.shape[0])
    return loss, grad


def pde_residual_batch(net: qnet.QNetwork, env: SafetyEnv, H, X, a_idx,
                       keep_trace: bool = False):
    """W_P at (H, X) for fixed actions a_idx; returns (W, trace, sigma_present)."""
    S = env.features_batch(H, X)
    f_t = env.pde_drift_batch(X, a_idx)
    sig = env.pde_diffusion_batch(X, a_idx)
    if sig is None:
        V = f_t[:, None, :]
    else:
        V = np.concatenate([f_t[:, None, :], np.transpose(sig, (0, 2, 1))], axis=1)
    _, ydot, yddot, trace = qnet.input_jets(
        net, S, a_idx, V, order2=sig is not None, keep=keep_trace
    )
    W = ydot[:, 0].copy()
    if sig is not None:
        W += 0.5 * np.sum(yddot[:, 1:], axis=1)
    return W, trace, sig is not None


def pde_residual_WP(net: qnet.QNetwork, env: SafetyEnv, s: AugmentedState, a_star: int) -> float:
    """Scalar PDE residual at one augmented state and its greedy action."""
    W, _, _ = pde_residual_batch(
        net, env, np.array([s.h]), np.atleast_2d(s.x), np.array([a_star])
    )
    return float(W[0])


def loss_pde(net: qnet.QNetwork, env: SafetyEnv, H, X, with_grad: bool = True,
             grad_mode: str = "exact"):
    """Mean squared PDE residual at greedy actions (actions frozen for the grad)."""
    S = env.features_batch(H, X)
    a_idx = np.argmax(qnet.forward(net, S), axis=1)
    W, trace, has_sigma = pde_residual_batch(net, env, H, X, a_idx, keep_trace=with_grad)
    m = W.size
    loss = float(np.mean(W**2))
    if not with_grad:
        return loss, None, float(np.mean(np.abs(W)))
    upstream = 2.0 * W / m
    n_dirs = trace[0][1].shape[1]
    seed_dot = np.zeros((m, n_dirs))
    seed_dot[:, 0] = upstream
    seed_ddot = None
    if has_sigma and grad_mode == "exact":
        seed_ddot = np.zeros((m, n_dirs))
        seed_ddot[:, 1:] = 0.5 * upstream[:, None]
    grad = qnet.jets_param_grad(net, trace, a_idx, seed_dot, seed_ddot)
    return loss, grad, float(np.mean(np.abs(W)))


def loss_boundary(net: qnet.QNetwork, env: SafetyEnv, H, X, with_grad: bool = True):
    """Mean squared W_B = Q(s, a*) - l_eps(x); covers both boundary branches."""
    S = env.features_batch(H, X)
    q = qnet.forward(net, S)
    a_idx = np.argmax(q, axis=1)
    target = env.boundary_mollifier_batch(X)
    resid = q[np.arange(S.shape[0]), a_idx] - target
    loss = float(np.mean(resid**2))
    if not with_grad:
        return loss, None, float(np.mean(np.abs(resid)))
    grad = qnet.grad_params_batch(net, S, a_idx, 2.0 * resid / S.shape[0])
    return loss, grad, float(np.mean(np.abs(resid)))


# --- optimizer ---------------------------------------------------------------------

class Adam:
    """Adam on the flat parameter vector (in-place updates)."""

    def __init__(self, theta: np.ndarray, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.theta = theta
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(theta)
        self.v = np.zeros_like(theta)
        self.t = 0

    def step(self, grad: np.ndarray):
        self.t += 1
        self.m += (1 - self.b1) * (grad - self.m)
        self.v += (1 - self.b2) * (grad**2 - self.v)
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        self.theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class Sgd:
    def __init__(self, theta: np.ndarray, lr: float):
        self.theta = theta
        self.lr = lr

    def step(self, grad: np.ndarray):
        self.theta -= self.lr * grad


# --- training loop -------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    reward: float
    moving_avg: float
    l_data: float
    l_pde: float
    l_boundary: float
    eps_greedy: float
    q_init: float
    wall_time: float


def build_network(env: SafetyEnv, hidden_layers: int = 3, hidden_width: int = 32,
                  seed: int = 0) -> qnet.QNetwork:
    """Fresh q-network with the env's featurization baked into the normalization."""
    spec = qnet.NetworkSpec(
        input_dim=env.input_dim,
        output_dim=env.n_actions,
        hidden_layers=hidden_layers,
        hidden_width=hidden_width,
        input_offset=env.input_offset,
        input_scale=env.input_scale,
    )
    return qnet.init_glorot(spec, substream(seed, "init"))


def train(
    env: SafetyEnv,
    config: TrainConfig,
    seed: int,
    net: qnet.QNetwork | None = None,
    on_episode=None,
    on_checkpoint=None,
):
    """Run the physics-informed DQN loop for config.episodes episodes.

    Returns (net, records).  All randomness is derived from ``seed`` through
    named substreams, so a rerun reproduces every draw.  ``on_episode`` /
    ``on_checkpoint`` are optional callbacks (metrics CSV, checkpoint files).
    Raises TrainingDivergedError on a non-finite loss.
    """
    if net is None:
        net = build_network(env, seed=seed)
    target = net.copy()
    replay = ReplayMemory(config.replay_capacity, env.input_dim)
    opt = (
        Adam(net.theta, config.learning_rate, config.adam_beta1, config.adam_beta2,
             config.adam_eps)
        if config.optimizer == "adam"
        else Sgd(net.theta, config.learning_rate)
    )
    records: list[EpisodeRecord] = []
    recent = []
    t_start = time.perf_counter()
    step_counter = 0

    for episode in range(config.episodes):
        rng_env = substream(seed, "env", episode)
        rng_explore = substream(seed, "explore", episode)
        rng_train = substream(seed, "train", episode)
        eps = config.epsilon_at(episode)

        if config.tau_d is not None:
            s = sample_initial_state_PD(env, config.tau_d, rng_env)
        else:
            s = env.sample_initial(rng_env)
        s_feat = env.features(s)
        q_init = float(np.max(qnet.forward(net, s_feat)))
        ep_reward = 0.0
        ep_losses = np.zeros(3)
        n_updates = 0
        terminal = s.is_absorbing(env.safe_set)

        while not terminal:
            if rng_explore.uniform() < eps:
                a = int(rng_explore.integers(env.n_actions))
            else:
                a = int(np.argmax(qnet.forward(net, s_feat)))
            s2, r, terminal = env.step(s, a, rng_env)
            s2_feat = env.features(s2)
            replay.push(s_feat, a, r, s2_feat, terminal)
            ep_reward += r
            s, s_feat = s2, s2_feat
            step_counter += 1
            if step_counter % config.update_every:
                continue

            bs, ba, br, bs2, bterm = replay.sample(rng_train, config.batch_data)
            y = dqn_targets(target, br, bs2, bterm)
            l_d, grad = loss_data(net, bs, ba, y)
            if config.lambda_pde > 0:
                Hp, Xp = sample_collocation_PP(env, rng_train, config.batch_pde)
                l_p, g_p, _ = loss_pde(net, env, Hp, Xp, grad_mode=config.pde_grad_mode)
                grad += config.lambda_pde * g_p
            else:
                l_p = 0.0
            if config.mu_boundary > 0:
                Hb, Xb = sample_boundary_PB(env, rng_train, config.batch_boundary)
                l_b, g_b, _ = loss_boundary(net, env, Hb, Xb)
                grad += config.mu_boundary * g_b
            else:
                l_b = 0.0
            total = l_d + config.lambda_pde * l_p + config.mu_boundary * l_b
            if not np.isfinite(total):
                raise TrainingDivergedError({
                    "episode": episode, "step": step_counter,
                    "l_data": l_d, "l_pde": l_p, "l_boundary": l_b,
                    "theta_norm": float(np.linalg.norm(net.theta)),
                })
            opt.step(grad)
            # soft target update after every gradient step
            target.theta *= 1.0 - config.eta_target
            target.theta += config.eta_target * net.theta
            ep_losses += (l_d, l_p, l_b)
            n_updates += 1

        recent.append(ep_reward)
        if len(recent) > config.moving_avg_window:
            recent.pop(0)
        denom = max(n_updates, 1)
        rec = EpisodeRecord(
            episode=episode,
            reward=ep_reward,
            moving_avg=float(np.mean(recent)),
            l_data=ep_losses[0] / denom,
            l_pde=ep_losses[1] / denom,
            l_boundary=ep_losses[2] / denom,
            eps_greedy=eps,
            q_init=q_init,
            wall_time=time.perf_counter() - t_start,
        )
        records.append(rec)
        if on_episode is not None:
            on_episode(rec)
        if (
            on_checkpoint is not None
            and config.checkpoint_every > 0
            and (episode + 1) % config.checkpoint_every == 0
        ):
            on_checkpoint(episode + 1, net)
    return net, records
