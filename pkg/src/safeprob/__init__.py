"""Maximal safety probability learning for controlled stochastic systems.

A physics-informed DQN learns the probability that a controlled SDE stays in
a safe set over an outlook horizon, from sparse binary rewards, regularized
by the safety PDE the value function satisfies.  Independent verification
comes from a finite-difference HJB solver, closed-form series, and
Monte-Carlo policy evaluation.
"""

from .envs import (
    ActionGrid,
    BrownianConfig,
    SafetyEnv,
    Trajectory,
    VehicleEnvConfig,
    drift_scenario_config,
    make_brownian_benchmark,
    make_cornering_env,
    make_drift_env,
    rollout,
)
from .oracle import (
    FieldComparison,
    Grid,
    SafetyField,
    batched_greedy_policy,
    brownian_discrete_dp,
    brownian_survival_series,
    compare_field,
    evaluate_policy_mc,
    greedy_policy,
    solve_hjb_fd,
)
from .qnet import (
    NetworkSpec,
    QNetwork,
    checkpoint_load,
    checkpoint_save,
    forward,
    grad_input,
    grad_params,
    hessian_vector_product,
    init_glorot,
)
from .rng import substream
from .sde import (
    AugmentedState,
    SafeSet,
    SdeSystem,
    Transition,
    mc_safety_probability,
    reward_binary,
    reward_mollified,
    step_augmented,
    step_euler_maruyama,
)
from .training import (
    LossReport,
    ReplayMemory,
    TrainConfig,
    TrainingDivergedError,
    build_network,
    dqn_targets,
    loss_boundary,
    loss_data,
    loss_pde,
    pde_residual_WP,
    train,
)

__version__ = "0.1.0"
