"""Python bindings for the rsmcert learner-verifier."""

from ._core import (
    Activation,
    ClosednessResult,
    Counterexample,
    Discretization,
    ExperimentConfig,
    IntervalBox,
    MlpNetwork,
    Outcome,
    RunVerdict,
    SystemSpec,
    VerifierReport,
    VerifyResult,
    bound_expectation_upper,
    build_discretization,
    check_all,
    check_closed_under_dynamics,
    compute_K,
    default_benchmark,
    exploration_std,
    export_trajectories,
    learn_certificate,
    lipschitz_constant,
    load_config,
    load_network,
    parse_config,
    pretrain_policy,
    rollout,
    save_network,
    step,
    verify_only,
)

__all__ = [name for name in dir() if not name.startswith("_")]
