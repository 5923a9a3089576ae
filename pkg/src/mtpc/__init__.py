"""Probabilistic-circuit multi-token drafts for lossless self-speculative decoding."""

from .circuits import BTREE, CP, FF, HMM, ArchitectureSpec, Circuit, SpecificationError, build, validate
from .inference import (
    CircuitParams,
    ContractError,
    conditional_distribution,
    enumerate_joint,
    evaluate,
    greedy_window,
    partition,
    prefix_marginals,
    sample_window,
)
from .neural import Model, ParamHead, load_checkpoint, parameterize, save_checkpoint
from .specdec import Session, ar_generate, greedy_spec_step, residual_dist, shared_state_decode, spec_step, verify

__version__ = "0.1.0"
