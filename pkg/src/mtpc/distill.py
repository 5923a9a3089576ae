"""End-to-end desk-scale distillation: teacher -> target -> draft heads.

1. Sample sequences from a synthetic teacher.
2. Fit a single-token target (backbone + unembedding) on them.
3. Freeze the backbone and fit each draft (circuit head + adapter) on the
   same data.  Every draft starts from copies of the target unembedding:
   FF directly, CP through :func:`init_cp_from_ff`, BTree through
   :func:`init_btree_from_ff`, HMM through a CP root with identity
   transitions.  All drafts get the same number of steps.
4. Measure mean accepted tokens per cycle with shared-state decoding on
   held-out teacher prompts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .circuits import BTREE, CP, FF, HMM, ArchitectureSpec, build
from .neural import DraftAdapter, Model, ParamHead, ToyBackbone, TargetSTP, init_btree_from_ff, init_cp_from_ff, init_hmm_identity
from .specdec import SAMPLE, Session, shared_state_decode
from .training import LossConfig, OptimizerConfig, TrainingBatch, distill_dataset, ff_head_from_target, train, train_target, teacher_from_config


def _default_teacher() -> dict:
    return {"kind": "LATENT_CHAIN", "v": 16, "modes": 2, "word_length": 3, "noise": 0.02}


@dataclass
class DistillConfig:
    teacher: dict = field(default_factory=_default_teacher)
    sequences: int = 256
    length: int = 32
    d: int = 32
    L: int = 2
    k: int = 1
    rho: int = 4
    target_steps: int = 300
    target_lr: float = 1e-2
    draft_steps: int = 300
    draft_lr: float = 1e-2
    batch_size: int | None = 64
    gamma: float = 0.9
    beta: float = 10.0
    eval_prompts: int = 16
    prompt_len: int = 8
    eval_tokens: int = 64

    @classmethod
    def from_dict(cls, doc: dict) -> "DistillConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown distillation settings: {sorted(extra)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Stack:
    """Teacher, its samples and the target fitted on them."""

    teacher: object
    data: TrainingBatch
    backbone: ToyBackbone
    target: TargetSTP
    trace: list


def fit_target(cfg: DistillConfig, seed: int) -> Stack:
    teacher = teacher_from_config({**cfg.teacher, "seed": seed})
    data = distill_dataset(teacher, cfg.sequences, cfg.length, seed)
    backbone, target, trace = train_target(
        data, teacher.v, cfg.d, cfg.L, seed=seed, steps=cfg.target_steps, lr=cfg.target_lr, batch_size=cfg.batch_size
    )
    return Stack(teacher, data, backbone, target, trace)


def initial_head(spec: ArchitectureSpec, target: TargetSTP, beta: float, rng: np.random.Generator) -> ParamHead:
    ff = ff_head_from_target(target, spec.n)
    if spec.kind == FF:
        return ff
    if spec.kind == CP:
        return init_cp_from_ff(ff, spec.r, rng)
    if spec.kind == HMM:
        return init_hmm_identity(init_cp_from_ff(ff, spec.r, rng), beta)
    if spec.kind == BTREE:
        return init_btree_from_ff(ff, spec.r, beta, rng)
    raise ValueError(f"unknown architecture {spec.kind!r}")


def distill_draft(spec: ArchitectureSpec, stack: Stack, cfg: DistillConfig, seed: int):
    """Fit one draft on the frozen backbone.  Returns ``(model, trace)``."""
    rng = np.random.default_rng(seed + 7919)
    circuit = build(spec)
    head = initial_head(spec, stack.target, cfg.beta, rng)
    head.check(circuit)
    adapter = DraftAdapter.init(cfg.d, cfg.k, cfg.rho, rng)
    model = Model(circuit, stack.backbone, head, stack.target, adapter)
    opt = OptimizerConfig(lr=cfg.draft_lr, steps=cfg.draft_steps, seed=seed, batch_size=cfg.batch_size)
    return train(model, stack.data, LossConfig(cfg.gamma), opt, trainable=["head", "adapter"])


def eval_prompts(stack: Stack, cfg: DistillConfig, seed: int) -> np.ndarray:
    # held-out prompts: a seed stream disjoint from the training samples
    return stack.teacher.sample(cfg.eval_prompts, cfg.prompt_len, np.random.default_rng([seed, 1]))


def mean_accepted(model: Model, prompts, tokens: int, seed: int, mode: str = SAMPLE) -> float:
    """Mean accepted tokens per cycle over all cycles of all prompts."""
    accepted = cycles = 0
    for i, prompt in enumerate(prompts):
        session = Session(model, prompt, np.random.default_rng([seed, i]), mode=mode)
        shared_state_decode(session, tokens)
        accepted += sum(session.stats.accepted)
        cycles += session.stats.cycles
    return accepted / cycles
