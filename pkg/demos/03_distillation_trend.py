"""
Richer drafts accept more tokens
================================

Fit a single-token target on samples from a teacher whose tokens come in
fixed multi-token words, then distil FF and CP drafts from it with the
same budget and compare mean accepted tokens per cycle.  One seed; the
acceptance suite repeats this on three.
"""

from mtpc import ArchitectureSpec
from mtpc.distill import DistillConfig, distill_draft, eval_prompts, fit_target, mean_accepted
from mtpc.training import mtp_loss, LossConfig, distill_dataset

seed = 0
cfg = DistillConfig()
stack = fit_target(cfg, seed)
print(f"target fitted: loss {stack.trace[0]['loss']:.3f} -> {stack.trace[-1]['loss']:.3f}")

prompts = eval_prompts(stack, cfg, seed)
held_out = distill_dataset(stack.teacher, 64, cfg.length, seed + 1000)
for spec in (ArchitectureSpec("FF", 4, 1, 16), ArchitectureSpec("CP", 4, 8, 16), ArchitectureSpec("HMM", 4, 8, 16)):
    model, trace = distill_draft(spec, stack, cfg, seed)
    acc = mean_accepted(model, prompts, cfg.eval_tokens, seed)
    loss = mtp_loss(model, held_out, LossConfig(cfg.gamma))
    print(f"{spec.kind:<4} r={spec.r}: held-out loss {loss:.3f}, mean accepted {acc:.2f} of {spec.n}")
