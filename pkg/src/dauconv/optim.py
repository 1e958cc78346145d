"""SGD with momentum, selective weight decay, and per-role learning-rate
multipliers.

Unit displacements get a large learning-rate multiplier (500x by default, to
bridge the scale gap against the unit weights) and are exempt from weight
decay; after every step they are clamped back into the displacement box.
Learnable sigmas are floored at a small positive value, counting how often the
floor engages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layer import MIN_LEARNABLE_SIGMA

ROLES = ("dau_weight", "dau_mu", "dau_sigma", "bias", "bn_affine", "dense_weight")
DECAYED_ROLES = ("dau_weight", "dense_weight")


class OptimizerError(RuntimeError):
    """A step could not be applied; no parameter was modified."""


@dataclass
class ParamGroup:
    name: str
    role: str
    values: np.ndarray                 # shared with the owning layer, updated in place
    lr_multiplier: float = 1.0
    weight_decay_enabled: bool = True
    clamp_abs: float = None            # displacement box half-width, dau_mu only
    clamp_min: float = None            # sigma floor, dau_sigma only
    velocity: np.ndarray = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.velocity is None:
            self.velocity = np.zeros_like(self.values)
        if self.velocity.shape != self.values.shape:
            raise ValueError("velocity shape must equal parameter shape")
        if self.role == "dau_mu":
            if self.weight_decay_enabled:
                raise ValueError("displacements are never weight-decayed")


def make_group(name, role, values, mu_lr_multiplier=500.0, clamp_abs=None):
    """Group with the conventional per-role settings."""
    lr_mult = mu_lr_multiplier if role == "dau_mu" else 1.0
    return ParamGroup(
        name=name, role=role, values=values, lr_multiplier=lr_mult,
        weight_decay_enabled=role in DECAYED_ROLES,
        clamp_abs=clamp_abs if role == "dau_mu" else None,
        clamp_min=MIN_LEARNABLE_SIGMA if role == "dau_sigma" else None)


@dataclass
class TrainConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    total_iterations: int = 1000
    schedule: str = "const"            # "const" | "step" | "poly"
    step_drops: tuple = ()
    step_factor: float = 0.1
    poly_power: float = 0.9
    mu_lr_multiplier: float = 500.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.schedule not in ("const", "step", "poly"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.step_drops = tuple(sorted(self.step_drops))


def lr_schedule(config, step_index):
    """Schedule multiplier at a step: step drops multiply by the factor at
    each drop point passed; polynomial decays as (1 - step/total)^power."""
    if config.schedule == "const":
        return 1.0
    if config.schedule == "step":
        passed = sum(1 for d in config.step_drops if step_index >= d)
        return config.step_factor ** passed
    frac = min(step_index / config.total_iterations, 1.0)
    return (1.0 - frac) ** config.poly_power


def sgd_step(groups, grads, config, step_index):
    """One heavy-ball step over all groups.

    g' = grad + weight_decay * param   (decayed roles only)
    v  = momentum * v + g'
    p  = p - base_lr * schedule(step) * lr_multiplier * v

    Decay couples into the gradient before momentum. A non-finite gradient
    anywhere aborts before any group is touched. Displacement groups are
    clamped back into their box afterwards; sigma groups are floored, and the
    number of floored entries is returned.
    """
    if len(groups) != len(grads):
        raise OptimizerError(f"{len(groups)} groups but {len(grads)} gradients")
    for group, grad in zip(groups, grads):
        if grad.shape != group.values.shape:
            raise OptimizerError(f"gradient shape mismatch for group {group.name}")
        if not np.all(np.isfinite(grad)):
            raise OptimizerError(f"non-finite gradient in group {group.name}; "
                                 "step aborted with no partial update")
    mult = lr_schedule(config, step_index)
    sigma_clamps = 0
    for group, grad in zip(groups, grads):
        eff_lr = config.base_lr * mult * group.lr_multiplier
        if group.weight_decay_enabled and config.weight_decay != 0.0:
            grad = grad + config.weight_decay * group.values
        np.multiply(group.velocity, config.momentum, out=group.velocity)
        group.velocity += grad
        group.values -= eff_lr * group.velocity
        if group.clamp_abs is not None:
            np.clip(group.values, -group.clamp_abs, group.clamp_abs,
                    out=group.values)
        if group.clamp_min is not None:
            low = group.values < group.clamp_min
            sigma_clamps += int(low.sum())
            np.clip(group.values, group.clamp_min, None, out=group.values)
    return sigma_clamps
