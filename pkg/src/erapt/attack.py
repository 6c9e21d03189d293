"""L-inf projected sign-gradient attack (PGD)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import PromptedClassifier, ce_with_grads
from .numcore import RandomStream


@dataclass(frozen=True)
class PerturbationBall:
    epsilon: float
    input_lo: Optional[float] = None
    input_hi: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if (self.input_lo is None) != (self.input_hi is None):
            raise ValueError("input_lo and input_hi must be given together")
        if self.input_lo is not None and not self.input_lo < self.input_hi:
            raise ValueError("input_lo must be < input_hi")


@dataclass(frozen=True)
class AttackConfig:
    steps: int = 2
    step_size: float = 1 / 255
    random_start: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("attack steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("attack step_size must be positive")


def project(delta, ball: PerturbationBall, x=None) -> np.ndarray:
    """Clamp delta onto [-eps, eps]; with a data box, also keep x + delta inside it."""
    eps = ball.epsilon
    d = np.clip(np.asarray(delta, dtype=np.float64), -eps, eps)
    if ball.input_lo is not None:
        if x is None:
            raise ValueError("projection onto a data box needs the clean input x")
        x = np.asarray(x, dtype=np.float64)
        # the box [lo-x, hi-x] always contains 0 when x is valid, so the
        # intersection with [-eps, eps] is non-empty
        lo = np.maximum(-eps, ball.input_lo - x)
        hi = np.minimum(eps, ball.input_hi - x)
        d = np.minimum(np.maximum(d, lo), hi)
    return d


def pgd_step(model: PromptedClassifier, x, y, delta, ball: PerturbationBall, step_size: float) -> np.ndarray:
    """One signed-gradient ascent step on CE, then projection.

    ``delta`` may be a single perturbation or a stack of them (one per row).
    """
    d = np.asarray(delta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _, g, _ = ce_with_grads(model, x + np.atleast_2d(d), y)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient in pgd_step")
    stepped = np.atleast_2d(d) + step_size * np.sign(g)
    out = project(stepped, ball, x)
    return out[0] if d.ndim == 1 else out


def pgd_attack(model: PromptedClassifier, x, y, ball: PerturbationBall, cfg: AttackConfig,
               stream: Optional[RandomStream] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.random_start:
        if stream is None:
            raise ValueError("random_start needs a RandomStream")
        delta = project(stream.uniform(-ball.epsilon, ball.epsilon, x.shape), ball, x)
    else:
        delta = np.zeros_like(x)
    for _ in range(cfg.steps):
        delta = pgd_step(model, x, y, delta, ball, cfg.step_size)
    return delta


def pgd_attack_batch(model: PromptedClassifier, X, Y, ball: PerturbationBall, cfg: AttackConfig,
                     streams=None) -> np.ndarray:
    """pgd_attack applied to every row of a stack of examples in one pass.

    One stream per row when random_start. Rows match the single-example
    trajectory except where a gradient entry is within rounding of zero.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if cfg.random_start:
        if streams is None or len(streams) != X.shape[0]:
            raise ValueError("random_start needs one stream per example")
        delta = np.stack([s.uniform(-ball.epsilon, ball.epsilon, X.shape[1:]) for s in streams])
        delta = project(delta, ball, X)
    else:
        delta = np.zeros_like(X)
    for _ in range(cfg.steps):
        _, g, _ = ce_with_grads(model, X + delta, Y)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite input gradient in pgd_attack_batch")
        delta = project(delta + cfg.step_size * np.sign(g), ball, X)
    return delta
