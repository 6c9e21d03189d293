"""Clean/robust training objective and the per-epoch dynamic loss weighting."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .model import PromptedClassifier, ce_with_grads, kl_with_prompt_grad

RATIO_FLOOR = 1e-12

ALPHA_INIT = 1.0
BETA_INIT = 1.5


@dataclass(frozen=True)
class LossWeightState:
    alpha: float = ALPHA_INIT
    beta: float = BETA_INIT
    alpha_init: float = ALPHA_INIT
    beta_init: float = BETA_INIT
    temperature: float = 1.0
    epoch_ce_sum: float = 0.0
    epoch_kl_sum: float = 0.0
    epoch_count: int = 0
    prev_ce: Optional[float] = None
    prev_kl: Optional[float] = None
    cur_ce: Optional[float] = None
    cur_kl: Optional[float] = None
    # completed epochs; the weights held here apply to epoch ``epoch_index + 1``
    epoch_index: int = 0
    w_acc: Optional[float] = None
    w_rob: Optional[float] = None

    def __post_init__(self):
        for name in ("alpha_init", "beta_init", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        # a softmax weight may underflow to 0 when the speeds are far apart
        for name in ("alpha", "beta"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def initial(cls, alpha_init=ALPHA_INIT, beta_init=BETA_INIT, temperature=1.0) -> "LossWeightState":
        return cls(alpha=alpha_init, beta=beta_init, alpha_init=alpha_init, beta_init=beta_init,
                   temperature=temperature)

    def accumulate(self, ce_sum: float, kl_sum: float, count: int) -> "LossWeightState":
        """Fold per-example loss sums of one batch into the epoch accumulators."""
        return replace(self, epoch_ce_sum=self.epoch_ce_sum + ce_sum,
                       epoch_kl_sum=self.epoch_kl_sum + kl_sum, epoch_count=self.epoch_count + count)

    def finalize_epoch(self) -> "LossWeightState":
        """Turn the accumulators into this epoch's mean losses."""
        if self.epoch_count == 0:
            raise ValueError("no losses accumulated this epoch")
        return replace(self, cur_ce=self.epoch_ce_sum / self.epoch_count,
                       cur_kl=self.epoch_kl_sum / self.epoch_count)


class CombinedLoss(NamedTuple):
    total: float
    ce: float
    kl_mean: float
    grad_prompt: Optional[np.ndarray] = None


def _unique_with_weights(deltas: np.ndarray):
    """Distinct rows and their multiplicity fractions.

    Averaging over distinct rows with weights count/n equals the plain mean,
    and stays bit-exact when every row is the same (weight 1.0).
    """
    uniq, counts = np.unique(deltas, axis=0, return_counts=True)
    return uniq, counts / deltas.shape[0]


def combined_loss(model: PromptedClassifier, x, y, adv_deltas: Sequence, weights: LossWeightState,
                  kl_reversed: bool = False, need_grad: bool = False) -> CombinedLoss:
    """alpha * CE(clean) + beta * mean_i KL(clean || x + delta_i).

    ``kl_reversed`` swaps the KL arguments to KL(x + delta_i || clean).
    """
    x = np.asarray(x, dtype=np.float64)
    D = np.atleast_2d(np.asarray(adv_deltas, dtype=np.float64))
    if D.shape[0] == 0:
        raise ValueError("combined_loss needs at least one adversarial perturbation")
    ce, _, g_ce = ce_with_grads(model, x, y)
    uniq, w = _unique_with_weights(D)
    X_adv = x + uniq
    if kl_reversed:
        kl, g_kl = kl_with_prompt_grad(model, X_adv, x)
    else:
        kl, g_kl = kl_with_prompt_grad(model, x, X_adv)
    kl_mean = float(w @ kl)
    ce = float(ce[0])
    total = weights.alpha * ce + weights.beta * kl_mean
    grad = None
    if need_grad:
        grad = weights.alpha * g_ce + weights.beta * (w @ g_kl)
    return CombinedLoss(total, ce, kl_mean, grad)


def learning_speeds(state: LossWeightState) -> tuple[float, float]:
    """Loss ratios latest-epoch / previous-epoch for the clean and robust terms."""
    if state.prev_ce is None or state.prev_kl is None:
        raise ValueError("learning speeds need a previous epoch")
    if state.cur_ce is None or state.cur_kl is None:
        raise ValueError("current epoch has not been finalized")
    w_acc = state.cur_ce / max(state.prev_ce, RATIO_FLOOR)
    w_rob = state.cur_kl / max(state.prev_kl, RATIO_FLOOR)
    return w_acc, w_rob


def update_weights(state: LossWeightState, w_acc: float, w_rob: float) -> LossWeightState:
    """Softmax over the two speeds at temperature T, scaled by 2 and the initial weights."""
    if not (math.isfinite(w_acc) and math.isfinite(w_rob)):
        raise ValueError("learning speeds must be finite")
    T = state.temperature
    a, b = w_acc / T, w_rob / T
    m = max(a, b)
    ea, eb = math.exp(a - m), math.exp(b - m)
    s = ea + eb
    return replace(state, alpha=state.alpha_init * 2.0 * ea / s, beta=state.beta_init * 2.0 * eb / s,
                   w_acc=w_acc, w_rob=w_rob)


def epoch_weighting(state: LossWeightState, warmup: int = 2) -> LossWeightState:
    """Close an epoch: set the weights for the next one and roll the loss history.

    Epochs 1..warmup train with the initial weights; afterwards the weights
    come from the ratio of the two most recent epoch means.
    """
    if state.cur_ce is None:
        state = state.finalize_epoch()
    next_epoch = state.epoch_index + 2
    if next_epoch <= warmup or state.prev_ce is None:
        state = replace(state, alpha=state.alpha_init, beta=state.beta_init, w_acc=None, w_rob=None)
    else:
        w_acc, w_rob = learning_speeds(state)
        state = update_weights(state, w_acc, w_rob)
    return replace(state, prev_ce=state.cur_ce, prev_kl=state.cur_kl, cur_ce=None, cur_kl=None,
                   epoch_ce_sum=0.0, epoch_kl_sum=0.0, epoch_count=0, epoch_index=state.epoch_index + 1)
