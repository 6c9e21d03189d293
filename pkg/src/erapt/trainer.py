"""Adversarial prompt tuning loop: evolve perturbations per example, minimize the
weighted clean/robust loss over the survivors with SGD + momentum."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attack import AttackConfig, PerturbationBall, pgd_attack
from .dataio import LabeledDataset
from .evolution import EvolutionConfig, final_selected, run_evolution
from .evaluation import accuracy, robust_accuracy
from .losses import LossWeightState, combined_loss, epoch_weighting
from .model import PromptedClassifier, frozen_checksum
from .numcore import RandomStream

log = logging.getLogger(__name__)

ER_APT = "er_apt"
BASELINE = "single_pgd_baseline"
MODES = (ER_APT, BASELINE)

REPORT_COLUMNS = ("epoch", "natural_acc", "robust_acc", "mean_ce", "mean_kl", "alpha", "beta", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr_init: float = 0.0035
    momentum: float = 0.9
    warmup_epochs: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    ball: PerturbationBall = field(default_factory=lambda: PerturbationBall(1 / 255))
    alpha_init: float = 1.0
    beta_init: float = 1.5
    temperature: float = 1.0
    mode: str = ER_APT
    seed: int = 0
    average_full_population: bool = False
    kl_reversed: bool = False
    eval_steps: int = 20
    eval_step_size: Optional[float] = None  # defaults to epsilon / 4
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_init > 0:
            raise ValueError("lr_init must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("alpha_init", "beta_init", "temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.eval_steps < 0:
            raise ValueError("eval_steps must be >= 0")

    @property
    def eval_attack(self) -> Optional[AttackConfig]:
        if self.eval_steps == 0:
            return None
        step = self.eval_step_size if self.eval_step_size is not None else self.ball.epsilon / 4
        return AttackConfig(steps=self.eval_steps, step_size=step, random_start=False)


@dataclass
class OptimizerState:
    velocity: np.ndarray
    step_count: int = 0


@dataclass
class EpochRecord:
    epoch: int
    natural_acc: float
    robust_acc: float
    mean_ce: float
    mean_kl: float
    alpha: float
    beta: float
    lr: float

    def row(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    checksum: str = ""
    wall_time: float = 0.0
    events: list = field(default_factory=list)
    # prompt after every optimizer step
    prompts: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for r in self.records:
            vals = [str(r.epoch)] + [f"{v:.17g}" for v in r.row()[1:]]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    def write_events(self, path) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def cosine_lr(epoch: int, batch: int, cfg: TrainConfig, batches_per_epoch: int) -> float:
    """Learning rate for 0-based (epoch, batch).

    Linear ramp from lr_init/100 towards lr_init over the warmup epochs, then
    half-cosine decay from lr_init to 0 over the remaining steps.
    """
    step = epoch * batches_per_epoch + batch
    warm = cfg.warmup_epochs * batches_per_epoch
    total = cfg.epochs * batches_per_epoch
    lo = cfg.lr_init / 100.0
    if step < warm:
        return lo + (cfg.lr_init - lo) * step / warm
    span = total - warm - 1
    progress = (step - warm) / span if span > 0 else 0.0
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(prompt: np.ndarray, grad: np.ndarray, opt: OptimizerState, lr: float, momentum: float):
    if grad.shape != prompt.shape:
        raise ValueError("gradient shape does not match prompt")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite prompt gradient")
    v = momentum * opt.velocity + grad
    return prompt - lr * v, OptimizerState(v, opt.step_count + 1)


def example_stream(root: RandomStream, index: int, epoch: int, batch: int) -> RandomStream:
    return root.split(("example", int(index), int(epoch), int(batch)))


def adversarial_deltas(model: PromptedClassifier, x, y, cfg: TrainConfig, stream: RandomStream,
                       trace: Optional[list] = None) -> np.ndarray:
    """Perturbations that enter the robust loss for one example."""
    if cfg.mode == BASELINE:
        return pgd_attack(model, x, y, cfg.ball, cfg.attack, stream.split("pgd"))[None, :]
    pop = run_evolution(model, x, y, cfg.ball, cfg.evolution, stream.split("evolution"), trace)
    if cfg.average_full_population:
        return pop.deltas
    return final_selected(pop, model, x, y).deltas


def _example_terms(model, x, y, weights, cfg, stream):
    deltas = adversarial_deltas(model, x, y, cfg, stream)
    return combined_loss(model, x, y, deltas, weights, cfg.kl_reversed, need_grad=True)


def train_batch(model: PromptedClassifier, X, Y, weights: LossWeightState, cfg: TrainConfig, streams,
                pool: Optional[ThreadPoolExecutor] = None):
    """Batch-mean prompt gradient and summed (ce, kl) over the batch.

    Per-example work may run on ``pool``; results are folded in example order.
    """
    X = np.atleast_2d(X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    args = [(model, X[i], int(Y[i]), weights, cfg, streams[i]) for i in range(X.shape[0])]
    if pool is None:
        terms = [_example_terms(*a) for a in args]
    else:
        terms = list(pool.map(lambda a: _example_terms(*a), args))
    grad = np.zeros(model.prompt_dim)
    ce_sum = kl_sum = 0.0
    for t in terms:
        if not (math.isfinite(t.total) and np.all(np.isfinite(t.grad_prompt))):
            raise FloatingPointError("non-finite training loss")
        grad = grad + t.grad_prompt
        ce_sum += t.ce
        kl_sum += t.kl_mean
    return grad / len(terms), ce_sum, kl_sum


def run_training(cfg: TrainConfig, dataset: LabeledDataset, model: PromptedClassifier,
                 eval_dataset: Optional[LabeledDataset] = None, workers: int = 1):
    """Train the prompt of ``model``; returns (trained model, TrainReport)."""
    t0 = time.perf_counter()
    eval_dataset = eval_dataset or dataset
    checksum = frozen_checksum(model)
    root = RandomStream(cfg.seed).split("train")
    X, Y = dataset.inputs, dataset.labels
    n = X.shape[0]
    nb = math.ceil(n / cfg.batch_size)
    weights = LossWeightState.initial(cfg.alpha_init, cfg.beta_init, cfg.temperature)
    opt = OptimizerState(np.zeros(model.prompt_dim))
    report = TrainReport(checksum=checksum)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            alpha, beta = weights.alpha, weights.beta
            report.events.append({"event": "epoch_start", "epoch": epoch + 1, "alpha": alpha, "beta": beta})
            order = np.arange(n)
            if cfg.shuffle:
                keys = root.split(("shuffle", epoch)).random(n)
                order = np.argsort(keys, kind="stable")
            lr = cfg.lr_init
            for b in range(nb):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                streams = [example_stream(root, i, epoch, b) for i in idx]
                grad, ce_sum, kl_sum = train_batch(model, X[idx], Y[idx], weights, cfg, streams, pool)
                lr = cosine_lr(epoch, b, cfg, nb)
                prompt, opt = sgd_step(model.prompt, grad, opt, lr, cfg.momentum)
                model = model.with_prompt(prompt)
                report.prompts.append(model.prompt)
                weights = weights.accumulate(ce_sum, kl_sum, len(idx))
                report.events.append({"event": "lr", "epoch": epoch + 1, "batch": b + 1, "lr": lr})
            weights = weights.finalize_epoch()
            mean_ce, mean_kl = weights.cur_ce, weights.cur_kl
            nat = accuracy(model, eval_dataset)
            atk = cfg.eval_attack
            rob = nat if atk is None else robust_accuracy(model, eval_dataset, cfg.ball, atk)
            report.records.append(EpochRecord(epoch + 1, nat, rob, mean_ce, mean_kl, alpha, beta, lr))
            weights = epoch_weighting(weights)
            report.events.append({
                "event": "weight_update", "epoch": epoch + 1, "w_acc": weights.w_acc, "w_rob": weights.w_rob,
                "alpha": weights.alpha, "beta": weights.beta,
            })
            log.info("epoch %d nat=%.4f rob=%.4f ce=%.4f kl=%.4f", epoch + 1, nat, rob, mean_ce, mean_kl)
    finally:
        if pool is not None:
            pool.shutdown()
    if frozen_checksum(model) != checksum:
        raise RuntimeError("frozen weights changed during training")
    report.wall_time = time.perf_counter() - t0
    return model, report


def weight_log_csv(report: TrainReport) -> str:
    """Per-epoch weight/speed log: epoch, w_acc, w_rob, alpha, beta (weights chosen for the next epoch)."""
    lines = ["epoch,w_acc,w_rob,alpha,beta"]
    for ev in report.events:
        if ev["event"] == "weight_update":
            fmt = lambda v: "" if v is None else f"{v:.17g}"
            lines.append(f"{ev['epoch']},{fmt(ev['w_acc'])},{fmt(ev['w_rob'])},{fmt(ev['alpha'])},{fmt(ev['beta'])}")
    return "\n".join(lines) + "\n"
