"""Natural/robust accuracy and an empirical check of the population region bound.

The bound: if the mean loss over a perturbation population is gamma, the loss
is L-Lipschitz in the perturbation and every point of the ball lies within eta
of some member, then loss(delta) <= gamma + L * eta anywhere in the ball.
Distances are L-inf throughout.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .attack import AttackConfig, PerturbationBall, pgd_attack_batch
from .dataio import LabeledDataset
from .model import PromptedClassifier, loss_ce, predict
from .numcore import RandomStream

DIST_FLOOR = 1e-9
BOUND_SLACK = 1e-9


@dataclass
class RobustnessReport:
    natural_acc: float
    robust_acc: float
    attack_steps: int
    epsilon: float
    per_class_acc: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TheoremCheckReport:
    gamma: float
    L_hat: float
    eta_cover: float
    samples: int
    violation_rate: float
    max_excess: float
    degenerate: bool = False

    @property
    def bound(self) -> float:
        return self.gamma + self.L_hat * self.eta_cover

    def to_json(self) -> str:
        d = asdict(self)
        d["bound"] = self.bound
        return json.dumps(d, sort_keys=True)


def accuracy(model: PromptedClassifier, dataset: LabeledDataset) -> float:
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset")
    return float(np.mean(predict(model, dataset.inputs) == dataset.labels))


def per_class_accuracy(model: PromptedClassifier, dataset: LabeledDataset, deltas=None) -> list:
    X = dataset.inputs if deltas is None else dataset.inputs + deltas
    hit = predict(model, X) == dataset.labels
    out = []
    for c in range(dataset.num_classes):
        mask = dataset.labels == c
        out.append(float(hit[mask].mean()) if mask.any() else float("nan"))
    return out


def _robust_hits(model, dataset, ball, attack_cfg, stream):
    streams = None
    if attack_cfg.random_start:
        if stream is None:
            raise ValueError("random_start needs a stream")
        streams = [stream.split(("eval", i)) for i in range(len(dataset))]
    deltas = pgd_attack_batch(model, dataset.inputs, dataset.labels, ball, attack_cfg, streams)
    # the zero perturbation is always a candidate, so robust <= natural
    clean = predict(model, dataset.inputs) == dataset.labels
    attacked = predict(model, dataset.inputs + deltas) == dataset.labels
    return clean & attacked


def robust_accuracy(model: PromptedClassifier, dataset: LabeledDataset, ball: PerturbationBall,
                    attack_cfg: AttackConfig, stream: Optional[RandomStream] = None) -> float:
    if len(dataset) == 0:
        raise ValueError("robust accuracy of an empty dataset")
    return float(np.mean(_robust_hits(model, dataset, ball, attack_cfg, stream)))


def robustness_report(model: PromptedClassifier, dataset: LabeledDataset, ball: Optional[PerturbationBall],
                      attack_cfg: Optional[AttackConfig], stream: Optional[RandomStream] = None) -> RobustnessReport:
    """Natural and robust accuracy; a missing ball or attack means robust = natural."""
    nat = accuracy(model, dataset)
    eps = 0.0 if ball is None else ball.epsilon
    steps = 0 if attack_cfg is None else attack_cfg.steps
    if ball is None or attack_cfg is None:
        return RobustnessReport(nat, nat, steps, eps, per_class_accuracy(model, dataset))
    hits = _robust_hits(model, dataset, ball, attack_cfg, stream)
    per_class = [float(hits[dataset.labels == c].mean()) if np.any(dataset.labels == c) else float("nan")
                 for c in range(dataset.num_classes)]
    return RobustnessReport(nat, float(hits.mean()), steps, eps, per_class)


def _pairwise_linf(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.max(np.abs(A[:, None, :] - B[None, :, :]), axis=-1)


def lipschitz_estimate(points: np.ndarray, losses: np.ndarray, ref_points: Optional[np.ndarray] = None,
                       ref_losses: Optional[np.ndarray] = None) -> float:
    """Max |loss difference| / L-inf distance over point pairs and point-reference pairs."""
    D = _pairwise_linf(points, points)
    num = np.abs(losses[:, None] - losses[None, :])
    iu = np.triu_indices(points.shape[0], k=1)
    best = float(np.max(num[iu] / np.maximum(D[iu], DIST_FLOOR))) if iu[0].size else 0.0
    if ref_points is not None and ref_points.shape[0]:
        D = _pairwise_linf(points, ref_points)
        num = np.abs(losses[:, None] - ref_losses[None, :])
        best = max(best, float(np.max(num / np.maximum(D, DIST_FLOOR))))
    return best


def verify_theorem(model: PromptedClassifier, x, y, population, ball: PerturbationBall, n_samples: int,
                   stream: RandomStream) -> TheoremCheckReport:
    """Empirical region-bound check around one example.

    The Lipschitz constant is fitted on the first half of the uniform samples
    (plus the population) and the bound is tested on the second half.
    """
    if n_samples < 100:
        raise ValueError("verify_theorem needs n_samples >= 100")
    x = np.asarray(x, dtype=np.float64)
    members = np.atleast_2d(getattr(population, "deltas", population)).astype(np.float64)
    member_loss = np.atleast_1d(loss_ce(model, x + members, y))
    gamma = float(np.mean(member_loss))
    degenerate = bool(np.all(members == members[0]))

    samples = stream.uniform(-ball.epsilon, ball.epsilon, (n_samples, x.shape[0]))
    sample_loss = np.atleast_1d(loss_ce(model, x + samples, y))
    half = n_samples // 2
    cal, held = samples[:half], samples[half:]
    cal_loss, held_loss = sample_loss[:half], sample_loss[half:]

    L_hat = lipschitz_estimate(cal, cal_loss, members, member_loss)
    eta = float(np.max(np.min(_pairwise_linf(samples, members), axis=1)))
    excess = held_loss - (gamma + L_hat * eta)
    violation_rate = float(np.mean(excess > BOUND_SLACK))
    return TheoremCheckReport(gamma=gamma, L_hat=L_hat, eta_cover=eta, samples=n_samples,
                              violation_rate=violation_rate, max_excess=float(np.max(excess)),
                              degenerate=degenerate)
