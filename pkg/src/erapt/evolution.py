"""Per-example population of adversarial perturbations and its genetic operators.

One generation: PGD step on every member, fitness (CE at the true label),
keep the top third, then refill with a mutated copy of the kept block and a
block of convex-combination children. Member order in the new population is
selected, mutated, crossover.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attack import PerturbationBall, pgd_step, project
from .model import PromptedClassifier, loss_ce
from .numcore import RandomStream

SELECTED = "selected"
MUTATED = "mutated"
CROSSOVER = "crossover"
INITIAL = "initial"


@dataclass(frozen=True)
class EvolutionConfig:
    N: int = 9
    phi: float = 0.1
    iterations: int = 2
    step_size: float = 1 / 255
    init: str = "uniform"  # "uniform" or "zero"

    def __post_init__(self):
        if self.N < 1 or self.N % 3 != 0:
            raise ValueError(f"evolution.N must be a positive multiple of 3, got {self.N}")
        if self.N // 3 < 2:
            raise ValueError(f"evolution.N must satisfy N/3 >= 2, got {self.N}")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError(f"evolution.phi must lie in [0, 1], got {self.phi}")
        if self.iterations < 1:
            raise ValueError("evolution.iterations must be >= 1")
        if not self.step_size > 0:
            raise ValueError("evolution.step_size must be positive")
        if self.init not in ("uniform", "zero"):
            raise ValueError(f"evolution.init must be 'uniform' or 'zero', got {self.init!r}")


@dataclass
class Population:
    deltas: np.ndarray                    # (n, dim)
    ball: PerturbationBall
    fitness: Optional[np.ndarray] = None  # None means stale
    origin: list = field(default_factory=list)  # original member index per row
    tags: list = field(default_factory=list)    # provenance per row

    def __post_init__(self):
        self.deltas = np.atleast_2d(np.asarray(self.deltas, dtype=np.float64))
        n = self.deltas.shape[0]
        if not self.origin:
            self.origin = list(range(n))
        if not self.tags:
            self.tags = [INITIAL] * n

    @property
    def size(self) -> int:
        return self.deltas.shape[0]

    @property
    def fresh(self) -> bool:
        return self.fitness is not None


def init_population(cfg: EvolutionConfig, ball: PerturbationBall, dim: int, stream: RandomStream,
                    x=None) -> Population:
    """N i.i.d. uniform members of the ball (or all zeros with ``cfg.init == 'zero'``)."""
    if cfg.init == "zero":
        deltas = np.zeros((cfg.N, dim))
    else:
        deltas = stream.uniform(-ball.epsilon, ball.epsilon, (cfg.N, dim))
        if ball.input_lo is not None:
            deltas = project(deltas, ball, x)
    return Population(deltas, ball)


def evaluate_fitness(pop: Population, model: PromptedClassifier, x, y) -> Population:
    fit = np.asarray(loss_ce(model, np.asarray(x) + pop.deltas, y), dtype=np.float64)
    return replace(pop, fitness=np.atleast_1d(fit))


def top_third_indices(fitness) -> np.ndarray:
    """Indices of the best third by fitness, descending; ties go to the smaller index."""
    f = np.asarray(fitness, dtype=np.float64)
    order = np.lexsort((np.arange(f.shape[0]), -f))
    return order[: f.shape[0] // 3]


def select_top_third(pop: Population) -> Population:
    if not pop.fresh:
        raise ValueError("select_top_third needs fresh fitness; call evaluate_fitness first")
    idx = top_third_indices(pop.fitness)
    return Population(
        deltas=pop.deltas[idx].copy(),
        ball=pop.ball,
        fitness=pop.fitness[idx].copy(),
        origin=[pop.origin[i] for i in idx],
        tags=[SELECTED] * len(idx),
    )


def mutate(selected: Population, phi: float, stream: RandomStream, x=None) -> Population:
    eps = selected.ball.epsilon
    out = np.empty_like(selected.deltas)
    for i, d in enumerate(selected.deltas):
        xi = stream.uniform(-phi * eps, phi * eps, d.shape)
        out[i] = project(d + xi, selected.ball, x)
    return Population(out, selected.ball, origin=list(selected.origin), tags=[MUTATED] * len(out))


def _pair(k: int, m: int) -> tuple[int, int]:
    """k-th unordered pair (i < j) of range(m) in lexicographic order."""
    for i in range(m - 1):
        row = m - 1 - i
        if k < row:
            return i, i + 1 + k
        k -= row
    raise IndexError("pair index out of range")


def crossover(selected: Population, stream: RandomStream, x=None) -> Population:
    m = selected.size
    if m < 2:
        raise ValueError("crossover needs at least two parents")
    n_pairs = m * (m - 1) // 2
    out = np.empty_like(selected.deltas)
    parents = []
    for c in range(m):
        p1, p2 = _pair(stream.integer(n_pairs), m)
        lam = float(stream.random(1)[0])
        d1, d2 = selected.deltas[p1], selected.deltas[p2]
        # equals lam*d1 + (1-lam)*d2, and is exact when the parents coincide
        out[c] = project(d2 + lam * (d1 - d2), selected.ball, x)
        parents.append((selected.origin[p1], selected.origin[p2]))
    return Population(out, selected.ball, origin=[p[0] for p in parents], tags=[CROSSOVER] * m)


def _union(*blocks: Population) -> Population:
    return Population(
        deltas=np.concatenate([b.deltas for b in blocks]),
        ball=blocks[0].ball,
        origin=[o for b in blocks for o in b.origin],
        tags=[t for b in blocks for t in b.tags],
    )


def evolve_iteration(pop: Population, model: PromptedClassifier, x, y, ball: PerturbationBall,
                     cfg: EvolutionConfig, stream: RandomStream, trace: Optional[list] = None) -> Population:
    """One generation. When ``trace`` is a list, one record is appended to it."""
    stepped = Population(
        pgd_step(model, x, y, pop.deltas, ball, cfg.step_size), ball,
        origin=list(range(pop.size)), tags=list(pop.tags),
    )
    stepped = evaluate_fitness(stepped, model, x, y)
    sel = select_top_third(stepped)
    mut = mutate(sel, cfg.phi, stream, x)
    cross = crossover(sel, stream, x)
    new = _union(sel, mut, cross)
    if trace is not None:
        trace.append({
            "iteration": len(trace) + 1,
            "fitness": stepped.fitness.tolist(),
            "tags": list(pop.tags),
            "selected": [int(i) for i in sel.origin],
            "selected_fitness": sel.fitness.tolist(),
        })
    return new


def final_selected(pop: Population, model: PromptedClassifier, x, y) -> Population:
    return select_top_third(evaluate_fitness(pop, model, x, y))


def run_evolution(model: PromptedClassifier, x, y, ball: PerturbationBall, cfg: EvolutionConfig,
                  stream: RandomStream, trace: Optional[list] = None) -> Population:
    """init_population followed by ``cfg.iterations`` generations; returns the last population."""
    x = np.asarray(x, dtype=np.float64)
    pop = init_population(cfg, ball, x.shape[0], stream.split("init"), x)
    gen_stream = stream.split("generations")
    for _ in range(cfg.iterations):
        pop = evolve_iteration(pop, model, x, y, ball, cfg, gen_stream, trace)
    return pop


def dump_trace(trace: list, path) -> None:
    """Write trace records as JSON lines."""
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
