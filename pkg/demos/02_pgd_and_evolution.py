"""Single-path PGD versus an evolving population of perturbations.

Run: python3 demos/02_pgd_and_evolution.py
"""
# %%
import numpy as np

from erapt import AttackConfig, EvolutionConfig, ModelInitSpec, PerturbationBall, RandomStream, init_model, pgd_attack
from erapt.evolution import final_selected, run_evolution
from erapt.model import loss_ce

model = init_model(ModelInitSpec(2, 4, 8, 2, init_seed=1, tau_logit=0.2))
x, y = np.array([0.4, 0.1]), 0
ball = PerturbationBall(0.1)

# %% PGD: two signed steps, projected back onto the L-inf ball.
delta = pgd_attack(model, x, y, ball, AttackConfig(steps=2, step_size=0.1))
print("clean loss", loss_ce(model, x, y))
print("PGD delta ", delta, "loss", loss_ce(model, x + delta, y))

# %% Evolution: 9 members, each iteration steps them all, keeps the top third,
# then refills with mutated copies and crossovers of the survivors.
trace = []
pop = run_evolution(model, x, y, ball, EvolutionConfig(N=9, phi=0.1, iterations=2, step_size=0.1),
                    RandomStream(0), trace)
for rec in trace:
    print(f"iteration {rec['iteration']}: best {max(rec['fitness']):.4f}, tags {rec['tags'][:3]}...")
survivors = final_selected(pop, model, x, y)
print("survivors used for training:\n", np.round(survivors.deltas, 4))
print("their losses", np.round(survivors.fitness, 4))
print("all inside the ball:", bool(np.max(np.abs(pop.deltas)) <= ball.epsilon))
