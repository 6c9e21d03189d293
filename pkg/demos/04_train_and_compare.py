"""Prompt tuning on two moons with the evolved population versus one PGD path.

Run: python3 demos/04_train_and_compare.py   (about half a minute)
"""
# %%
from erapt import (
    AttackConfig,
    EvolutionConfig,
    ModelInitSpec,
    PerturbationBall,
    RandomStream,
    TrainConfig,
    gen_two_moons,
    init_model,
    robust_accuracy,
    run_training,
)

train = gen_two_moons(100, 0.1, RandomStream(0))
test = gen_two_moons(100, 0.1, RandomStream(1))
eps = 0.1
ball = PerturbationBall(eps)

# %%
for mode in ("er_apt", "single_pgd_baseline"):
    cfg = TrainConfig(epochs=5, lr_init=0.035, ball=ball, mode=mode, seed=0, eval_steps=0,
                      attack=AttackConfig(2, eps), evolution=EvolutionConfig(9, 0.1, 2, eps))
    model, report = run_training(cfg, train, init_model(ModelInitSpec(2, 8, 16, 2, init_seed=0)))
    rob = robust_accuracy(model, test, ball, AttackConfig(20, eps / 4))
    last = report.records[-1]
    print(f"{mode:<20} train acc {last.natural_acc:.3f}  test PGD-20 robust acc {rob:.3f}  "
          f"final weights ({last.alpha:.3f}, {last.beta:.3f})")
