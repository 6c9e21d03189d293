"""How the clean and robust loss weights follow the per-epoch learning speeds.

Run: python3 demos/03_dynamic_weighting.py
"""
# %%
from erapt import LossWeightState, epoch_weighting

# Made-up epoch means: the clean loss stalls early while the robust loss keeps falling.
epochs = [(1.00, 0.50), (0.60, 0.45), (0.58, 0.30), (0.57, 0.20), (0.57, 0.18)]

state = LossWeightState.initial(alpha_init=1.0, beta_init=1.5, temperature=1.0)
print("epoch  alpha   beta    alpha/1.0 + beta/1.5")
for k, (ce, kl) in enumerate(epochs, start=1):
    print(f"{k:>5}  {state.alpha:.4f}  {state.beta:.4f}  {state.alpha + state.beta / 1.5:.12f}")
    state = epoch_weighting(state.accumulate(ce, kl, 1))
# The term whose loss ratio is closer to 1 (slower progress) gains weight.
