"""A frozen cosine classifier whose only trainable part is an input-space prompt.

Run: python3 demos/01_model_and_gradients.py
"""
# %%
import numpy as np

from erapt import ModelInitSpec, forward, init_model
from erapt.model import grad_input_ce, grad_prompt_ce, loss_ce
from erapt.numcore import finite_diff_gradient

model = init_model(ModelInitSpec(input_dim=2, prompt_dim=4, feature_dim=8, num_classes=3, init_seed=0))
x = np.array([0.3, -0.7])
z, logits, probs = forward(model, x)
print("features", np.round(z, 3))
print("logits  ", np.round(logits, 3), " (bounded by 1/tau =", round(1 / model.tau_logit, 3), ")")
print("probs   ", np.round(probs, 4))

# %% The prompt starts at zero. Shifting it moves every feature vector.
shifted = model.with_prompt([0.5, 0.0, -0.5, 0.2])
print("loss at zero prompt ", loss_ce(model, x, 2))
print("loss at moved prompt", loss_ce(shifted, x, 2))

# %% Analytic gradients against central differences. A soft temperature keeps
# the loss away from saturation, where double-precision differences stay accurate.
soft = shifted.with_tau(0.5)
fd_x = finite_diff_gradient(lambda v: loss_ce(soft, v, 2), x)
fd_p = finite_diff_gradient(lambda p: loss_ce(soft.with_prompt(p), x, 2), soft.prompt)
print("d loss / d x      ", grad_input_ce(soft, x, 2), "fd", fd_x)
print("d loss / d prompt ", grad_prompt_ce(soft, x, 2), "fd", fd_p)
