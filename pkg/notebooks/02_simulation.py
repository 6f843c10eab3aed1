# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Why the orthogonal moment matters
#
# The default design has 200 observations, 300 controls and 150
# instruments, with coefficients decaying like `1/j^2`. We compare four
# estimators of the coefficient on the endogenous regressor:
#
# * **Oracle** plugs in the true nuisance parameters,
# * **Naive 1** replaces every Lasso step by stepwise regression,
# * **Naive 2** uses the raw first-stage fit as instrument,
# * **Double-Selection** is the orthogonal-moment estimator.
#
# `REPS` is kept small so the script runs in under a minute. The shipped
# table uses 1000 replications (`hdiv replicate-sim`).

# %%
import numpy as np

from hdiv.monte_carlo import SimulationConfig, orthogonality_check, run_simulation

REPS = 100
config = SimulationConfig(replications=REPS)
summary = run_simulation(config)
print(summary.render_table(reference=True))

# %% [markdown]
# Stepwise selection both misses relevant controls and lets in noise,
# so its intervals are far too narrow. Naive 2 is less distorted but
# still over-rejects.

# %%
for name in ("naive_stepwise", "double_selection"):
    est = np.array([r.alpha_hat for r in summary.records if r.estimator == name and r.ok])
    se = np.array([r.std_error for r in summary.records if r.estimator == name and r.ok])
    print(f"{name:<18} sd of estimates {est.std():.3f}   median reported se {np.median(se):.3f}")

# %% [markdown]
# ## Local insensitivity to nuisance errors
#
# Nudge the nuisance parameters away from the truth along random
# directions. The orthogonal moment barely moves. The naive moment
# responds to errors in the outcome regression at first order.

# %%
res = orthogonality_check(config, replications=50, n_directions=10)
print(f"orthogonal moment slope {res['orthogonal_derivative']:.4f}")
print(f"naive moment slope      {res['naive_theta_derivative']:.4f}")
print(f"3 x Monte Carlo se      {3 * res['moment_mc_se']:.4f}")
