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
# # Logit demand with selected controls and instruments
#
# Product-level car data are not bundled. Set `HDIV_BLP_CSV` to a CSV
# with columns `market_ids, firm_ids, shares, prices, air, hpwt, mpd,
# space` to run on real data. Otherwise a synthetic market with the same
# layout is generated.

# %%
import os

import numpy as np
import pandas as pd

from hdiv.demand import (
    DemandPanel,
    ExpansionRecipe,
    build_logit_outcome,
    build_sum_instruments,
    elasticity_report,
    expand_characteristics,
)
from hdiv.orthogonal_iv import IVDataset, estimate_double_selection, estimate_ols, estimate_tsls


def synthetic_panel(seed=0, markets=20, firms=8):
    rng = np.random.default_rng(seed)
    rows = []
    for t in range(markets):
        for i in range(int(rng.integers(20, 60))):
            rows.append(dict(market_ids=1971 + t, firm_ids=int(rng.integers(firms)), air=float(rng.random() < 0.2 + 0.03 * t),
                             hpwt=rng.uniform(0.25, 0.6), mpd=rng.uniform(1.5, 4.0), space=rng.uniform(1.0, 1.6)))
    df = pd.DataFrame(rows)
    xi = 0.5 * rng.standard_normal(len(df))
    # markups shrink when rivals offer more and better products
    rival_hpwt = df.groupby("market_ids").hpwt.transform("sum") - df.groupby(["market_ids", "firm_ids"]).hpwt.transform("sum")
    cost = 2 + 10 * df.hpwt + 3 * df.air + rng.standard_normal(len(df))
    df["prices"] = cost + 0.8 * xi + 8.0 - 0.4 * rival_hpwt
    utility = -0.2 * df.prices + 2 * df.hpwt + df.air + 0.3 * df.mpd + xi - 3
    expu = np.exp(utility)
    df["shares"] = expu / (1 + expu.groupby(df.market_ids).transform("sum"))
    return df


path = os.environ.get("HDIV_BLP_CSV")
df = pd.read_csv(path) if path else synthetic_panel()
chars = ["air", "hpwt", "mpd", "space"]
panel = DemandPanel(df.market_ids, df.firm_ids, df.shares, None, df.prices, df[chars])
y = build_logit_outcome(panel)
print(panel.n, "products in", len(np.unique(panel.market)), "markets")

# %% [markdown]
# ## Original variables
#
# Five controls (constant plus four characteristics) and ten sum
# instruments: for each characteristic, its total over the firm's other
# products and over rival products.

# %%
Xb, xb_names = expand_characteristics(panel, ExpansionRecipe.base_only())
Zb, zb_names = build_sum_instruments(panel, Xb, xb_names)
base = IVDataset(y, panel.price, Xb, Zb, intercept_index=0)

results = {
    "OLS": estimate_ols(base),
    "2SLS": estimate_tsls(y, panel.price, Xb, Zb),
    "selected, original": estimate_double_selection(base),
}

# %% [markdown]
# ## Expanded variables
#
# Trend, squares and cubes of the continuous characteristics and all
# pairwise interactions give 24 controls and 48 instruments.

# %%
Xe, xe_names = expand_characteristics(panel)
Ze, ze_names = build_sum_instruments(panel, Xe, xe_names)
print(len(xe_names), "controls,", len(ze_names), "instruments")
results["selected, expanded"] = estimate_double_selection(IVDataset(y, panel.price, Xe, Ze, intercept_index=0))

# %%
for label, est in results.items():
    rep = elasticity_report(panel, est.alpha_hat)
    print(f"{label:<20} {est.alpha_hat:+.3f} ({est.std_error:.3f})   inelastic products: {rep.inelastic_count}")

# %%
counts = results["selected, expanded"].diagnostics["selection_counts"]
print(counts)
