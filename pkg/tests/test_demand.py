import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdiv.demand import (
    DemandPanel,
    ExpansionRecipe,
    build_logit_outcome,
    build_sum_instruments,
    elasticity_report,
    expand_characteristics,
)
from hdiv.exceptions import InputError

BLP_COLS = ["air", "hpwt", "mpd", "space"]


def _panel(rng, markets=4, per_market=6, firms=3):
    rows = []
    for t in range(markets):
        shares = rng.dirichlet(np.ones(per_market + 1))
        for i in range(per_market):
            rows.append(
                dict(
                    market=1971 + t,
                    firm=int(rng.integers(firms)),
                    share=shares[i],
                    price=float(rng.uniform(3, 30)),
                    air=float(rng.integers(2)),
                    hpwt=float(rng.uniform(0.2, 0.6)),
                    mpd=float(rng.uniform(1, 4)),
                    space=float(rng.uniform(1, 1.6)),
                )
            )
    df = pd.DataFrame(rows)
    return DemandPanel(df.market, df.firm, df.share, None, df.price, df[BLP_COLS])


def _fixture():
    chars = pd.DataFrame({"w": [1.0, 2.0, 4.0], "air": [1.0, 0.0, 1.0]})
    return DemandPanel(["m", "m", "m"], ["F1", "F1", "F2"], [0.1, 0.2, 0.3], [0.4] * 3, [5.0, 6.0, 7.0], chars, ["a", "b", "c"])


# -- outcome ---------------------------------------------------------------


def test_logit_outcome_values():
    chars = pd.DataFrame({"x": [0.0, 1.0, 2.0]})
    panel = DemandPanel([1, 1, 2], [1, 1, 1], [0.2, 0.2 * math.e, 0.3], [0.2, 0.2, 0.5], [1, 1, 1], chars)
    np.testing.assert_allclose(build_logit_outcome(panel), [0.0, 1.0, math.log(0.3 / 0.5)])


def test_logit_fixture_log_point_four():
    panel = DemandPanel([1], [1], [0.2], [0.5], [1.0], pd.DataFrame({"x": [0.0]}))
    assert build_logit_outcome(panel)[0] == pytest.approx(-0.9162907318741551, abs=1e-12)


def test_outside_share_defaults_to_remainder():
    panel = DemandPanel([1, 1, 2], [1, 2, 1], [0.1, 0.3, 0.5], None, [1, 1, 1], pd.DataFrame({"x": [0, 0, 0]}))
    np.testing.assert_allclose(panel.outside_share, [0.6, 0.6, 0.5])


@pytest.mark.parametrize(
    "kwargs,match",
    [
        (dict(share=[0.0, 0.2]), "row 0"),
        (dict(share=[0.2, 1.2]), "row 1"),
        (dict(outside_share=[0.9, 0.9]), "exceed"),
        (dict(product=[7, 7]), "duplicate"),
        (dict(characteristics=pd.DataFrame({"x": [1.0, "bad"]})), "non-numeric"),
    ],
)
def test_panel_validation(kwargs, match):
    base = dict(
        market=[1, 1],
        firm=[1, 2],
        share=[0.2, 0.3],
        outside_share=[0.5, 0.5],
        price=[1.0, 2.0],
        characteristics=pd.DataFrame({"x": [1.0, 2.0]}),
    )
    base.update(kwargs)
    with pytest.raises(InputError, match=match):
        DemandPanel(**base)


# -- expansion ----------------------------------------------------------------


def test_base_only_is_identity(rng):
    panel = _panel(rng)
    X, names = expand_characteristics(panel, ExpansionRecipe.base_only())
    assert names == ["const", "air", "hpwt", "mpd", "space"]
    np.testing.assert_array_equal(X[:, 0], 1.0)
    np.testing.assert_array_equal(X[:, 1:], panel.characteristics[BLP_COLS].to_numpy())


def test_default_recipe_has_24_columns(rng):
    X, names = expand_characteristics(_panel(rng))
    assert X.shape[1] == 24 == len(set(names))
    assert names[:6] == ["const", "air", "hpwt", "mpd", "space", "trend"]
    assert "trend^3" in names and "air*trend" in names and "air^2" not in names


def test_two_product_fixture_by_hand():
    chars = pd.DataFrame({"air": [1.0, 0.0], "hpwt": [0.5, 0.25], "mpd": [2.0, 3.0], "space": [1.2, 1.5]})
    panel = DemandPanel([1990, 1991], ["f", "g"], [0.1, 0.2], None, [10.0, 12.0], chars)
    X, names = expand_characteristics(panel)
    col = dict(zip(names, X[0]))
    # two markets: trend index 0, 1 standardises to -1, +1
    assert col["trend"] == -1.0
    assert col["hpwt^2"] == 0.25 and col["hpwt^3"] == 0.125
    assert col["mpd^3"] == 8.0
    assert col["trend^2"] == 1.0 and col["trend^3"] == -1.0
    assert col["air*hpwt"] == 0.5
    assert col["mpd*space"] == pytest.approx(2.4)
    assert col["space*trend"] == pytest.approx(-1.2)
    col1 = dict(zip(names, X[1]))
    assert col1["air*mpd"] == 0.0 and col1["trend"] == 1.0


def test_expansion_missing_column(rng):
    with pytest.raises(InputError, match="weight"):
        expand_characteristics(_panel(rng), ExpansionRecipe(base=("const", "weight"), continuous=()))


def test_expansion_deterministic(rng):
    panel = _panel(rng)
    a, na = expand_characteristics(panel)
    b, nb = expand_characteristics(panel)
    assert na == nb
    np.testing.assert_array_equal(a, b)


# -- sum instruments -----------------------------------------------------------


def test_sum_instrument_fixture():
    panel = _fixture()
    Z, names = build_sum_instruments(panel, panel.characteristics[["w"]].to_numpy(), ["w"])
    assert names == ["own_w", "rival_w"]
    np.testing.assert_array_equal(Z[0], [2.0, 4.0])
    np.testing.assert_array_equal(Z[2], [0.0, 3.0])


def test_constant_gives_counts():
    panel = _fixture()
    Z, _ = build_sum_instruments(panel, np.ones(3))
    np.testing.assert_array_equal(Z, [[1, 1], [1, 1], [0, 2]])


def test_single_firm_market_has_no_rivals(rng):
    panel = DemandPanel([1] * 3, ["F"] * 3, [0.1, 0.1, 0.1], None, [1, 2, 3], pd.DataFrame({"x": [1.0, 2.0, 3.0]}))
    Z, _ = build_sum_instruments(panel, panel.characteristics.to_numpy())
    np.testing.assert_array_equal(Z[:, 1], 0.0)


def test_blp_counts(rng):
    panel = _panel(rng)
    X, names = expand_characteristics(panel)
    Z, _ = build_sum_instruments(panel, X, names)
    assert Z.shape[1] == 48
    Xb, nb = expand_characteristics(panel, ExpansionRecipe.base_only())
    assert build_sum_instruments(panel, Xb, nb)[0].shape[1] == 10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_sum_identity(seed):
    rng = np.random.default_rng(seed)
    panel = _panel(rng, markets=3, per_market=int(rng.integers(1, 8)))
    X, names = expand_characteristics(panel)
    Z, _ = build_sum_instruments(panel, X, names)
    k = X.shape[1]
    totals = pd.DataFrame(X).groupby(panel.market).transform("sum").to_numpy()
    np.testing.assert_allclose(Z[:, :k] + Z[:, k:] + X, totals, rtol=1e-12, atol=1e-9)


def test_row_permutation_equivariance(rng):
    panel = _panel(rng)
    perm = rng.permutation(panel.n)
    shuffled = panel.take(perm)
    X, names = expand_characteristics(panel)
    Xs, _ = expand_characteristics(shuffled)
    np.testing.assert_allclose(Xs, X[perm], rtol=1e-12)
    Z, _ = build_sum_instruments(panel, X, names)
    Zs, _ = build_sum_instruments(shuffled, Xs, names)
    np.testing.assert_allclose(Zs, Z[perm], rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(build_logit_outcome(shuffled), build_logit_outcome(panel)[perm])


# -- elasticities ---------------------------------------------------------------


def test_elasticity_fixture():
    panel = DemandPanel([1], [1], [0.01], None, [10.0], pd.DataFrame({"x": [0.0]}))
    rep = elasticity_report(panel, -0.2)
    assert rep.elasticities[0] == pytest.approx(-1.98)
    assert rep.inelastic_count == 0


def test_zero_alpha_all_inelastic(rng):
    panel = _panel(rng)
    rep = elasticity_report(panel, 0.0)
    np.testing.assert_array_equal(rep.elasticities, 0.0)
    assert rep.inelastic_count == panel.n


def test_share_near_one_limit():
    panel = DemandPanel([1], [1], [1 - 1e-12], [1e-13], [1e6], pd.DataFrame({"x": [0.0]}))
    assert abs(elasticity_report(panel, -1.0).elasticities[0]) < 1e-5


def test_report_sorted(rng):
    rep = elasticity_report(_panel(rng), -0.1)
    assert rep.table["elasticity"].is_monotonic_increasing
    assert rep.inelastic_count == int(np.sum(np.abs(rep.elasticities) < 1))
