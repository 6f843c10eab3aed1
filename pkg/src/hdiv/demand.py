"""Logit demand helpers for product-level market data.

The estimating equation is ``log(s_it) - log(s_0t) = alpha p_it + x_it' beta + e_it``.
``p_it`` is endogenous. Instruments are sums of the characteristics of
other products. This module builds the outcome, expands the
characteristics into a larger control set, forms the sum instruments and
turns a price coefficient into own-price elasticities.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from hdiv.exceptions import HdivError, InputError

__all__ = [
    "DemandPanel",
    "ExpansionRecipe",
    "ElasticityReport",
    "build_logit_outcome",
    "expand_characteristics",
    "build_sum_instruments",
    "elasticity_report",
]

SHARE_SLACK = 1e-9


@dataclass(frozen=True)
class DemandPanel:
    """One row per product and market.

    Parameters
    ----------
    market, firm : array_like
        Market and firm identifiers (any hashable values).
    share : array_like
        Inside market share of each product, strictly inside (0, 1).
    outside_share : array_like or None
        Share of the outside good in the row's market. If omitted it is
        ``1 - sum of inside shares`` within the market.
    price : array_like
    characteristics : pandas.DataFrame
        Named product characteristics, one row per product.
    product : array_like, optional
        Product identifiers; defaults to the row position.
    """

    market: np.ndarray
    firm: np.ndarray
    share: np.ndarray
    outside_share: np.ndarray | None
    price: np.ndarray
    characteristics: pd.DataFrame
    product: np.ndarray | None = None

    def __post_init__(self):
        market = np.asarray(self.market)
        n = market.shape[0]
        firm = np.asarray(self.firm)
        product = np.arange(n) if self.product is None else np.asarray(self.product)
        share = np.asarray(self.share, dtype=float)
        price = np.asarray(self.price, dtype=float)
        chars = pd.DataFrame(self.characteristics).reset_index(drop=True)
        for name, arr in (("firm", firm), ("product", product), ("share", share), ("price", price)):
            if arr.shape[0] != n:
                raise InputError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if len(chars) != n:
            raise InputError(f"characteristics have {len(chars)} rows, expected {n}")
        if not np.all(np.isfinite(price)):
            raise InputError(f"non-finite price in row {int(np.flatnonzero(~np.isfinite(price))[0])}")
        bad = np.flatnonzero(~((share > 0) & (share < 1)))
        if bad.size:
            raise InputError(f"share must lie in (0, 1); row {int(bad[0])} has {share[bad[0]]!r}")
        totals = pd.Series(share).groupby(market).transform("sum").to_numpy()
        if self.outside_share is None:
            outside = 1.0 - totals
        else:
            outside = np.asarray(self.outside_share, dtype=float)
            if outside.shape[0] != n:
                raise InputError(f"outside_share has {outside.shape[0]} rows, expected {n}")
        bad = np.flatnonzero(~((outside > 0) & (outside < 1)))
        if bad.size:
            raise InputError(f"outside share must lie in (0, 1); row {int(bad[0])} has {outside[bad[0]]!r}")
        over = np.flatnonzero(totals + outside > 1 + SHARE_SLACK)
        if over.size:
            raise InputError(f"inside plus outside shares exceed one in market {market[over[0]]!r}")
        keys = pd.DataFrame({"m": market, "p": product})
        dup = keys.duplicated()
        if dup.any():
            i = int(np.flatnonzero(dup.to_numpy())[0])
            raise InputError(f"duplicate (market, product) pair in row {i}: {(market[i], product[i])!r}")
        for col in chars.columns:
            vals = pd.to_numeric(chars[col], errors="coerce").to_numpy(dtype=float)
            if not np.all(np.isfinite(vals)):
                i = int(np.flatnonzero(~np.isfinite(vals))[0])
                raise InputError(f"characteristic {col!r} is missing or non-numeric in row {i}")
            chars[col] = vals
        for name, val in (
            ("market", market),
            ("firm", firm),
            ("product", product),
            ("share", share),
            ("outside_share", outside),
            ("price", price),
            ("characteristics", chars),
        ):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.market.shape[0]

    def take(self, order) -> "DemandPanel":
        """Rows reordered (or subset) by integer positions."""
        order = np.asarray(order)
        return DemandPanel(
            market=self.market[order],
            firm=self.firm[order],
            share=self.share[order],
            outside_share=self.outside_share[order],
            price=self.price[order],
            characteristics=self.characteristics.iloc[order],
            product=self.product[order],
        )


def build_logit_outcome(panel: DemandPanel) -> np.ndarray:
    """``log(s_it) - log(s_0t)`` for every row."""
    return np.log(panel.share) - np.log(panel.outside_share)


@dataclass(frozen=True)
class ExpansionRecipe:
    """Which columns to emit when expanding product characteristics.

    The output order is: ``base`` columns, the trend, squares and cubes of
    each ``continuous`` column (and of the trend), then products of every
    pair of non-constant base columns and the trend.

    ``constant`` names the intercept column. It is generated as ones when
    absent from the panel and never enters polynomials or interactions.
    """

    base: tuple = ("const", "air", "hpwt", "mpd", "space")
    continuous: tuple = ("hpwt", "mpd", "space")
    include_trend: bool = True
    powers: tuple = (2, 3)
    interactions: bool = True
    constant: str | None = "const"

    def __post_init__(self):
        missing = set(self.continuous) - set(self.base)
        if missing:
            raise InputError(f"continuous columns not among base columns: {sorted(missing)}")
        if any(int(k) < 2 for k in self.powers):
            raise InputError("polynomial powers must be at least 2")

    @classmethod
    def base_only(cls, base=("const", "air", "hpwt", "mpd", "space"), constant="const") -> "ExpansionRecipe":
        return cls(base=tuple(base), continuous=(), include_trend=False, powers=(), interactions=False, constant=constant)


def _trend(market: np.ndarray) -> np.ndarray:
    # consecutive integers over sorted market ids, then z-scored
    _, idx = np.unique(market, return_inverse=True)
    t = idx.astype(float)
    sd = t.std()
    return (t - t.mean()) / sd if sd > 0 else t - t.mean()


def expand_characteristics(panel: DemandPanel, recipe: ExpansionRecipe | None = None):
    """Build the expanded control matrix.

    Returns
    -------
    matrix : ndarray, shape (n, k)
    names : list of str
    """
    recipe = ExpansionRecipe() if recipe is None else recipe
    cols: dict[str, np.ndarray] = {}
    for name in recipe.base:
        if name in panel.characteristics.columns:
            cols[name] = panel.characteristics[name].to_numpy(dtype=float)
        elif name == recipe.constant:
            cols[name] = np.ones(panel.n)
        else:
            raise InputError(f"characteristic {name!r} not found in panel")
    poly = list(recipe.continuous)
    mixers = [c for c in recipe.base if c != recipe.constant]
    if recipe.include_trend:
        if "trend" in cols:
            raise InputError("a base column is already named 'trend'")
        cols["trend"] = _trend(panel.market)
        poly.append("trend")
        mixers.append("trend")
    expanded = dict(cols)
    for name in poly:
        for k in recipe.powers:
            expanded[f"{name}^{int(k)}"] = cols[name] ** int(k)
    if recipe.interactions:
        for a, b in itertools.combinations(mixers, 2):
            expanded[f"{a}*{b}"] = cols[a] * cols[b]
    names = list(expanded)
    if len(set(names)) != len(names):  # pragma: no cover - dict keys are unique
        raise HdivError("duplicate expanded column names")
    return np.column_stack([expanded[k] for k in names]), names


def build_sum_instruments(panel: DemandPanel, characteristics, names=None):
    """Sums of characteristics over the firm's other products and over rivals.

    For column ``k`` and product ``i`` in market ``t``, ``own_k`` sums over
    the other products of ``i``'s firm in ``t`` and ``rival_k`` sums over
    all products of other firms in ``t``. A constant column therefore
    yields product counts.

    Returns
    -------
    matrix : ndarray, shape (n, 2k)
        All ``own_`` columns followed by all ``rival_`` columns.
    names : list of str
    """
    W = np.asarray(characteristics, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != panel.n:
        raise InputError(f"characteristic matrix has {W.shape[0]} rows, expected {panel.n}")
    names = [f"x{j}" for j in range(W.shape[1])] if names is None else list(names)
    frame = pd.DataFrame(W)
    firm_tot = frame.groupby([panel.market, panel.firm], sort=False).transform("sum").to_numpy()
    market_tot = frame.groupby(panel.market, sort=False).transform("sum").to_numpy()
    own = firm_tot - W
    rival = market_tot - firm_tot
    return np.hstack([own, rival]), [f"own_{c}" for c in names] + [f"rival_{c}" for c in names]


@dataclass
class ElasticityReport:
    """Own-price elasticities ``alpha * p * (1 - s)`` per row."""

    alpha_hat: float
    elasticities: np.ndarray
    inelastic_count: int
    table: pd.DataFrame = field(repr=False)


def elasticity_report(panel: DemandPanel, alpha_hat: float) -> ElasticityReport:
    """Logit own-price elasticities and the number of inelastic products.

    ``table`` lists market, product, price, share and elasticity sorted by
    elasticity (most elastic first).
    """
    e = float(alpha_hat) * panel.price * (1.0 - panel.share)
    table = pd.DataFrame(
        {
            "market": panel.market,
            "product": panel.product,
            "price": panel.price,
            "share": panel.share,
            "elasticity": e,
        }
    ).sort_values("elasticity", kind="mergesort")
    return ElasticityReport(float(alpha_hat), e, int(np.sum(np.abs(e) < 1)), table.reset_index(drop=True))
