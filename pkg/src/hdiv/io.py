"""CSV schemas, configuration files and run reports."""

from __future__ import annotations

import fnmatch
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from hdiv.demand import DemandPanel
from hdiv.exceptions import ConfigurationError, InputError
from hdiv.orthogonal_iv import IVDataset

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "SCHEMA_VERSION",
    "CsvSchemaMap",
    "parse_schema",
    "read_table",
    "load_iv_dataset",
    "load_demand_panel",
    "load_config",
    "RunReport",
]

SCHEMA_VERSION = 1
SINGLE_ROLES = (
    "outcome",
    "endogenous",
    "market_id",
    "firm_id",
    "product_id",
    "share",
    "outside_share",
    "price",
)
MULTI_ROLES = ("control", "instrument")


@dataclass
class CsvSchemaMap:
    """Column-to-role assignments.

    Keys may be shell-style patterns (``x_*``) that expand against the
    CSV header. Roles are ``outcome``, ``endogenous``, ``control``,
    ``instrument``, ``market_id``, ``firm_id``, ``product_id``,
    ``share``, ``outside_share``, ``price`` and ``characteristic:<name>``.
    """

    roles: dict

    def __post_init__(self):
        for col, role in self.roles.items():
            if role in SINGLE_ROLES or role in MULTI_ROLES:
                continue
            if role.startswith("characteristic:") and role.split(":", 1)[1]:
                continue
            raise InputError(f"unknown role {role!r} for column {col!r}")

    def resolve(self, header) -> dict:
        """Expand patterns against ``header``; returns ``{role: [columns]}`` in header order."""
        header = list(header)
        out: dict[str, list] = {}
        for key, role in self.roles.items():
            matches = [c for c in header if fnmatch.fnmatchcase(c, key)]
            if not matches:
                raise InputError(f"schema column {key!r} not found in CSV header")
            for c in matches:
                bucket = out.setdefault(role, [])
                if c not in bucket:
                    bucket.append(c)
        order = {c: i for i, c in enumerate(header)}
        for cols in out.values():
            cols.sort(key=order.__getitem__)
        for role in SINGLE_ROLES:
            if len(out.get(role, [])) > 1:
                raise InputError(f"role {role!r} assigned to several columns: {out[role]}")
        seen: dict[str, str] = {}
        for role, cols in out.items():
            for c in cols:
                if c in seen:
                    raise InputError(f"column {c!r} has two roles: {seen[c]!r} and {role!r}")
                seen[c] = role
        return out


def parse_schema(text: str) -> CsvSchemaMap:
    """Schema from a JSON file path, a JSON object string, or ``col=role,col=role``."""
    text = text.strip()
    if os.path.isfile(text):
        try:
            roles = json.loads(Path(text).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"schema file {text!r} is not valid JSON: {exc}") from exc
    elif text.startswith("{"):
        try:
            roles = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InputError(f"schema is not valid JSON: {exc}") from exc
    else:
        roles = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in item:
                raise InputError(f"schema entry {item!r} is not of the form column=role")
            col, role = (s.strip() for s in item.split("=", 1))
            roles[col] = role
    if not isinstance(roles, dict) or not roles:
        raise InputError("schema must map at least one column to a role")
    return CsvSchemaMap({str(k): str(v) for k, v in roles.items()})


def read_table(path) -> pd.DataFrame:
    """Read a comma-separated UTF-8 file with a header row."""
    try:
        frame = pd.read_csv(path, sep=",", encoding="utf-8", dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputError(f"cannot parse {path}: {exc}") from exc
    return frame


def _numeric(frame: pd.DataFrame, col: str) -> np.ndarray:
    vals = pd.to_numeric(frame[col].str.strip(), errors="coerce").to_numpy(dtype=float)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        i = int(bad[0])
        # header is line 1
        raise InputError(f"non-numeric value {frame[col].iloc[i]!r} in column {col!r}, line {i + 2}")
    return vals


def _matrix(frame, cols):
    if not cols:
        return np.empty((len(frame), 0))
    return np.column_stack([_numeric(frame, c) for c in cols])


@dataclass
class LoadedIV:
    data: IVDataset
    control_names: list
    instrument_names: list
    share: np.ndarray | None = None


def load_iv_dataset(path, schema: CsvSchemaMap, *, intercept: bool = True) -> LoadedIV:
    """Build an ``IVDataset`` from a CSV.

    With ``intercept`` a constant control is used as the unpenalized
    intercept, and one named ``const`` is added if none is present.
    """
    frame = read_table(path)
    roles = schema.resolve(frame.columns)
    for role in ("outcome", "endogenous"):
        if len(roles.get(role, [])) != 1:
            raise InputError(f"fit needs exactly one {role!r} column")
    n = len(frame)
    if n < 3:
        raise InputError(f"need at least 3 rows, found {n}")
    y = _numeric(frame, roles["outcome"][0])
    d = _numeric(frame, roles["endogenous"][0])
    cnames = list(roles.get("control", []))
    X = _matrix(frame, cnames)
    inames = list(roles.get("instrument", []))
    Z = _matrix(frame, inames)
    share = _numeric(frame, roles["share"][0]) if roles.get("share") else None
    idx = None
    if intercept:
        const = [j for j in range(X.shape[1]) if np.all(X[:, j] == X[0, j]) and X[0, j] != 0]
        if const:
            idx = const[0]
        else:
            X = np.column_stack([np.ones(n), X])
            cnames = ["const"] + cnames
            idx = 0
    if X.shape[1] == 0:
        raise InputError("no controls: add control columns or use --intercept")
    return LoadedIV(IVDataset(y, d, X, Z, intercept_index=idx), cnames, inames, share)


def load_demand_panel(path, schema: CsvSchemaMap) -> DemandPanel:
    """Build a ``DemandPanel``; the outside share defaults to one minus inside shares."""
    frame = read_table(path)
    roles = schema.resolve(frame.columns)
    for role in ("market_id", "firm_id", "share", "price"):
        if not roles.get(role):
            raise InputError(f"demand panel needs a {role!r} column")
    if len(frame) == 0:
        raise InputError("demand panel has no rows")
    chars = {}
    for role, cols in roles.items():
        if role.startswith("characteristic:"):
            chars[role.split(":", 1)[1]] = _numeric(frame, cols[0])
    outside = _numeric(frame, roles["outside_share"][0]) if roles.get("outside_share") else None
    product = frame[roles["product_id"][0]].to_numpy() if roles.get("product_id") else None
    return DemandPanel(
        market=frame[roles["market_id"][0]].to_numpy(),
        firm=frame[roles["firm_id"][0]].to_numpy(),
        share=_numeric(frame, roles["share"][0]),
        outside_share=outside,
        price=_numeric(frame, roles["price"][0]),
        characteristics=pd.DataFrame(chars),
        product=product,
    )


def load_config(path) -> dict:
    """Key-value configuration from a ``.json`` or ``.toml`` file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    raw = p.read_bytes()
    try:
        if p.suffix.lower() == ".toml":
            values = tomllib.loads(raw.decode("utf-8"))
        else:
            values = json.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigurationError("config must be a key-value document")
    return values


@dataclass
class RunReport:
    """Estimates from one ``fit`` call in table, JSON or CSV form.

    ``timing`` is kept out of the JSON and CSV outputs so that identical
    inputs give identical files.
    """

    command: str
    estimates: list
    config: dict = field(default_factory=dict)
    timing: float = 0.0

    def to_dict(self) -> dict:
        import numba
        import scipy

        from hdiv import __version__

        return {
            "schema_version": SCHEMA_VERSION,
            "command": self.command,
            "config": self.config,
            "versions": {
                "hdiv": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "numba": numba.__version__,
            },
            "estimates": self.estimates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"

    def to_csv(self) -> str:
        cols = ["method", "alpha_hat", "std_error", "ci_lower", "ci_upper", "level", "n", "inelastic_count", "error"]
        rows = [",".join(cols)]
        for est in self.estimates:
            cells = []
            for c in cols:
                v = est.get(c, "")
                cells.append("" if v is None else (repr(v) if isinstance(v, float) else str(v)))
            rows.append(",".join(_csv_cell(c) for c in cells))
        return "\n".join(rows) + "\n"

    def render_table(self) -> str:
        head = f"{'Method':<22}{'Estimate':>10}{'SE':>9}{'CI low':>10}{'CI high':>10}"
        lines = [head, "-" * len(head)]
        notes = []
        for est in self.estimates:
            name = est["method"]
            if est.get("error"):
                lines.append(f"{name:<22}  refused: {est['error']}")
                continue
            lines.append(
                f"{name:<22}{est['alpha_hat']:>10.3f}{est['std_error']:>9.3f}"
                f"{est['ci_lower']:>10.3f}{est['ci_upper']:>10.3f}"
            )
            sets = " u ".join(f"[{_num(a)}, {_num(b)}]" for a, b in est.get("score_set", []))
            notes.append(f"{name}: score set {sets or 'empty'}")
            if est.get("inelastic_count") is not None:
                notes.append(f"{name}: inelastic products {est['inelastic_count']}")
            for step, cols in est.get("selected", {}).items():
                notes.append(f"{name}: {step} selects {len(cols)}: {', '.join(cols)}")
        return "\n".join(lines + [""] + notes) + "\n"


def _num(x):
    return "-inf" if x == -np.inf else "inf" if x == np.inf else f"{x:.3f}"


def _csv_cell(text: str) -> str:
    if any(ch in text for ch in ',"\n'):
        return '"' + text.replace('"', '""') + '"'
    return text
