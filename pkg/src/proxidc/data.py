"""Two-trial individual patient data: container, CSV I/O and design expansions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


class DataValidationError(ValueError):
    """Raised when a dataset violates the two-trial data model."""


def _frozen(arr, dtype=float, ndim=1):
    if arr is None:
        return None
    out = np.array(arr, dtype=dtype, copy=True)
    if ndim == 2 and out.ndim == 1:
        out = out[:, None]
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Row-wise data from a source trial (s=1) and a target trial (s=0).

    Missing optional entries (``a``, ``y``, ``z`` on target rows) are stored as NaN.
    ``e1`` is the known probability of the active arm for source rows.
    """

    s: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    y: np.ndarray
    x: np.ndarray
    w: np.ndarray
    z: np.ndarray | None
    e1: np.ndarray
    x_names: tuple[str, ...] = ()
    w_names: tuple[str, ...] = ()
    z_names: tuple[str, ...] = ()
    levels: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.s)
        set_ = object.__setattr__
        set_(self, "s", _frozen(self.s, np.int8))
        set_(self, "a", _frozen(self.a))
        set_(self, "delta", _frozen(np.ones(n) if self.delta is None else self.delta, np.int8))
        set_(self, "y", _frozen(np.full(n, np.nan) if self.y is None else self.y))
        set_(self, "x", _frozen(self.x, ndim=2))
        set_(self, "w", _frozen(self.w, ndim=2))
        set_(self, "z", _frozen(self.z, ndim=2))
        e1 = np.broadcast_to(np.asarray(self.e1, dtype=float), (n,))
        set_(self, "e1", _frozen(e1))
        if not self.x_names:
            set_(self, "x_names", tuple(f"x_{j + 1}" for j in range(self.x.shape[1])))
        if not self.w_names:
            set_(self, "w_names", tuple(f"w_{j + 1}" for j in range(self.w.shape[1])))
        if self.z is not None and not self.z_names:
            set_(self, "z_names", tuple(f"z_{j + 1}" for j in range(self.z.shape[1])))
        for name in ("a", "delta", "y", "x", "w", "e1"):
            if len(getattr(self, name)) != n:
                raise DataValidationError(f"column block {name!r} has wrong length")
        if self.z is not None and len(self.z) != n:
            raise DataValidationError("column block 'z' has wrong length")

    @property
    def n(self) -> int:
        return len(self.s)

    @property
    def source(self) -> np.ndarray:
        return self.s == 1

    @property
    def target(self) -> np.ndarray:
        return self.s == 0

    @property
    def n0(self) -> int:
        return int(np.sum(self.s == 0))

    @property
    def alpha_hat(self) -> float:
        return self.n0 / self.n

    @property
    def observed(self) -> np.ndarray:
        """Source rows whose outcome is recorded."""
        return (self.s == 1) & (self.delta == 1)

    @property
    def ytilde(self) -> np.ndarray:
        """Transformed outcome on observed source rows, NaN elsewhere."""
        out = np.full(self.n, np.nan)
        m = self.observed
        out[m] = transformed_outcome(self.y[m], self.a[m], self.e1[m])
        return out

    def subset(self, mask) -> "Dataset":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return Dataset(
            s=self.s[idx], a=self.a[idx], delta=self.delta[idx], y=self.y[idx],
            x=self.x[idx], w=self.w[idx], z=None if self.z is None else self.z[idx],
            e1=self.e1[idx], x_names=self.x_names, w_names=self.w_names,
            z_names=self.z_names, levels=dict(self.levels),
        )

    def with_(self, **changes) -> "Dataset":
        return replace(self, **changes)


def transformed_outcome(y, a, e1):
    """(2A-1) Y / e(A|X) for a in {0, 1}, with e1 = P(A=1|X, S=1)."""
    y, a, e1 = np.asarray(y, float), np.asarray(a, float), np.asarray(e1, float)
    return (2 * a - 1) * y / (a * e1 + (1 - a) * (1 - e1))


def validate(ds: Dataset) -> Dataset:
    src, tgt = ds.source, ds.target
    if not np.all((ds.s == 0) | (ds.s == 1)):
        raise DataValidationError("s must be 0 or 1")
    if not tgt.any():
        raise DataValidationError("target trial empty")
    if not src.any():
        raise DataValidationError("source trial empty")
    if np.isnan(ds.x).any():
        raise DataValidationError("x has missing entries")
    if np.isnan(ds.w).any():
        raise DataValidationError("w has missing entries")
    if ds.z is None or np.isnan(ds.z[src]).any():
        raise DataValidationError("z required in source trial")
    a_src = ds.a[src]
    if np.isnan(a_src).any() or not np.all((a_src == 0) | (a_src == 1)):
        raise DataValidationError("a must be 0 or 1 in source trial")
    a_tgt = ds.a[tgt]
    a_tgt = a_tgt[~np.isnan(a_tgt)]
    if not np.all(np.isin(a_tgt, (-1, 0))):
        raise DataValidationError("a must be -1 or 0 in target trial")
    if not np.all((ds.delta == 0) | (ds.delta == 1)):
        raise DataValidationError("delta must be 0 or 1")
    if np.isnan(ds.y[ds.observed]).any():
        raise DataValidationError("y required where s*delta = 1")
    e = ds.e1[src]
    if np.isnan(e).any() or np.any(e <= 0) or np.any(e >= 1):
        raise DataValidationError("e1 must lie strictly inside (0, 1) on source rows")
    return ds


# ---------------------------------------------------------------------------
# CSV ingestion

DEFAULT_SCHEMA = {"s": "s", "a": "a", "delta": "delta", "y": "y",
                  "x": "x_", "w": "w_", "z": "z_", "categorical": ""}


def read_schema(path) -> dict[str, str]:
    """Parse a flat ``key = value`` schema file into a column mapping."""
    schema = dict(DEFAULT_SCHEMA)
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataValidationError(f"bad schema line: {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in DEFAULT_SCHEMA:
            raise DataValidationError(f"unknown schema key {key!r}")
        schema[key] = value
    return schema


def _group(columns, spec: str) -> list[str]:
    # a comma list names columns explicitly; a bare token is a prefix
    if "," in spec or spec in columns:
        return [c.strip() for c in spec.split(",") if c.strip()]
    return [c for c in columns if c.startswith(spec)] if spec else []


def _numeric(df: pd.DataFrame, cols) -> np.ndarray:
    out = np.empty((len(df), len(cols)))
    for j, c in enumerate(cols):
        try:
            out[:, j] = df[c].astype(float).to_numpy()  # exact, unlike to_numeric
        except (ValueError, TypeError) as exc:
            raise DataValidationError(f"non-numeric cell in column {c!r}") from exc
    return out


def read_frame(path, schema: Mapping[str, str] | None = None, s_value: int | None = None,
               categorical_levels: Mapping[str, Sequence] | None = None):
    """Read one CSV into raw arrays keyed by logical block (no validation)."""
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise
    df = df.apply(lambda col: col.str.strip())
    df = df.replace("", np.nan)
    cols = list(df.columns)

    n = len(df)
    if s_value is None:
        if schema["s"] not in cols:
            raise DataValidationError(f"missing mandatory column {schema['s']!r}")
        s = _numeric(df, [schema["s"]])[:, 0]
        if np.isnan(s).any() or not np.all(np.isin(s, (0, 1))):
            raise DataValidationError("s value outside {0,1}")
    else:
        s = np.full(n, float(s_value))

    for key in ("a", "y"):
        if schema[key] not in cols and (s == 1).any():
            raise DataValidationError(f"missing mandatory column {schema[key]!r}")
    a = _numeric(df, [schema["a"]])[:, 0] if schema["a"] in cols else np.full(n, np.nan)
    y = _numeric(df, [schema["y"]])[:, 0] if schema["y"] in cols else np.full(n, np.nan)
    if schema["delta"] in cols:
        delta = _numeric(df, [schema["delta"]])[:, 0]
        delta = np.where(np.isnan(delta), np.where(np.isnan(y), 0.0, 1.0), delta)
    else:
        delta = np.where(np.isnan(y), 0.0, 1.0)

    x_cols = _group(cols, schema["x"])
    w_cols = _group(cols, schema["w"])
    z_cols = _group(cols, schema["z"])
    if not x_cols:
        raise DataValidationError("missing mandatory column group x")
    if not w_cols:
        raise DataValidationError("missing mandatory column group w")
    for c in x_cols + w_cols + z_cols:
        if c not in cols:
            raise DataValidationError(f"missing mandatory column {c!r}")

    cat = [c.strip() for c in schema.get("categorical", "").split(",") if c.strip()]
    levels = {}
    x = np.empty((n, len(x_cols)))
    for j, c in enumerate(x_cols):
        if c in cat:
            known = list((categorical_levels or {}).get(c, ()))
            seen = sorted(set(df[c].dropna()) - set(known))
            lv = tuple(known + seen)
            codes = df[c].map({v: float(i) for i, v in enumerate(lv)})
            x[:, j] = codes.to_numpy(float)
            levels[c] = lv
        else:
            x[:, j] = _numeric(df, [c])[:, 0]
    w = _numeric(df, w_cols)
    z = _numeric(df, z_cols) if z_cols else None
    return dict(s=s, a=a, delta=delta, y=y, x=x, w=w, z=z, x_names=tuple(x_cols),
                w_names=tuple(w_cols), z_names=tuple(z_cols), levels=levels)


def _complete_rows(parts) -> np.ndarray:
    keep = ~np.isnan(parts["x"]).any(axis=1) & ~np.isnan(parts["w"]).any(axis=1)
    if parts["z"] is not None:
        keep &= ~((parts["s"] == 1) & np.isnan(parts["z"]).any(axis=1))
    return keep


def _assemble(parts, e1, drop_incomplete: bool) -> Dataset:
    if drop_incomplete:
        keep = _complete_rows(parts)
        parts = {k: (v[keep] if isinstance(v, np.ndarray) else v) for k, v in parts.items()}
    s = parts["s"]
    if e1 is None:
        a_src = parts["a"][s == 1]
        e_emp = float(np.nanmean(a_src)) if a_src.size else 0.5
        warnings.warn("e1 not supplied; using the empirical treated proportion "
                      f"{e_emp:.4f} in the source trial", stacklevel=3)
        e1 = e_emp
    e1 = np.where(s == 1, e1, np.nan) if np.ndim(e1) == 0 else np.asarray(e1, float)
    return validate(Dataset(e1=e1, **parts))


def load_dataset(path, schema: Mapping[str, str] | None = None, e1=None,
                 drop_incomplete: bool = False) -> Dataset:
    """Load a combined two-trial CSV (with an ``s`` column) into a validated Dataset.

    Empty cells become absent optionals. With ``drop_incomplete`` rows missing any
    x or w entry (or z on a source row) are removed before validation, so the
    target share is computed on the retained rows.
    """
    parts = read_frame(path, schema)
    return _assemble(parts, e1, drop_incomplete)


def load_two_trials(source_path, target_path, schema=None, e1=None,
                    drop_incomplete: bool = False) -> Dataset:
    """Load separate source and target CSVs; the target file may omit z columns."""
    src = read_frame(source_path, schema, s_value=1)
    cat_levels = src["levels"]
    tgt = read_frame(target_path, schema, s_value=0, categorical_levels=cat_levels)
    if src["x_names"] != tgt["x_names"] or src["w_names"] != tgt["w_names"]:
        raise DataValidationError("source and target CSVs disagree on x/w columns")
    # re-read source if the target introduced new categorical levels
    if tgt["levels"] != src["levels"]:
        src = read_frame(source_path, schema, s_value=1, categorical_levels=tgt["levels"])
    z_src = src["z"]
    if z_src is None:
        raise DataValidationError("z required in source trial")
    if tgt["z"] is None:
        z_tgt = np.full((len(tgt["s"]), z_src.shape[1]), np.nan)
    else:
        if tgt["z_names"] != src["z_names"]:
            raise DataValidationError("source and target CSVs disagree on z columns")
        z_tgt = tgt["z"]
    parts = {}
    for k in ("s", "a", "delta", "y", "x", "w"):
        parts[k] = np.concatenate([src[k], tgt[k]])
    parts["z"] = np.vstack([z_src, z_tgt])
    parts.update(x_names=src["x_names"], w_names=src["w_names"], z_names=src["z_names"],
                 levels=tgt["levels"])
    return _assemble(parts, e1, drop_incomplete)


def write_dataset(ds: Dataset, path) -> None:
    """Write a Dataset back to a combined CSV (``repr``-exact floats, empty = missing)."""
    cols = {"s": ds.s, "a": ds.a, "delta": ds.delta, "y": ds.y}
    for j, name in enumerate(ds.x_names):
        col = ds.x[:, j]
        if name in ds.levels:
            lv = ds.levels[name]
            col = np.array([lv[int(v)] for v in col], dtype=object)
        cols[name] = col
    for j, name in enumerate(ds.w_names):
        cols[name] = ds.w[:, j]
    if ds.z is not None:
        for j, name in enumerate(ds.z_names):
            cols[name] = ds.z[:, j]
    df = pd.DataFrame(cols)
    df.to_csv(path, index=False, na_rep="", float_format="%.17g")


def split_by_trial(ds: Dataset) -> tuple[Dataset, Dataset]:
    """Partition into (source, target) parts, preserving row order within each."""
    src, tgt = ds.subset(ds.source), ds.subset(ds.target)
    if src.n == 0 or tgt.n == 0:
        warnings.warn("one trial is empty in this view", stacklevel=2)
    return src, tgt


def misspecify_proxies(ds: Dataset) -> Dataset:
    """Copy with every proxy entry v replaced by |v|^(1/2)."""
    z = None if ds.z is None else np.sqrt(np.abs(ds.z))
    return ds.with_(w=np.sqrt(np.abs(ds.w)), z=z)


# ---------------------------------------------------------------------------
# Basis expansions

BASIS_KINDS = ("linear_zb", "linear_wc", "cubed_wc", "ortho_quad", "raw")


@dataclass(frozen=True)
class BasisSpec:
    """Which design expansion to build.

    ``linear_zb`` -> (1, Z, X); ``linear_wc`` -> (1, W, X); ``cubed_wc`` -> (1, W, X)**3.
    ``ortho_quad`` -> (1, proxy, X~) where numeric x columns enter through an
    orthogonal quadratic basis and ``categorical`` x columns through dummies
    (first level dropped). ``raw`` -> (1, proxy, X) with selected columns.
    ``ortho`` holds the fitted orthogonalization and is filled by :func:`fit_basis`.
    """

    kind: str
    proxy: str | None = None
    x_cols: tuple[int, ...] | None = None
    proxy_cols: tuple[int, ...] | None = None
    categorical: Mapping[int, tuple] = field(default_factory=dict)
    intercept: bool = True
    ortho: tuple | None = None

    def __post_init__(self):
        if self.kind not in BASIS_KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.proxy not in (None, "w", "z"):
            raise ValueError("proxy must be 'w', 'z' or None")

    @property
    def proxy_block(self) -> str | None:
        if self.kind == "linear_zb":
            return "z"
        if self.kind in ("linear_wc", "cubed_wc"):
            return "w"
        return self.proxy


def _proxy_matrix(ds: Dataset, spec: BasisSpec, rows) -> np.ndarray:
    block = spec.proxy_block
    if block is None:
        return np.empty((len(rows), 0))
    mat = ds.w if block == "w" else ds.z
    if mat is None:
        raise DataValidationError("z requested for a row lacking z")
    mat = mat[rows]
    if spec.proxy_cols is not None:
        mat = mat[:, list(spec.proxy_cols)]
    if np.isnan(mat).any():
        raise DataValidationError(f"{block} requested for a row lacking {block}")
    return mat


def _numeric_x_cols(ds: Dataset, spec: BasisSpec) -> list[int]:
    cols = range(ds.x.shape[1]) if spec.x_cols is None else spec.x_cols
    return [j for j in cols if j not in spec.categorical]


def _quad_raw(x: np.ndarray) -> np.ndarray:
    n, p = x.shape
    out = np.empty((n, 1 + 2 * p))
    out[:, 0] = 1.0
    out[:, 1::2] = x
    out[:, 2::2] = x ** 2
    return out


def fit_basis(ds: Dataset, spec: BasisSpec, rows=None) -> BasisSpec:
    """Fit sample-level state (the ortho_quad transform) on ``rows``; other kinds pass through.

    An already fitted spec is returned unchanged unless ``rows`` is given.
    """
    if spec.kind != "ortho_quad" or (spec.ortho is not None and rows is None):
        return spec
    rows = np.arange(ds.n) if rows is None else np.asarray(rows)
    cols = _numeric_x_cols(ds, spec)
    raw = _quad_raw(ds.x[rows][:, cols])
    # sequential Gram-Schmidt via QR; unit mean-square columns
    _, r = np.linalg.qr(raw)
    if np.any(np.abs(np.diag(r)) < 1e-10 * np.sqrt(len(rows))):
        raise DataValidationError("ortho_quad needs >= 3 distinct values per column")
    r_inv = np.linalg.inv(r) * np.sqrt(len(rows))
    return replace(spec, ortho=tuple(map(tuple, r_inv)))


def _x_block(ds: Dataset, spec: BasisSpec, rows) -> np.ndarray:
    if spec.kind != "ortho_quad":
        cols = range(ds.x.shape[1]) if spec.x_cols is None else spec.x_cols
        return ds.x[rows][:, list(cols)]
    if spec.ortho is None:
        spec = fit_basis(ds, spec, rows)
    r_inv = np.asarray(spec.ortho)
    cols = _numeric_x_cols(ds, spec)
    quad = _quad_raw(ds.x[rows][:, cols]) @ r_inv
    parts = [quad[:, 1:]]
    for j, lv in sorted(spec.categorical.items()):
        codes = ds.x[rows, j]
        parts.append(np.column_stack([(codes == k).astype(float) for k in range(1, len(lv))])
                     if len(lv) > 1 else np.empty((len(rows), 0)))
    return np.hstack(parts)


def ortho_quad_columns(ds: Dataset, spec: BasisSpec, rows=None) -> np.ndarray:
    """Intercept plus orthogonal quadratic columns only (no proxies, no dummies)."""
    rows = np.arange(ds.n) if rows is None else np.asarray(rows)
    if spec.ortho is None:
        spec = fit_basis(ds, spec, rows)
    cols = _numeric_x_cols(ds, spec)
    return _quad_raw(ds.x[rows][:, cols]) @ np.asarray(spec.ortho)


def build_basis(ds: Dataset, spec: BasisSpec, rows=None) -> np.ndarray:
    """Evaluate the basis on ``rows`` (default: all rows); returns an (len(rows), k) matrix."""
    rows = np.arange(ds.n) if rows is None else np.asarray(rows)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    blocks = []
    if spec.intercept:
        blocks.append(np.ones((len(rows), 1)))
    blocks.append(_proxy_matrix(ds, spec, rows))
    blocks.append(_x_block(ds, spec, rows))
    out = np.hstack(blocks)
    if spec.kind == "cubed_wc":
        out = out ** 3
    return out
