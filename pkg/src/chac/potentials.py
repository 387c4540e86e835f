"""Admissible nonlinearities for the coupled fourth/second-order system.

The local energy variation g and the couplings f_0, f_1, f_2, f_3 are stored
as truncated power series with space/time-dependent coefficients. Structural
constraints are enforced at construction:

* g has no constant term (series starts at degree 1),
* among the degree-1 terms of f_0 only the coefficient of z_0 may be nonzero,
* f_i (i = 1, 2, 3) has a diagonal linear part b_i * z_i and no monomials in
  z_0 alone.
"""

from __future__ import annotations

import ast
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import PeriodicGrid, ScalarField
from .interp import barycentric_eval, barycentric_weights

#: pointwise magnitude beyond which nonlinearity evaluation is treated as blow-up
OVERFLOW_LIMIT = 1e100

MultiIndex = tuple[int, int, int, int]


class EvaluationOverflowError(FloatingPointError):
    """A nonlinearity evaluation exceeded the overflow limit."""


# ---------------------------------------------------------------------------
# expression mini-grammar
# ---------------------------------------------------------------------------

_FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_VARIABLES = ("x1", "x2", "x3", "t")
_ALLOWED_BINOPS = (ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow)
_ALLOWED_UNARY = (ast.UAdd, ast.USub)


def _validate_node(node: ast.AST) -> None:
    if isinstance(node, ast.Expression):
        _validate_node(node.body)
    elif isinstance(node, ast.BinOp) and isinstance(node.op, _ALLOWED_BINOPS):
        _validate_node(node.left)
        _validate_node(node.right)
    elif isinstance(node, ast.UnaryOp) and isinstance(node.op, _ALLOWED_UNARY):
        _validate_node(node.operand)
    elif isinstance(node, ast.Call):
        if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCTIONS):
            raise ValueError(f"unknown function in expression: {ast.dump(node.func)}")
        if len(node.args) != 1 or node.keywords:
            raise ValueError("expression functions take exactly one argument")
        _validate_node(node.args[0])
    elif isinstance(node, ast.Name):
        if node.id not in _VARIABLES and node.id != "pi":
            raise ValueError(f"unknown name in expression: {node.id!r}")
    elif isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)):
            raise ValueError(f"non-numeric constant in expression: {node.value!r}")
    else:
        raise ValueError(f"unsupported syntax in expression: {type(node).__name__}")


def parse_expression(expr: str):
    """Compile an expression in the coefficient grammar.

    Grammar: +, -, *, /, ^ (power), sin, cos, exp, the constant pi and the
    variables x1..x3, t. Returns fn(coords, t) -> ndarray.
    """
    tree = ast.parse(expr.replace("^", "**"), mode="eval")
    _validate_node(tree)
    code = compile(tree, "<coefficient>", "eval")

    def fn(coords, t):
        env = {"t": t, "pi": np.pi, **_FUNCTIONS}
        for name, c in zip(_VARIABLES, coords):
            env[name] = c
        return eval(code, {"__builtins__": {}}, env)  # noqa: S307 - whitelisted AST

    return fn


# ---------------------------------------------------------------------------
# coefficient fields
# ---------------------------------------------------------------------------


class CoefficientField:
    """A coefficient a(x, t): closed form, static grid samples, or time samples."""

    __slots__ = ("_fn", "descriptor")

    def __init__(self, fn, descriptor: str = "<callable>"):
        self._fn = fn
        self.descriptor = descriptor

    @classmethod
    def constant(cls, value: float) -> "CoefficientField":
        value = float(value)
        return cls(lambda coords, t: value, descriptor=repr(value))

    @classmethod
    def from_expression(cls, expr: str) -> "CoefficientField":
        return cls(parse_expression(expr), descriptor=expr)

    @classmethod
    def from_grid_values(cls, values: np.ndarray | ScalarField) -> "CoefficientField":
        if isinstance(values, ScalarField):
            values = values.values
        values = np.asarray(values, dtype=float)
        return cls(lambda coords, t: values, descriptor="<grid samples>")

    @classmethod
    def from_time_samples(cls, times, fields) -> "CoefficientField":
        """Time-indexed grid samples with barycentric Lagrange interpolation in t."""
        times = np.asarray(times, dtype=float)
        stack = np.stack([f.values if isinstance(f, ScalarField) else np.asarray(f) for f in fields])
        if stack.shape[0] != times.size:
            raise ValueError("one field per sample time required")
        weights = barycentric_weights(times)

        def fn(coords, t):
            return barycentric_eval(times, weights, stack, t)

        return cls(fn, descriptor=f"<{times.size} time samples>")

    def sample(self, grid: PeriodicGrid, t: float) -> np.ndarray:
        out = np.broadcast_to(np.asarray(self._fn(grid.coords(), t), dtype=float), grid.shape)
        if not np.all(np.isfinite(out)):
            raise ValueError(f"coefficient {self.descriptor!r} is non-finite at t={t}")
        return out

    def __repr__(self) -> str:
        return f"CoefficientField({self.descriptor})"


ZERO_COEFFICIENT = CoefficientField.constant(0.0)


def _is_zero(c: CoefficientField) -> bool:
    return c is ZERO_COEFFICIENT or c.descriptor == "0.0"


# ---------------------------------------------------------------------------
# system constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SystemParams:
    """Positive constants of the general-form system.

    c1 multiplies the biharmonic term of the conserved field, c2 the diffusion
    of the order parameters. The physical quadruple (M, L, alpha, beta) maps as
    c1 = M*alpha, c2 = L*beta.
    """

    c1: float
    c2: float
    physical: tuple[float, float, float, float] | None = None

    def __post_init__(self) -> None:
        if not (self.c1 > 0.0 and self.c2 > 0.0):
            raise ValueError("c1 and c2 must be positive")
        if self.physical is not None:
            m, l, alpha, beta = self.physical
            if self.c1 != m * alpha or self.c2 != l * beta:
                raise ValueError("physical quadruple inconsistent with (c1, c2)")

    @classmethod
    def from_physical(cls, mobility: float, kinetic: float, alpha: float, beta: float) -> "SystemParams":
        return cls(mobility * alpha, kinetic * beta, (mobility, kinetic, alpha, beta))


# ---------------------------------------------------------------------------
# series
# ---------------------------------------------------------------------------


def _as_coefficient(value) -> CoefficientField:
    if isinstance(value, CoefficientField):
        return value
    if isinstance(value, str):
        return CoefficientField.from_expression(value)
    if isinstance(value, ScalarField):
        return CoefficientField.from_grid_values(value)
    return CoefficientField.constant(value)


@dataclass(frozen=True)
class PotentialSeries:
    """Truncated series g(x,t,y) = sum_{l=1}^{order} g_l(x,t)/l! * y^l."""

    order: int
    coefficients: dict[int, CoefficientField] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("truncation order must be >= 1")
        coeffs = {int(k): _as_coefficient(v) for k, v in self.coefficients.items()}
        for ell in coeffs:
            if ell < 1:
                raise ValueError("the local-energy series has no constant term (degrees start at 1)")
            if ell > self.order:
                raise ValueError(f"coefficient degree {ell} exceeds truncation order {self.order}")
        object.__setattr__(self, "coefficients", coeffs)

    def coefficient(self, ell: int) -> CoefficientField:
        return self.coefficients.get(ell, ZERO_COEFFICIENT)

    def truncated(self, max_order: int) -> "PotentialSeries":
        kept = {l: c for l, c in self.coefficients.items() if l <= max_order}
        return PotentialSeries(max(1, max_order), kept)

    def evaluate(self, grid: PeriodicGrid, t: float, y: np.ndarray) -> np.ndarray:
        out = np.zeros(np.broadcast_shapes(np.shape(y), grid.shape))
        for ell, c in sorted(self.coefficients.items()):
            out = out + c.sample(grid, t) / math.factorial(ell) * y**ell
        return out


def double_well_potential() -> PotentialSeries:
    """Variation y^3 - y of the classical quartic double-well density y^4/4 - y^2/2."""
    return PotentialSeries(3, {1: -1.0, 3: 6.0})


@dataclass(frozen=True)
class CouplingSeries:
    """The known couplings: f0 and the diagonal-plus-higher f_i, i = 1, 2, 3.

    f0_coefficients maps (l0, l1, l2, l3) to c_{l0 l1 l2 l3}(x,t); diagonal
    maps i to b_i(x,t); fi_coefficients maps i to its higher-degree table.
    """

    order: int
    f0_coefficients: dict[MultiIndex, CoefficientField] = field(default_factory=dict)
    diagonal: dict[int, CoefficientField] = field(default_factory=dict)
    fi_coefficients: dict[int, dict[MultiIndex, CoefficientField]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("truncation order must be >= 1")

        f0 = {}
        for idx, c in self.f0_coefficients.items():
            idx = self._check_index(idx)
            if sum(idx) == 1 and idx != (1, 0, 0, 0):
                raise ValueError(
                    f"degree-1 coupling {idx} of f0 must vanish (only the z0 coefficient is allowed)"
                )
            f0[idx] = _as_coefficient(c)
        object.__setattr__(self, "f0_coefficients", f0)

        diag = {}
        for i, c in self.diagonal.items():
            if i not in (1, 2, 3):
                raise ValueError("diagonal linear coefficients exist for components 1..3 only")
            diag[int(i)] = _as_coefficient(c)
        object.__setattr__(self, "diagonal", diag)

        fi = {}
        for i, table in self.fi_coefficients.items():
            if i not in (1, 2, 3):
                raise ValueError("higher couplings exist for components 1..3 only")
            checked = {}
            for idx, c in table.items():
                idx = self._check_index(idx)
                if sum(idx) < 2:
                    raise ValueError(f"higher coupling {idx} of f{i} must have total degree >= 2")
                if idx[1] == idx[2] == idx[3] == 0:
                    raise ValueError(
                        f"coupling {idx} of f{i} depends on z0 alone and must vanish"
                    )
                checked[idx] = _as_coefficient(c)
            fi[int(i)] = checked
        object.__setattr__(self, "fi_coefficients", fi)

    def _check_index(self, idx) -> MultiIndex:
        idx = tuple(int(v) for v in idx)
        if len(idx) != 4 or any(v < 0 for v in idx):
            raise ValueError(f"multi-index must be 4 nonnegative integers, got {idx}")
        s = sum(idx)
        if not 1 <= s <= self.order:
            raise ValueError(f"multi-index degree {s} outside 1..{self.order}")
        return idx

    @classmethod
    def linear(cls, c1000=0.0, b=(0.0, 0.0, 0.0), order: int = 1) -> "CouplingSeries":
        f0 = {(1, 0, 0, 0): c1000} if not (isinstance(c1000, float) and c1000 == 0.0) else {}
        diag = {i + 1: bi for i, bi in enumerate(b)}
        return cls(order, f0, diag, {})

    def c1000(self) -> CoefficientField:
        return self.f0_coefficients.get((1, 0, 0, 0), ZERO_COEFFICIENT)

    def evaluate_f0(self, grid: PeriodicGrid, t: float, state) -> np.ndarray:
        z = [np.asarray(s) for s in state]
        out = np.zeros(grid.shape)
        for idx, c in self.f0_coefficients.items():
            s = sum(idx)
            mono = np.ones(grid.shape)
            for zi, li in zip(z, idx):
                if li:
                    mono = mono * zi**li
            out = out + c.sample(grid, t) / math.factorial(s) * mono
        return out

    def evaluate_fi(self, i: int, grid: PeriodicGrid, t: float, state) -> np.ndarray:
        z = [np.asarray(s) for s in state]
        out = np.zeros(grid.shape)
        if i in self.diagonal:
            out = out + self.diagonal[i].sample(grid, t) * z[i]
        for idx, c in self.fi_coefficients.get(i, {}).items():
            s = sum(idx)
            mono = np.ones(grid.shape)
            for zi, li in zip(z, idx):
                if li:
                    mono = mono * zi**li
            out = out + c.sample(grid, t) / math.factorial(s) * mono
        return out


def eval_nonlinearities(
    pot: PotentialSeries,
    coup: CouplingSeries,
    grid: PeriodicGrid,
    t: float,
    state,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise (g, f0, f1, f2, f3) on the grid for a 4-component state."""
    state = [s.values if isinstance(s, ScalarField) else np.asarray(s, dtype=float) for s in state]
    if len(state) != 4:
        raise ValueError("state must have 4 components (u0, u1, u2, u3)")
    for s in state:
        if s.shape != grid.shape:
            raise ValueError("state fields must live on the given grid")
    g = pot.evaluate(grid, t, state[0])
    f0 = coup.evaluate_f0(grid, t, state)
    fis = tuple(coup.evaluate_fi(i, grid, t, state) for i in (1, 2, 3))
    for arr in (g, f0, *fis):
        if np.max(np.abs(arr), initial=0.0) > OVERFLOW_LIMIT:
            raise EvaluationOverflowError("nonlinearity value exceeded 1e100 (blow-up)")
    return (g, f0, *fis)


# ---------------------------------------------------------------------------
# admissibility validation
# ---------------------------------------------------------------------------


@dataclass
class AdmissibilityReport:
    series_starts_at_degree_one: bool
    f0_degree_one_sparse: bool
    fi_no_pure_z0_terms: bool
    lipschitz_g: float
    lipschitz_f0: float
    lipschitz_fi: tuple[float, float, float]
    probe_box: tuple[float, float]

    @property
    def structural_ok(self) -> bool:
        return (
            self.series_starts_at_degree_one
            and self.f0_degree_one_sparse
            and self.fi_no_pure_z0_terms
        )

    def as_dict(self) -> dict:
        return {
            "series_starts_at_degree_one": self.series_starts_at_degree_one,
            "f0_degree_one_sparse": self.f0_degree_one_sparse,
            "fi_no_pure_z0_terms": self.fi_no_pure_z0_terms,
            "lipschitz_g": self.lipschitz_g,
            "lipschitz_f0": self.lipschitz_f0,
            "lipschitz_fi": list(self.lipschitz_fi),
            "probe_box": list(self.probe_box),
        }


def validate_admissible(
    pot: PotentialSeries,
    coup: CouplingSeries,
    probe_box: tuple[float, float] = (-1.0, 1.0),
    grid: PeriodicGrid | None = None,
    t_values=(0.0, 0.5, 1.0),
    samples: int = 10_000,
) -> AdmissibilityReport:
    """Check the structural conditions and estimate Lipschitz constants.

    The Lipschitz bounds are sampled over probe_box (not certified): the g
    estimate is the largest slope over a dense value grid, the f estimates the
    largest difference quotient over fixed-seed probe pairs.
    """
    if grid is None:
        grid = PeriodicGrid(1, 16)
    lo, hi = probe_box
    if not hi > lo:
        raise ValueError("probe box must be a nonempty interval")

    # Dense slope scan for g over each coefficient sample time.
    ys = np.linspace(lo, hi, 513)
    trail = (1,) * grid.dim
    lip_g = 0.0
    for t in t_values:
        vals = np.stack([pot.evaluate(grid, t, y) for y in ys])
        slopes = np.abs(np.diff(vals, axis=0)) / np.diff(ys).reshape((-1,) + trail)
        lip_g = max(lip_g, float(np.max(slopes)))

    # Fixed-seed probe pairs for the 4-variable couplings; scaled to the box so
    # enlarging the box only rescales the same unit sample.
    rng = np.random.default_rng(20240817)
    unit = rng.uniform(-1.0, 1.0, size=(samples, 2, 4))
    center, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    pairs = center + half * unit
    gaps = np.linalg.norm(pairs[:, 0] - pairs[:, 1], axis=1)
    keep = gaps > 1e-12
    pairs, gaps = pairs[keep], gaps[keep]

    def batch_poly(terms, t, z_batch):
        # terms: iterable of (multi-index, coefficient, diagonal component or None)
        out = np.zeros((len(z_batch),) + grid.shape)
        for idx, c in terms:
            s = sum(idx)
            mono = np.ones(len(z_batch))
            for j, lj in enumerate(idx):
                if lj:
                    mono = mono * z_batch[:, j] ** lj
            out = out + mono.reshape((-1,) + trail) * (c.sample(grid, t) / math.factorial(s))
        return out

    def quotient(terms) -> float:
        worst = 0.0
        for t in t_values:
            va = batch_poly(terms, t, pairs[:, 0])
            vb = batch_poly(terms, t, pairs[:, 1])
            diff = np.max(np.abs(va - vb).reshape(len(pairs), -1), axis=1)
            worst = max(worst, float(np.max(diff / gaps)))
        return worst

    def fi_terms(i: int):
        terms = list(coup.fi_coefficients.get(i, {}).items())
        if i in coup.diagonal:
            idx = [0, 0, 0, 0]
            idx[i] = 1
            terms.append((tuple(idx), coup.diagonal[i]))
        return terms

    lip_f0 = quotient(list(coup.f0_coefficients.items()))
    lip_fi = tuple(quotient(fi_terms(i)) for i in (1, 2, 3))

    # Structural conditions hold by construction; re-derive them from the data
    # so the report stands on its own.
    f0_sparse = all(sum(idx) != 1 or idx == (1, 0, 0, 0) for idx in coup.f0_coefficients)
    fi_ok = all(
        not (idx[1] == idx[2] == idx[3] == 0)
        for table in coup.fi_coefficients.values()
        for idx in table
    )
    return AdmissibilityReport(
        series_starts_at_degree_one=all(ell >= 1 for ell in pot.coefficients),
        f0_degree_one_sparse=f0_sparse,
        fi_no_pure_z0_terms=fi_ok,
        lipschitz_g=lip_g,
        lipschitz_f0=lip_f0,
        lipschitz_fi=lip_fi,
        probe_box=(lo, hi),
    )


# ---------------------------------------------------------------------------
# JSON manifest
# ---------------------------------------------------------------------------


def _coefficient_from_manifest(entry) -> CoefficientField:
    if isinstance(entry, (int, float)):
        return CoefficientField.constant(entry)
    if isinstance(entry, dict):
        if "const" in entry:
            return CoefficientField.constant(entry["const"])
        if "expr" in entry:
            return CoefficientField.from_expression(entry["expr"])
    raise ValueError(f"cannot interpret coefficient entry {entry!r}")


def load_potential_manifest(path) -> tuple[PotentialSeries, CouplingSeries, SystemParams | None]:
    """Read a potential/coupling manifest (JSON).

    Layout::

        {
          "g": {"order": 3, "coefficients": {"1": {"expr": "0.5+0.2*cos(pi*x1)"}, "2": 0.3}},
          "f0": {"order": 3, "coefficients": {"1,0,0,0": 0.1}},
          "f": {"1": {"b": 0.2, "higher": {"1,1,0,0": {"const": 0.5}}}},
          "params": {"c1": 1.0, "c2": 1.0}
        }
    """
    with open(path) as fh:
        doc = json.load(fh)

    g_doc = doc.get("g", {})
    g_order = int(g_doc.get("order", max((int(k) for k in g_doc.get("coefficients", {})), default=1)))
    pot = PotentialSeries(
        g_order,
        {int(k): _coefficient_from_manifest(v) for k, v in g_doc.get("coefficients", {}).items()},
    )

    def parse_index(key: str) -> MultiIndex:
        return tuple(int(v) for v in key.split(","))  # type: ignore[return-value]

    f0_doc = doc.get("f0", {})
    f0_coeffs = {parse_index(k): _coefficient_from_manifest(v) for k, v in f0_doc.get("coefficients", {}).items()}
    fi_doc = doc.get("f", {})
    diagonal = {}
    fi_coeffs = {}
    for key, entry in fi_doc.items():
        i = int(key)
        if "b" in entry:
            diagonal[i] = _coefficient_from_manifest(entry["b"])
        higher = {parse_index(k): _coefficient_from_manifest(v) for k, v in entry.get("higher", {}).items()}
        if higher:
            fi_coeffs[i] = higher
    orders = [g_order, int(f0_doc.get("order", 0))]
    orders += [sum(idx) for idx in f0_coeffs]
    orders += [sum(idx) for table in fi_coeffs.values() for idx in table]
    coup = CouplingSeries(max([1] + orders), f0_coeffs, diagonal, fi_coeffs)

    params = None
    if "params" in doc:
        p = doc["params"]
        if "M" in p:
            params = SystemParams.from_physical(p["M"], p["L"], p["alpha"], p["beta"])
        else:
            params = SystemParams(float(p["c1"]), float(p["c2"]))
    return pot, coup, params
