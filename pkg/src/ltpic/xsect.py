"""Tabulated collision cross sections and their piecewise-polynomial fits.

Tables are plain text::

    # comment
    SPECIES e / Ar
    PROCESS IONIZATION
    THRESHOLD 15.76
    15.76  0.0
    20.0   5.1e-21
    ...

The fit replaces a table lookup by a short polynomial evaluation. Pieces are
uniform in ``z = log1p((eps - eps_lo) / scale)`` so the piece index is plain
arithmetic; inside a piece a cubic in the local coordinate interpolates the
reference model at Chebyshev-Lobatto nodes, which pins both ends of every
piece and keeps the fit continuous.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(ValueError):
    pass


class FitFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class XsecTable:
    channel: str
    threshold: float
    knots: np.ndarray
    values: np.ndarray
    species: str = ""

    def __post_init__(self):
        validate_table(self.knots, self.values, self.threshold)


def validate_table(knots, values, threshold) -> None:
    knots = np.asarray(knots, dtype=float)
    values = np.asarray(values, dtype=float)
    if knots.ndim != 1 or knots.shape != values.shape:
        raise ValidationError("knots and values must be 1-D arrays of equal length")
    if knots.size < 2:
        raise ValidationError("a table needs at least 2 knots")
    if threshold < 0:
        raise ValidationError("threshold must be >= 0")
    if np.any(np.diff(knots) <= 0):
        bad = int(np.flatnonzero(np.diff(knots) <= 0)[0]) + 1
        raise ValidationError(f"energies not strictly ascending at row {bad}")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ValidationError("cross sections must be finite and non-negative")
    if np.any(values[knots < threshold] > 0):
        raise ValidationError("non-zero cross section below threshold")


def parse_table(text: str) -> XsecTable:
    header: dict[str, str] = {}
    rows: list[tuple[float, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        word = line.split(None, 1)
        key = word[0].upper()
        if key in ("SPECIES", "PROCESS", "THRESHOLD"):
            if rows:
                raise ParseError(f"header {key} after data rows", lineno)
            header[key] = word[1].strip() if len(word) > 1 else ""
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"expected 'energy sigma', got {line!r}", lineno)
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ParseError(f"non-numeric row {line!r}", lineno) from None
    for key in ("PROCESS", "THRESHOLD"):
        if key not in header:
            raise ParseError(f"missing {key} header", 1)
    try:
        threshold = float(header["THRESHOLD"])
    except ValueError:
        raise ParseError("THRESHOLD is not a number", 1) from None
    if not rows:
        raise ParseError("no data rows", 1)
    knots, values = (np.array(c) for c in zip(*rows))
    return XsecTable(header["PROCESS"], threshold, knots, values, header.get("SPECIES", ""))


def load_table(path_or_name) -> XsecTable:
    """Load a table from a path, or by file name from the bundled datasets."""
    path = Path(path_or_name)
    if path.exists():
        return parse_table(path.read_text())
    return parse_table(resources.files("ltpic.data").joinpath(str(path_or_name)).read_text())


def reference_sigma(table: XsecTable, energy) -> np.ndarray:
    """Log-log linear interpolation of the table (linear where a value is 0).

    Zero below threshold; clamped to the last knot above range.
    """
    eps = np.asarray(energy, dtype=float)
    k, s = table.knots, table.values
    i = np.clip(np.searchsorted(k, eps, side="right") - 1, 0, k.size - 2)
    e0, e1, s0, s1 = k[i], k[i + 1], s[i], s[i + 1]
    t = np.clip((eps - e0) / (e1 - e0), 0.0, 1.0)
    lin = s0 + t * (s1 - s0)
    ok = (e0 > 0) & (s0 > 0) & (s1 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        tl = np.log(np.maximum(eps, e0) / e0) / np.log(e1 / e0)
        loglog = s0 * np.exp(np.clip(tl, 0.0, 1.0) * np.log(s1 / s0))
    out = np.where(ok, loglog, lin)
    out = np.where(eps < k[0], s[0], out)
    out = np.where(eps >= k[-1], s[-1], out)
    return np.where(eps < table.threshold, 0.0, out)


_DEGREE = 3
_NODES = 0.5 - 0.5 * np.cos(np.pi * np.arange(_DEGREE + 1) / _DEGREE)


@dataclass(frozen=True)
class PiecewiseXsec:
    """Continuous piecewise cubic sigma(eps) with a certified error bound.

    ``coef`` is ``(pieces, 4)`` with lowest order first. A fit that could not
    reach the bound is stored with ``coef=None`` and evaluates the reference
    interpolation directly.
    """

    threshold: float
    eps_lo: float
    eps_hi: float
    scale: float
    dz: float
    breakpoints: np.ndarray
    coef: np.ndarray | None
    sigma_lo: float
    sigma_hi: float
    max_rel_err: float
    table: XsecTable

    @property
    def pieces(self) -> int:
        return 0 if self.coef is None else self.coef.shape[0]

    def __call__(self, energy) -> np.ndarray:
        return eval_sigma(self, energy)


def _z(eps, eps_lo, scale):
    return np.log1p((eps - eps_lo) / scale)


def _eval_poly(fit: PiecewiseXsec, eps: np.ndarray) -> np.ndarray:
    e = np.clip(eps, fit.eps_lo, fit.eps_hi)
    k = np.minimum((_z(e, fit.eps_lo, fit.scale) / fit.dz).astype(np.int64), fit.pieces - 1)
    a = fit.breakpoints[k]
    t = (e - a) / (fit.breakpoints[k + 1] - a)
    c = fit.coef[k]
    val = c[..., 3]
    for j in (2, 1, 0):
        val = val * t + c[..., j]
    return val


def eval_sigma(fit: PiecewiseXsec, energy) -> np.ndarray:
    """Cross section (m^2) at ``energy`` (eV); 0 below threshold, clamped above range."""
    eps = np.asarray(energy, dtype=float)
    if fit.coef is None:
        return reference_sigma(fit.table, eps)
    val = np.maximum(_eval_poly(fit, eps), 0.0)
    val = np.where(eps < fit.eps_lo, fit.sigma_lo, val)
    val = np.where(eps >= fit.eps_hi, fit.sigma_hi, val)
    return np.where(eps < fit.threshold, 0.0, val)


def verification_grid(table: XsecTable, refine: int = 10) -> np.ndarray:
    """Knots plus ``refine - 1`` interior points in every knot interval."""
    k = table.knots
    t = np.arange(refine) / refine
    inner = (k[:-1, None] + t[None, :] * np.diff(k)[:, None]).ravel()
    return np.concatenate([inner, k[-1:]])


def certified_error(fit: PiecewiseXsec, refine: int = 10) -> float:
    """Max relative error against the table knots and the refined reference."""
    table = fit.table
    grid = verification_grid(table, refine)
    ref = reference_sigma(table, grid)
    pos = ref > 0
    err = np.abs(eval_sigma(fit, grid[pos]) - ref[pos]) / ref[pos]
    kpos = table.values > 0
    kerr = np.abs(eval_sigma(fit, table.knots[kpos]) - table.values[kpos]) / table.values[kpos]
    return float(max(err.max(initial=0.0), kerr.max(initial=0.0)))


def _build(table: XsecTable, pieces: int, eps_lo: float, scale: float, bound: float) -> PiecewiseXsec:
    eps_hi = float(table.knots[-1])
    zmax = _z(eps_hi, eps_lo, scale)
    dz = zmax / pieces
    bp = eps_lo + scale * np.expm1(np.arange(pieces + 1) * dz)
    bp[0], bp[-1] = eps_lo, eps_hi
    width = np.diff(bp)
    x = bp[:-1, None] + _NODES[None, :] * width[:, None]
    x[:, 0], x[:, -1] = bp[:-1], bp[1:]
    y = reference_sigma(table, x)
    vander = np.vander(_NODES, _DEGREE + 1, increasing=True)
    coef = np.linalg.solve(vander, y.T).T
    return PiecewiseXsec(
        threshold=table.threshold,
        eps_lo=eps_lo,
        eps_hi=eps_hi,
        scale=scale,
        dz=float(dz),
        breakpoints=bp,
        coef=coef,
        sigma_lo=float(reference_sigma(table, eps_lo)),
        sigma_hi=float(table.values[-1]),
        max_rel_err=bound,
        table=table,
    )


def fit_piecewise(
    table: XsecTable,
    max_rel_err: float = 0.02,
    max_pieces: int = 8192,
    fallback: bool = True,
) -> PiecewiseXsec:
    """Fit with as few uniform-in-log pieces as meet ``max_rel_err``.

    The piece count doubles from 1 until the certified error is within the
    bound. If ``max_pieces`` is reached first, either raise
    :class:`FitFailure` or (``fallback=True``) return an exact evaluator of
    the reference interpolation.
    """
    eps_lo = float(max(table.threshold, table.knots[0]))
    span = float(table.knots[-1]) - eps_lo
    scale = max(span * 1e-4, 1e-12)
    pieces = 1
    while pieces <= max_pieces:
        fit = _build(table, pieces, eps_lo, scale, max_rel_err)
        err = certified_error(fit)
        if err <= max_rel_err:
            return _with_bound(fit, err)
        pieces *= 2
    if not fallback:
        raise FitFailure(f"{table.channel}: {max_rel_err} not reached with {max_pieces} pieces")
    exact = PiecewiseXsec(
        table.threshold, eps_lo, float(table.knots[-1]), scale, 0.0, table.knots.copy(), None,
        float(reference_sigma(table, eps_lo)), float(table.values[-1]), 0.0, table,
    )
    return exact


def _with_bound(fit: PiecewiseXsec, err: float) -> PiecewiseXsec:
    from dataclasses import replace

    return replace(fit, max_rel_err=err)
