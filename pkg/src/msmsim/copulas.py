"""Bivariate copulas: CDF, density, h-function and its inverse.

Convention: ``h(u, v) = dC(u, v)/dv = P(U <= u | V = v)``; the second argument
is the conditioning variable.  ``h_inv`` inverts ``h`` in its first argument.
Every function accepts scalars or arrays; copula parameters are scalars.
"""

from __future__ import annotations

import ast
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import integrate, special

from .dists import ConfigurationError, DomainError, student_t_cdf, student_t_quantile
from .expr import ExpressionError, parse_node

COPULA_FAMILIES: dict[str, tuple[str, ...]] = {
    "Independence": (),
    "Gaussian": ("rho",),
    "StudentT": ("rho", "df"),
    "Clayton": ("theta",),
    "Frank": ("theta",),
}
CLAMP = 1e-12
FRANK_TOL = 1e-12
FRANK_MAX_ITER = 200

_GL_X, _GL_W = leggauss(20)


@dataclass(frozen=True)
class CopulaSpec:
    family: str = "Independence"
    params: tuple = ()

    def __post_init__(self):
        if self.family not in COPULA_FAMILIES:
            raise ConfigurationError(f"unknown copula family {self.family!r}")
        if len(self.params) != len(COPULA_FAMILIES[self.family]):
            raise ConfigurationError(f"{self.family} takes parameters {COPULA_FAMILIES[self.family]}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        p = self.params
        if not all(math.isfinite(x) for x in p):
            raise ConfigurationError(f"{self.family}: parameters must be finite")
        if self.family in ("Gaussian", "StudentT") and not -1.0 < p[0] < 1.0:
            raise ConfigurationError(f"{self.family}: rho must lie in (-1, 1), got {p[0]}")
        if self.family == "StudentT" and p[1] <= 0:
            raise ConfigurationError(f"StudentT: df must be positive, got {p[1]}")
        if self.family == "Clayton" and p[0] <= 0:
            raise ConfigurationError(f"Clayton: theta must be positive, got {p[0]}")
        if self.family == "Frank" and p[0] == 0:
            raise ConfigurationError("Frank: theta must be nonzero")

    def __str__(self) -> str:
        return f"{self.family}({', '.join(repr(x) for x in self.params)})"

    @property
    def is_independence(self) -> bool:
        return self.family == "Independence"


def Independence() -> CopulaSpec:
    return CopulaSpec("Independence", ())


def Gaussian(rho: float) -> CopulaSpec:
    return CopulaSpec("Gaussian", (rho,))


def StudentT(rho: float, df: float) -> CopulaSpec:
    return CopulaSpec("StudentT", (rho, df))


def Clayton(theta: float) -> CopulaSpec:
    return CopulaSpec("Clayton", (theta,))


def Frank(theta: float) -> CopulaSpec:
    return CopulaSpec("Frank", (theta,))


def parse_copula(text: str, params: Mapping | None = None) -> CopulaSpec:
    """Parse ``Family(args)``; arguments must evaluate to constants."""
    try:
        node = ast.parse(text.strip(), mode="eval").body
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse copula {text!r}: {exc.msg}") from None
    if isinstance(node, ast.Name):
        node = ast.Call(func=node, args=[], keywords=[])
    if not (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)):
        raise ConfigurationError(f"expected Family(...), got {text!r}")
    fam = node.func.id
    if fam not in COPULA_FAMILIES:
        raise ConfigurationError(f"unknown copula family {fam!r}")
    names = COPULA_FAMILIES[fam]
    given = dict(zip(names, node.args))
    if len(node.args) > len(names):
        raise ConfigurationError(f"{fam} takes parameters {names}")
    for kw in node.keywords:
        if kw.arg not in names or kw.arg in given:
            raise ConfigurationError(f"{fam}: bad or repeated parameter {kw.arg!r}")
        given[kw.arg] = kw.value
    vals = []
    for n in names:
        if n not in given:
            raise ConfigurationError(f"{fam}: missing parameter {n!r}")
        try:
            lp = parse_node(given[n], params)
        except ExpressionError as exc:
            raise ConfigurationError(f"{fam}: {exc}") from None
        if not lp.is_constant or lp.link != "identity":
            raise ConfigurationError(f"{fam}: copula parameters must be constants")
        vals.append(lp.intercept)
    return CopulaSpec(fam, tuple(vals))


# --- argument handling -----------------------------------------------------------

def _closed(*args):
    arrs = [np.asarray(a, dtype=float) for a in args]
    for a in arrs:
        if np.any(~((a >= 0) & (a <= 1))):
            raise DomainError("copula arguments must lie in [0, 1]")
    return np.broadcast_arrays(*arrs)


def _open(*args):
    arrs = [np.asarray(a, dtype=float) for a in args]
    for a in arrs:
        if np.any(~((a > 0) & (a < 1))):
            raise DomainError("h-function arguments must lie in (0, 1); clamp before calling")
    return np.broadcast_arrays(*arrs)


def _ret(x, like):
    x = np.asarray(x, dtype=float)
    return float(x) if np.ndim(like) == 0 and x.ndim == 0 else x


def clamp(u):
    """Clamp into [CLAMP, 1 - CLAMP] as callers of h/h_inv must."""
    return np.clip(u, CLAMP, 1.0 - CLAMP)


# --- bivariate normal and t orthant probabilities ------------------------------------

def _bvn_upper(h, k, r: float):
    """P(X > h, Y > k) for a standard bivariate normal with correlation r."""
    h, k = np.broadcast_arrays(np.asarray(h, float), np.asarray(k, float))
    if r == 0.0:
        return special.ndtr(-h) * special.ndtr(-k)
    hk = h * k
    if abs(r) < 0.925:
        hs = (h * h + k * k) / 2
        asr = math.asin(r)
        sn = np.sin(asr * (_GL_X + 1) / 2)
        expo = (sn[:, None] * hk.ravel()[None, :] - hs.ravel()[None, :]) / (1 - sn * sn)[:, None]
        bvn = (_GL_W[:, None] * np.exp(expo)).sum(axis=0).reshape(h.shape)
        return bvn * asr / (4 * math.pi) + special.ndtr(-h) * special.ndtr(-k)
    if r < 0:
        k = -k
        hk = -hk
    as_ = (1 - r) * (1 + r)
    a = math.sqrt(as_)
    bs = (h - k) ** 2
    c = (4 - hk) / 8
    d = (12 - hk) / 16
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        bvn = a * np.exp(-(bs / as_ + hk) / 2) * (1 - c * (bs - as_) * (1 - d * bs / 5) / 3 + c * d * as_ * as_ / 5)
        b = np.sqrt(bs)
        corr = np.exp(-hk / 2) * math.sqrt(2 * math.pi) * special.ndtr(-b / a) * b * (1 - c * bs * (1 - d * bs / 5) / 3)
        bvn = bvn - np.where(hk > -160, corr, 0.0)
        a2 = a / 2
        xs = (a2 * (_GL_X + 1)) ** 2
        rs = np.sqrt(1 - xs)
        bsf, hkf, cf, df_ = (z.ravel()[None, :] for z in (bs, hk, c, d))
        xs_, rs_ = xs[:, None], rs[:, None]
        term = np.exp(-bsf / (2 * xs_) - hkf / (1 + rs_)) / rs_ - np.exp(-(bsf / xs_ + hkf) / 2) * (1 + cf * xs_ * (1 + df_ * xs_))
        bvn = bvn + a2 * (_GL_W[:, None] * term).sum(axis=0).reshape(h.shape)
    bvn = -bvn / (2 * math.pi)
    if r > 0:
        return bvn + special.ndtr(-np.maximum(h, k))
    bvn = -bvn
    extra = np.where(h < 0, special.ndtr(k) - special.ndtr(h), special.ndtr(-h) - special.ndtr(-k))
    return bvn + np.where(k > h, extra, 0.0)


def bvn_cdf(x, y, rho: float):
    """P(X <= x, Y <= y) for a standard bivariate normal."""
    return _bvn_upper(-np.asarray(x, float), -np.asarray(y, float), float(rho))


def _bvt_integer(nu: int, dh, dk, r: float):
    """P(X < dh, Y < dk) for a standard bivariate t with integer df (Dunnett-Sobel series)."""
    # Quantiles beyond ~1e150 overflow the squared terms; those points lie within
    # min(u, v) < 1e-150 of a Frechet bound, which copula_cdf enforces.
    with np.errstate(over="ignore", invalid="ignore"):
        return _bvt_integer_series(nu, dh, dk, r)


def _bvt_integer_series(nu: int, dh, dk, r: float):
    dh, dk = np.broadcast_arrays(np.asarray(dh, float), np.asarray(dk, float))
    ors = 1 - r * r
    hrk = dh - r * dk
    krh = dk - r * dh
    xnhk = hrk ** 2 / (hrk ** 2 + ors * (nu + dk ** 2))
    xnkh = krh ** 2 / (krh ** 2 + ors * (nu + dh ** 2))
    hs = np.where(hrk < 0, -1.0, 1.0)
    ks = np.where(krh < 0, -1.0, 1.0)
    if nu % 2 == 0:
        bvt = np.full(dh.shape, math.atan2(math.sqrt(ors), -r) / (2 * math.pi))
        gmph = dh / np.sqrt(16 * (nu + dh ** 2))
        gmpk = dk / np.sqrt(16 * (nu + dk ** 2))
        btnckh = 2 * np.arctan2(np.sqrt(xnkh), np.sqrt(1 - xnkh)) / math.pi
        btpdkh = 2 * np.sqrt(xnkh * (1 - xnkh)) / math.pi
        btnchk = 2 * np.arctan2(np.sqrt(xnhk), np.sqrt(1 - xnhk)) / math.pi
        btpdhk = 2 * np.sqrt(xnhk * (1 - xnhk)) / math.pi
        for j in range(1, nu // 2 + 1):
            bvt = bvt + gmph * (1 + ks * btnckh) + gmpk * (1 + hs * btnchk)
            btnckh = btnckh + btpdkh
            btpdkh = 2 * j * btpdkh * (1 - xnkh) / (2 * j + 1)
            btnchk = btnchk + btpdhk
            btpdhk = 2 * j * btpdhk * (1 - xnhk) / (2 * j + 1)
            gmph = gmph * (2 * j - 1) / (2 * j * (1 + dh ** 2 / nu))
            gmpk = gmpk * (2 * j - 1) / (2 * j * (1 + dk ** 2 / nu))
        return bvt
    snu = math.sqrt(nu)
    qhrk = np.sqrt(dh ** 2 + dk ** 2 - 2 * r * dh * dk + nu * ors)
    hkrn = dh * dk + r * nu
    hkn = dh * dk - nu
    hpk = dh + dk
    bvt = np.arctan2(-snu * (hkn * qhrk + hpk * hkrn), hkn * hkrn - nu * hpk * qhrk) / (2 * math.pi)
    bvt = np.where(bvt < -1e-15, bvt + 1, bvt)
    gmph = dh / (2 * math.pi * snu * (1 + dh ** 2 / nu))
    gmpk = dk / (2 * math.pi * snu * (1 + dk ** 2 / nu))
    btnckh = np.sqrt(xnkh)
    btpdkh = btnckh.copy()
    btnchk = np.sqrt(xnhk)
    btpdhk = btnchk.copy()
    for j in range(1, (nu - 1) // 2 + 1):
        bvt = bvt + gmph * (1 + ks * btnckh) + gmpk * (1 + hs * btnchk)
        btpdkh = (2 * j - 1) * btpdkh * (1 - xnkh) / (2 * j)
        btnckh = btnckh + btpdkh
        btpdhk = (2 * j - 1) * btpdhk * (1 - xnhk) / (2 * j)
        btnchk = btnchk + btpdhk
        gmph = 2 * j * gmph / ((2 * j + 1) * (1 + dh ** 2 / nu))
        gmpk = 2 * j * gmpk / ((2 * j + 1) * (1 + dk ** 2 / nu))
    return bvt


def bvt_cdf(x, y, rho: float, df: float):
    """P(X <= x, Y <= y) for a standard bivariate t; integer df uses the exact series."""
    if float(df).is_integer():
        return np.clip(_bvt_integer(int(df), x, y, float(rho)), 0.0, 1.0)
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    spec = StudentT(rho, df)
    u = student_t_cdf(x, df)
    v = student_t_cdf(y, df)
    out = np.empty(x.shape)
    for idx in np.ndindex(x.shape):
        uu, vv = float(u[idx]), float(v[idx])
        if uu <= 0 or vv <= 0:
            out[idx] = 0.0
        elif uu >= 1 or vv >= 1:
            out[idx] = min(uu, vv)
        else:
            val, _ = integrate.quad(lambda s: float(h(spec, uu, s)), 0.0, vv, epsabs=1e-13, epsrel=1e-12, limit=200)
            out[idx] = val
    return out


# --- copula functions ---------------------------------------------------------------

def copula_cdf(c: CopulaSpec, u, v):
    """C(u, v); exact on the boundary of the unit square, projected onto the Frechet bounds inside."""
    uu, vv = _closed(u, v)
    out = np.zeros(uu.shape)
    edge_u1 = uu == 1.0
    edge_v1 = vv == 1.0
    out = np.where(edge_u1, vv, out)
    out = np.where(edge_v1, uu, out)
    inner = (uu > 0) & (vv > 0) & ~edge_u1 & ~edge_v1
    if np.any(inner):
        ui, vi = uu[inner], vv[inner]
        out[inner] = np.clip(_cdf_interior(c, ui, vi), np.maximum(ui + vi - 1.0, 0.0), np.minimum(ui, vi))
    return _ret(out, _shape_like(u, v))


def _shape_like(u, v):
    return np.empty(np.broadcast(np.asarray(u), np.asarray(v)).shape)


def _cdf_interior(c: CopulaSpec, u, v):
    fam = c.family
    if fam == "Independence":
        return u * v
    if fam == "Gaussian":
        return np.clip(bvn_cdf(special.ndtri(u), special.ndtri(v), c.params[0]), 0.0, 1.0)
    if fam == "StudentT":
        rho, df = c.params
        x, y = student_t_quantile(u, df), student_t_quantile(v, df)
        return np.clip(bvt_cdf(x, y, rho, df), 0.0, 1.0)
    if fam == "Clayton":
        th = c.params[0]
        with np.errstate(over="ignore"):
            logs = np.log1p(np.expm1(-th * np.log(u)) + np.expm1(-th * np.log(v)))
        return np.exp(-logs / th)
    th = c.params[0]  # Frank
    return -np.log1p(np.expm1(-th * u) * np.expm1(-th * v) / np.expm1(-th)) / th


def h(c: CopulaSpec, u, v):
    """Conditional copula P(U <= u | V = v)."""
    uu, vv = _open(u, v)
    fam = c.family
    if fam == "Independence":
        out = uu.copy()
    elif fam == "Gaussian":
        rho = c.params[0]
        out = special.ndtr((special.ndtri(uu) - rho * special.ndtri(vv)) / math.sqrt(1 - rho * rho))
    elif fam == "StudentT":
        rho, df = c.params
        x, y = student_t_quantile(uu, df), student_t_quantile(vv, df)
        scale = np.sqrt((df + y * y) * (1 - rho * rho) / (df + 1))
        out = student_t_cdf((x - rho * y) / scale, df + 1)
    elif fam == "Clayton":
        th = c.params[0]
        lv = np.log(vv)
        logs = np.log1p(np.expm1(-th * np.log(uu)) + np.expm1(-th * lv))
        out = np.exp((-th - 1) * lv - (1 / th + 1) * logs)
    else:
        th = c.params[0]
        a = np.expm1(-th * uu)
        b = np.expm1(-th * vv)
        out = a * np.exp(-th * vv) / (np.expm1(-th) + a * b)
    return _ret(out, _shape_like(u, v))


def h_inv(c: CopulaSpec, t, v):
    """Inverse of ``h`` in its first argument: returns u with h(u, v) = t."""
    tt, vv = _open(t, v)
    fam = c.family
    if fam == "Independence":
        out = tt.copy()
    elif fam == "Gaussian":
        rho = c.params[0]
        out = special.ndtr(special.ndtri(tt) * math.sqrt(1 - rho * rho) + rho * special.ndtri(vv))
    elif fam == "StudentT":
        rho, df = c.params
        y = student_t_quantile(vv, df)
        scale = np.sqrt((df + y * y) * (1 - rho * rho) / (df + 1))
        out = student_t_cdf(student_t_quantile(tt, df + 1) * scale + rho * y, df)
    elif fam == "Clayton":
        th = c.params[0]
        lv = np.log(vv)
        a = (-th / (th + 1)) * (np.log(tt) + (th + 1) * lv)
        logs = np.log1p(np.expm1(a) - np.expm1(-th * lv))
        out = np.exp(-logs / th)
    else:
        out = _frank_h_inv(c, tt, vv)
    return _ret(out, _shape_like(t, v))


def _frank_h_inv(c: CopulaSpec, t, v):
    lo = np.zeros(t.shape)
    hi = np.ones(t.shape)
    for _ in range(FRANK_MAX_ITER):
        mid = 0.5 * (lo + hi)
        below = h(c, mid, v) < t
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo < FRANK_TOL):
            break
    return 0.5 * (lo + hi)


def density(c: CopulaSpec, u, v):
    """Copula density d2C/dudv on the open unit square."""
    uu, vv = _open(u, v)
    fam = c.family
    if fam == "Independence":
        out = np.ones(uu.shape)
    elif fam == "Gaussian":
        rho = c.params[0]
        x, y = special.ndtri(uu), special.ndtri(vv)
        q = (rho * rho * (x * x + y * y) - 2 * rho * x * y) / (2 * (1 - rho * rho))
        out = np.exp(-q) / math.sqrt(1 - rho * rho)
    elif fam == "StudentT":
        rho, df = c.params
        x, y = student_t_quantile(uu, df), student_t_quantile(vv, df)
        ors = 1 - rho * rho
        log_f2 = (
            special.gammaln((df + 2) / 2) - special.gammaln(df / 2) - math.log(df * math.pi) - 0.5 * math.log(ors)
            - (df + 2) / 2 * np.log1p((x * x + y * y - 2 * rho * x * y) / (df * ors))
        )
        log_f1 = lambda z: (  # noqa: E731
            special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * math.log(df * math.pi)
            - (df + 1) / 2 * np.log1p(z * z / df)
        )
        out = np.exp(log_f2 - log_f1(x) - log_f1(y))
    elif fam == "Clayton":
        th = c.params[0]
        lu, lv = np.log(uu), np.log(vv)
        logs = np.log1p(np.expm1(-th * lu) + np.expm1(-th * lv))
        out = (1 + th) * np.exp((-th - 1) * (lu + lv) - (2 + 1 / th) * logs)
    else:
        th = c.params[0]
        d = -np.expm1(-th) - np.expm1(-th * uu) * np.expm1(-th * vv)
        out = th * -np.expm1(-th) * np.exp(-th * (uu + vv)) / (d * d)
    return _ret(out, _shape_like(u, v))


# --- copula matrices ----------------------------------------------------------------

@dataclass(frozen=True)
class CopulaMatrix:
    """Pair-copulas Theta[k, j] (0 <= j <= k <= K) linking the outcome to one covariate process."""

    K: int
    entries: tuple = ()  # (((k, j), CopulaSpec), ...)
    default: CopulaSpec | None = None
    _lookup: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        for (k, j), _ in self.entries:
            if not 0 <= j <= k <= self.K:
                raise ConfigurationError(f"copula entry ({k}, {j}) outside 0 <= j <= k <= {self.K}")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: e[0])))
        object.__setattr__(self, "_lookup", dict(self.entries))

    @classmethod
    def constant(cls, K: int, spec: CopulaSpec) -> "CopulaMatrix":
        return cls(K, (), spec)

    def get(self, k: int, j: int) -> CopulaSpec:
        spec = self._lookup.get((k, j), self.default)
        if spec is None:
            raise ConfigurationError(f"missing copula entry ({k}, {j}) and no default")
        return spec

    def missing(self, rows=None) -> list:
        rows = range(self.K + 1) if rows is None else rows
        return [(k, j) for k in rows for j in range(k + 1) if (k, j) not in self._lookup and self.default is None]

    @property
    def all_independence(self) -> bool:
        specs = [s for _, s in self.entries] + ([self.default] if self.default is not None else [])
        return all(s.is_independence for s in specs)
