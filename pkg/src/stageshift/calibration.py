"""Poisson maximum-likelihood calibration to age/stage incidence tables.

The expected count in each age group and stage is person-years times the
cause-specific hazard at the group midpoint.  Onset rates are optimized on
the log scale; the progression rate is mapped into its open identifiability
interval with a logistic transform, and the early surfacing rate follows
from the sojourn-time hypothesis.
"""

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, gammaln, logit
from scipy.stats import qmc

from .ctmc import StateSpace, build_intensity, transition_matrix_derivatives
from .errors import InvalidParameter, NonConvergence, TableFormatError
from .natural_history import (
    SURVIVAL_FLOOR,
    NaturalHistoryParams,
    SojournHypothesis,
    hazards,
)

COLUMNS = ("age_lo", "age_hi", "early_count", "advanced_count", "person_years")
OPEN_GROUP_WIDTH = 5.0
LOGIT_LIMIT = 30.0
# onset-rate cap used during dimension selection; a phase at this rate adds
# a 1e-5-year delay, so the k+1 model effectively nests the k model
SELECTION_RATE_CAP = 1e5


@dataclass(frozen=True)
class IncidenceTable:
    """Observed clinical diagnoses by age group.

    ``age_hi`` is the exclusive upper edge of each group; the last group may
    be open-ended (``inf``), in which case its midpoint is taken as
    ``age_lo + open_width / 2``.
    """

    age_lo: np.ndarray
    age_hi: np.ndarray
    early: np.ndarray
    advanced: np.ndarray
    person_years: np.ndarray
    open_width: float = OPEN_GROUP_WIDTH

    def __post_init__(self):
        for name in ("age_lo", "age_hi", "early", "advanced", "person_years"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.age_lo.size
        if n == 0:
            raise TableFormatError("incidence table is empty")
        if any(getattr(self, f).shape != (n,) for f in ("age_hi", "early", "advanced", "person_years")):
            raise TableFormatError("incidence columns differ in length")
        validate_groups(self.age_lo, self.age_hi, None)
        if np.any(self.early < 0) or np.any(self.advanced < 0):
            raise TableFormatError("counts must be non-negative")
        bad = np.flatnonzero(((self.early + self.advanced) > 0) & ~(self.person_years > 0))
        if bad.size:
            raise TableFormatError("person_years must be positive where counts are positive", row=int(bad[0]) + 1)
        if np.any(self.person_years < 0):
            raise TableFormatError("person_years must be non-negative")

    def __len__(self):
        return self.age_lo.size

    @property
    def midpoints(self):
        hi = np.where(np.isfinite(self.age_hi), self.age_hi, self.age_lo + self.open_width)
        return 0.5 * (self.age_lo + hi)

    @property
    def observed(self):
        """Counts as an ``(n_groups, 2)`` array, columns early/advanced."""
        return np.column_stack([self.early, self.advanced])

    def scaled(self, factor):
        """Counts and person-years both multiplied by ``factor`` (rates kept)."""
        return replace(self, early=self.early * factor, advanced=self.advanced * factor,
                       person_years=self.person_years * factor)

    def rows(self):
        for i in range(len(self)):
            yield {
                "age_lo": self.age_lo[i],
                "age_hi": self.age_hi[i],
                "early_count": self.early[i],
                "advanced_count": self.advanced[i],
                "person_years": self.person_years[i],
            }


def validate_groups(age_lo, age_hi, width, row_offset=1):
    """Check that age groups are ascending, contiguous and non-overlapping.

    With ``width`` set, every closed group must span exactly that many years
    and only the final group may be open-ended.
    """
    for i, (lo, hi) in enumerate(zip(age_lo, age_hi)):
        row = i + row_offset
        if not np.isfinite(lo) or lo < 0:
            raise TableFormatError(f"age_lo must be a finite age >= 0, got {lo}", row=row)
        if not hi > lo:
            raise TableFormatError(f"age_hi ({hi}) must exceed age_lo ({lo})", row=row)
        if not np.isfinite(hi) and i != len(age_lo) - 1:
            raise TableFormatError("only the last age group may be open-ended", row=row)
        if width is not None and np.isfinite(hi) and not math.isclose(hi - lo, width):
            raise TableFormatError(f"age group {lo}-{hi} is not {width:g} years wide", row=row)
        if i:
            prev_hi = age_hi[i - 1]
            if lo < prev_hi:
                raise TableFormatError(f"age group starting at {lo} overlaps the previous group", row=row)
            if lo > prev_hi:
                raise TableFormatError(f"age groups are not contiguous: gap {prev_hi}-{lo}", row=row)


def _number(text, column, row, integer=False):
    text = text.strip()
    if column == "age_hi" and text.lower() in ("", "inf", "+", "open"):
        return math.inf
    try:
        value = float(text)
    except ValueError:
        raise TableFormatError(f"{column} is not a number: {text!r}", row=row) from None
    if integer and value != int(value):
        raise TableFormatError(f"{column} must be an integer count, got {text!r}", row=row)
    if not math.isfinite(value):
        raise TableFormatError(f"{column} must be finite", row=row)
    return value


def load_incidence(source, group_width=5.0, open_width=OPEN_GROUP_WIDTH):
    """Parse a comma-separated incidence table.

    ``source`` is a path, a text stream, or the table text itself (detected
    by a newline).  Lines starting with ``#`` are ignored.  Row numbers in
    errors count data rows from 1.
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, str) and "\n" in source:
        text = source
    else:
        with open(source, encoding="utf-8") as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise TableFormatError("incidence file has no header")
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = [h.strip() for h in next(reader)]
    missing = [c for c in COLUMNS if c not in header]
    extra = [c for c in header if c not in COLUMNS]
    if missing or extra or len(header) != len(COLUMNS):
        raise TableFormatError(f"header must be exactly {','.join(COLUMNS)}; missing={missing} extra={extra}")
    cols = {c: [] for c in COLUMNS}
    for row, rec in enumerate(reader, start=1):
        if len(rec) != len(header):
            raise TableFormatError(f"expected {len(header)} fields, got {len(rec)}", row=row)
        values = dict(zip(header, rec))
        for c in COLUMNS:
            v = _number(values[c], c, row, integer=c.endswith("_count"))
            if c.endswith("_count") and v < 0:
                raise TableFormatError(f"{c} must be non-negative, got {values[c].strip()}", row=row)
            if c == "person_years" and v < 0:
                raise TableFormatError(f"person_years must be non-negative, got {v}", row=row)
            cols[c].append(v)
        if cols["early_count"][-1] + cols["advanced_count"][-1] > 0 and not cols["person_years"][-1] > 0:
            raise TableFormatError("person_years must be positive where counts are positive", row=row)
    if not cols["age_lo"]:
        raise TableFormatError("incidence file has no data rows")
    validate_groups(cols["age_lo"], cols["age_hi"], group_width)
    return IncidenceTable(cols["age_lo"], cols["age_hi"], cols["early_count"], cols["advanced_count"],
                          cols["person_years"], open_width=open_width)


def write_incidence(table, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in table.rows():
        w.writerow([
            f"{r['age_lo']:g}",
            "" if not np.isfinite(r["age_hi"]) else f"{r['age_hi']:g}",
            int(r["early_count"]),
            int(r["advanced_count"]),
            repr(float(r["person_years"])),
        ])


def inflate_risk(table, factor):
    """Multiply counts by ``factor`` (person-years unchanged).

    Counts are rounded half-to-even, as ``numpy.rint`` does.
    """
    if not np.isfinite(factor) or factor <= 0:
        raise InvalidParameter(f"risk inflation factor must be > 0, got {factor}")
    return replace(table, early=np.rint(table.early * factor), advanced=np.rint(table.advanced * factor))


def expected_counts(params, table):
    """Expected diagnoses per cell, shape ``(n_groups, 2)`` (early, advanced)."""
    curve = hazards(params, table.midpoints)
    if not np.all(curve.computable):
        bad = table.midpoints[~curve.computable]
        raise InvalidParameter(f"hazard not computable at ages {bad.tolist()} (survival below {SURVIVAL_FLOOR})")
    return table.person_years[:, None] * np.column_stack([curve.h4, curve.h5])


def _loglik_terms(observed, mean, include_constant):
    observed = np.asarray(observed, dtype=float)
    mean = np.asarray(mean, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logm = np.log(mean)
    if np.any((mean <= 0) & (observed > 0)) or np.any(~np.isfinite(mean)):
        return -math.inf
    ll = np.where(observed > 0, observed * logm, 0.0) - mean
    if include_constant:
        ll = ll - gammaln(observed + 1.0)
    return float(ll.sum())


def poisson_loglik(params, table, include_constant=True):
    """Poisson log-likelihood of the table.

    ``include_constant`` keeps the ``-log(o!)`` term; with it dropped the
    value is the kernel used for deviance.  A cell with positive count and
    non-positive mean gives ``-inf``.
    """
    try:
        mean = expected_counts(params, table)
    except InvalidParameter:
        return -math.inf
    return _loglik_terms(table.observed, mean, include_constant)


def deviance(observed, mean):
    """Poisson deviance ``2 * (saturated - model)`` log-likelihood."""
    observed = np.asarray(observed, dtype=float)
    mean = np.asarray(mean, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(observed > 0, observed * np.log(observed / mean), 0.0)
    return float(2.0 * np.sum(term - (observed - mean)))


@dataclass
class OptimizerSettings:
    max_iters: int = 2000
    gtol: float = 1e-6
    multistart: int = 4
    seed: int = 0
    theta_bounds: tuple = (1e-6, 10.0)
    workers: int = 1

    def __post_init__(self):
        if self.multistart < 1:
            raise InvalidParameter("multistart count must be >= 1")
        lo, hi = self.theta_bounds
        if not 0 < lo < hi:
            raise InvalidParameter(f"bad onset-rate box {self.theta_bounds}")


@dataclass
class FitConfig:
    k: int
    hypothesis: SojournHypothesis
    risk_inflation: float = 1.0
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        StateSpace(self.k)
        if not self.risk_inflation > 0:
            raise InvalidParameter("risk inflation must be > 0")


@dataclass
class FitResult:
    params: NaturalHistoryParams
    loglik: float
    converged: bool
    predicted: np.ndarray
    deviance: float
    iterations: int
    k: int
    hypothesis: SojournHypothesis
    gradient_norm: float
    degenerate: bool = False
    rates_at_bound: tuple = ()
    start_index: int = 0
    loglik_convention: str = "full Poisson log-pmf including -log(o!)"

    def diagnostics(self):
        return {
            "loglik": self.loglik,
            "loglik_convention": self.loglik_convention,
            "deviance": self.deviance,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_norm": self.gradient_norm,
            "k": self.k,
            "hypothesis": {"omst": self.hypothesis.omst, "lmst": self.hypothesis.lmst},
            "degenerate": bool(self.degenerate),
            "rates_at_bound": list(self.rates_at_bound),
        }


class PoissonObjective:
    """Negative log-likelihood and its exact gradient in the free coordinates.

    Free vector ``z``: ``log(theta_1..theta_k)`` followed by ``logit`` of
    ``lambda23 / upper``.  Derivatives of the transition probabilities come
    from one exponential of a block generator per distinct age step.
    """

    def __init__(self, table, hypothesis, k):
        self.table = table
        self.hyp = hypothesis
        self.k = k
        self.space = StateSpace(k)
        self.upper = hypothesis.lambda23_upper()
        self.ages = table.midpoints
        self.observed = table.observed
        self.py = table.person_years
        self.const = float(gammaln(self.observed + 1.0).sum())

    def params(self, z):
        z = np.asarray(z, dtype=float)
        theta = np.exp(z[: self.k])
        l23 = self.upper * expit(z[self.k])
        return NaturalHistoryParams.from_hypothesis(theta, l23, self.hyp)

    def encode(self, params):
        return np.concatenate([np.log(params.theta), [logit(params.lambda23 / self.upper)]])

    def _generator_directions(self, params, z):
        """``dLambda/dz_i`` for every free coordinate."""
        sp, d = self.space, self.space.d
        dirs = []
        for j, rate in enumerate(params.theta):
            m = np.zeros((d, d))
            m[j, j], m[j, j + 1] = -rate, rate
            dirs.append(m)
        s = expit(z[self.k])
        dl23 = self.upper * s * (1 - s)
        dl24 = (1.0 / (self.hyp.lambda35 * self.hyp.omst) - 1.0) * dl23
        m = np.zeros((d, d))
        m[sp.early, sp.advanced] = dl23
        m[sp.early, sp.clinical_early] = dl24
        m[sp.early, sp.early] = -(dl23 + dl24)
        dirs.append(m)
        return dirs, dl24

    def evaluate(self, z, gradient=True):
        """Return ``(loglik, grad)`` with the full Poisson convention."""
        params = self.params(z)
        sp = self.space
        lam = build_intensity(params)
        dirs, dl24 = self._generator_directions(params, z) if gradient else ([], 0.0)
        m = len(dirs)
        n = self.ages.size
        rows = np.empty((n, sp.d))
        drows = np.empty((n, m, sp.d))
        cache = {}
        prev = 0.0
        d = sp.d
        # top block row of exp(G a) carries P(a) and its directional derivatives
        top = np.zeros((d, d * (m + 1)))
        top[:, :d] = np.eye(d)
        for i, a in enumerate(self.ages):
            step = round(a - prev, 12)
            if step > 0:
                if step not in cache:
                    p, dp = transition_matrix_derivatives(lam, dirs, step)
                    cache[step] = (p, dp)
                p, dp = cache[step]
                new = np.empty_like(top)
                new[:, :d] = top[:, :d] @ p
                for b in range(m):
                    blk = slice((b + 1) * d, (b + 2) * d)
                    new[:, blk] = top[:, :d] @ dp[b] + top[:, blk] @ p
                top = new
            prev = a
            rows[i] = top[0, :d]
            for b in range(m):
                drows[i, b] = top[0, (b + 1) * d:(b + 2) * d]
        surv = 1.0 - rows[:, sp.clinical_early] - rows[:, sp.clinical_advanced]
        if np.any(surv < SURVIVAL_FLOOR):
            return -math.inf, np.zeros(m)
        f4 = rows[:, sp.early] * params.lambda24
        f5 = rows[:, sp.advanced] * params.lambda35
        mean = self.py[:, None] * np.column_stack([f4 / surv, f5 / surv])
        ll = _loglik_terms(self.observed, mean, include_constant=False) - self.const
        if not gradient or not np.isfinite(ll):
            return ll, np.zeros(m)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(self.observed > 0, self.observed / mean, 0.0) - 1.0
        dsurv = -(drows[:, :, sp.clinical_early] + drows[:, :, sp.clinical_advanced])
        df4 = drows[:, :, sp.early] * params.lambda24
        df4[:, self.k] += rows[:, sp.early] * dl24
        df5 = drows[:, :, sp.advanced] * params.lambda35
        s = surv[:, None]
        dh4 = df4 / s - (f4 / surv)[:, None] * dsurv / s
        dh5 = df5 / s - (f5 / surv)[:, None] * dsurv / s
        grad = (w[:, :1] * self.py[:, None] * dh4 + w[:, 1:] * self.py[:, None] * dh5).sum(axis=0)
        return ll, grad


def _initial_guess(table, hypothesis, k, theta_bounds):
    """Equal onset rates matching the cumulative observed hazard, and the
    progression rate implied by the observed advanced-stage fraction."""
    obs = table.observed
    rate = obs.sum(axis=1) / np.where(table.person_years > 0, table.person_years, np.inf)
    hi = np.where(np.isfinite(table.age_hi), table.age_hi, table.age_lo + table.open_width)
    cum = float(np.sum(rate * (hi - table.age_lo)))
    top_age = float(hi[-1])
    cum = min(max(cum, 1e-8), 0.5)
    r = (cum * math.factorial(k)) ** (1.0 / k) / top_age
    r = float(np.clip(r, theta_bounds[0] * 10, theta_bounds[1] / 10))
    total = obs.sum()
    frac = obs[:, 1].sum() / total if total > 0 else 0.5
    upper = hypothesis.lambda23_upper()
    early_time = hypothesis.omst - frac * hypothesis.lmst
    l23 = frac / early_time if early_time > 0 else 0.5 * upper
    l23 = float(np.clip(l23, 0.02 * upper, 0.98 * upper))
    return np.full(k, r), l23


def _starts(table, hypothesis, k, settings):
    theta0, l230 = _initial_guess(table, hypothesis, k, settings.theta_bounds)
    upper = hypothesis.lambda23_upper()
    z0 = np.concatenate([np.log(theta0), [logit(l230 / upper)]])
    starts = [z0]
    if settings.multistart > 1:
        u = qmc.Halton(d=k + 1, scramble=True, seed=settings.seed).random(settings.multistart - 1)
        for row in u:
            z = z0.copy()
            # log-onset rates jittered by up to +-1.5, progression over (-3, 3) logits
            z[:k] += 3.0 * (row[:k] - 0.5)
            z[k] = 6.0 * (row[k] - 0.5)
            starts.append(z)
    return starts


def _optimize(objective, z0, bounds, settings):
    # per-count scaling keeps the tolerances meaningful for tables of any size
    scale = 1.0 / max(float(objective.observed.sum()), 1.0)

    def fun(z):
        ll, g = objective.evaluate(z)
        if not np.isfinite(ll):
            return 1e300, np.zeros_like(z)
        return -ll * scale, -g * scale

    res = minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                   options={"maxiter": settings.max_iters, "gtol": settings.gtol, "ftol": 1e-15,
                            "maxcor": 20})
    return res


def _projected_gradient_norm(g, z, bounds):
    pg = g.copy()
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and z[i] <= lo + 1e-12 and g[i] < 0:
            pg[i] = 0.0
        if hi is not None and z[i] >= hi - 1e-12 and g[i] > 0:
            pg[i] = 0.0
    return float(np.max(np.abs(pg))) if pg.size else 0.0


def fit(table, config, starts=None):
    """Maximum-likelihood natural history under ``config.hypothesis``.

    Counts are first multiplied by ``config.risk_inflation``.  ``starts``
    may supply explicit initial parameter sets (used for warm starts); they
    are tried before the generated multistart points.  Raises
    :class:`NonConvergence` only when no start reaches a finite likelihood.
    """
    if len(table) == 0:
        raise InvalidParameter("incidence table is empty")
    hyp, k, opt = config.hypothesis, config.k, config.optimizer
    if not hyp.omst * hyp.lambda35 > 1:
        raise InvalidParameter("hypothesis requires OMST * lambda35 > 1")
    data = inflate_risk(table, config.risk_inflation) if config.risk_inflation != 1 else table
    objective = PoissonObjective(data, hyp, k)
    lo, hi = math.log(opt.theta_bounds[0]), math.log(opt.theta_bounds[1])
    bounds = [(lo, hi)] * k + [(-LOGIT_LIMIT, LOGIT_LIMIT)]
    z_starts = [np.clip(objective.encode(p), [b[0] for b in bounds], [b[1] for b in bounds])
                for p in (starts or [])]
    z_starts += [np.clip(z, [b[0] for b in bounds], [b[1] for b in bounds])
                 for z in _starts(data, hyp, k, opt)]

    def run(item):
        idx, z0 = item
        try:
            return idx, _optimize(objective, z0, bounds, opt)
        except (ArithmeticError, ValueError):
            return idx, None

    items = list(enumerate(z_starts))
    if opt.workers and opt.workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=opt.workers) as pool:
            outcomes = list(pool.map(run, items))
    else:
        outcomes = [run(it) for it in items]

    best = None
    for idx, res in outcomes:
        if res is None or not np.isfinite(res.fun) or res.fun >= 1e299:
            continue
        # ties resolved by start index so results do not depend on scheduling
        if best is None or res.fun < best[1].fun - 1e-12:
            best = (idx, res)
    if best is None:
        raise NonConvergence(f"all {len(items)} optimizer starts failed", best=None)
    idx, res = best
    params = objective.params(res.x)
    ll, g = objective.evaluate(res.x)
    gnorm = _projected_gradient_norm(-g / max(float(data.observed.sum()), 1.0), res.x, bounds)
    predicted = expected_counts(params, data)
    at_bound = tuple(int(j) for j in range(k) if res.x[j] <= lo + 1e-8)
    # zero counts push the onset clock to the edge of the rate box
    degenerate = bool(data.observed.sum() == 0 or (at_bound and predicted.sum() < 1e-6))
    converged = bool(res.success) or gnorm <= opt.gtol
    return FitResult(
        params=params,
        loglik=ll,
        converged=converged,
        predicted=predicted,
        deviance=deviance(data.observed, predicted),
        iterations=int(res.nit),
        k=k,
        hypothesis=hyp,
        gradient_norm=gnorm,
        degenerate=degenerate,
        rates_at_bound=at_bound,
        start_index=idx,
    )


@dataclass
class DimensionTrace:
    k: int
    fits: list

    @property
    def trace(self):
        return [(f.k, f.deviance) for f in self.fits]

    @property
    def chosen(self):
        return next(f for f in self.fits if f.k == self.k)


def select_onset_dimension(table, hypothesis, k_max, threshold=0.005, risk_inflation=1.0, optimizer=None,
                           abs_tol=1e-6):
    """Increase the onset dimension from 1 until the relative deviance
    improvement from adding one more phase drops below ``threshold``.

    An improvement below ``abs_tol`` deviance units also counts as minimal,
    so a model that already fits exactly is not extended on roundoff.
    Without an explicit ``optimizer`` the onset-rate box is widened to
    ``SELECTION_RATE_CAP``: the warm start adds a phase at the box edge, and
    with the default cap of 10 that phase alone shifts onset by 0.1 years,
    enough to make the trace rise on large tables.

    Each fit is warm-started from the previous one with an extra fast
    phase, which keeps the deviance trace non-increasing.  All dimensions up
    to ``k_max`` are fitted so the full trace is available.
    """
    if k_max < 1:
        raise InvalidParameter("k_max must be >= 1")
    optimizer = optimizer or OptimizerSettings(theta_bounds=(1e-6, SELECTION_RATE_CAP))
    fits = []
    prev = None
    for k in range(1, k_max + 1):
        cfg = FitConfig(k=k, hypothesis=hypothesis, risk_inflation=risk_inflation, optimizer=optimizer)
        warm = []
        if prev is not None:
            fast = optimizer.theta_bounds[1]
            warm.append(NaturalHistoryParams(prev.params.theta + (fast,), prev.params.lambda23,
                                             prev.params.lambda24, prev.params.lambda35))
        res = fit(table, cfg, starts=warm)
        fits.append(res)
        prev = res
    chosen = k_max
    for a, b in zip(fits, fits[1:]):
        drop = a.deviance - b.deviance
        if drop <= abs_tol or drop < threshold * a.deviance:
            chosen = a.k
            break
    return DimensionTrace(k=chosen, fits=fits)
