"""Stage-shift projection for a simulated screening trial.

The intervention arm is evaluated with a forward recursion over the latent
chain observed at the screen ages (an HMM whose emissions are the screen
outcomes); the control arm uses the unscreened transition probabilities.
Observation codes follow the disease states: 1 no cancer found, 2 screen-
detected early, 3 screen-detected advanced, 4 clinical early, 5 clinical
advanced.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .ctmc import build_intensity, transition_matrix
from .errors import InvalidParameter, StageShiftError
from .natural_history import SURVIVAL_FLOOR

NO_FINDING, SCREEN_EARLY, SCREEN_ADVANCED, CLINICAL_EARLY, CLINICAL_ADVANCED = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class ScreeningProtocol:
    screen_ages: tuple
    followup_end: float
    sensitivity_early: float
    sensitivity_advanced: float

    def __post_init__(self):
        ages = tuple(float(a) for a in np.atleast_1d(self.screen_ages))
        object.__setattr__(self, "screen_ages", ages)
        object.__setattr__(self, "followup_end", float(self.followup_end))
        if not ages:
            raise InvalidParameter("protocol needs at least one screen age")
        if ages[0] < 0 or any(b <= a for a, b in zip(ages, ages[1:])):
            raise InvalidParameter(f"screen ages must be >= 0 and strictly increasing: {ages}")
        if not self.followup_end > ages[-1]:
            raise InvalidParameter("follow-up must end after the last screen")
        for name in ("sensitivity_early", "sensitivity_advanced"):
            v = float(getattr(self, name))
            object.__setattr__(self, name, v)
            if not 0.0 <= v <= 1.0:
                raise InvalidParameter(f"{name} must lie in [0, 1], got {v}")

    @classmethod
    def periodic(cls, start, n, interval, followup, sensitivity_early, sensitivity_advanced):
        """``n`` screens every ``interval`` years from ``start``, follow-up
        ending ``followup`` years after the last one."""
        ages = [start + i * interval for i in range(n)]
        return cls(tuple(ages), ages[-1] + followup, sensitivity_early, sensitivity_advanced)

    @property
    def n(self):
        return len(self.screen_ages)

    @property
    def ages(self):
        """Screen ages followed by the end of follow-up."""
        return self.screen_ages + (self.followup_end,)

    def with_sensitivity(self, early, advanced):
        return ScreeningProtocol(self.screen_ages, self.followup_end, early, advanced)

    def to_dict(self):
        return {
            "screen_ages": list(self.screen_ages),
            "followup_end": self.followup_end,
            "sensitivity_early": self.sensitivity_early,
            "sensitivity_advanced": self.sensitivity_advanced,
        }

    @classmethod
    def from_dict(cls, data):
        missing = {"screen_ages", "followup_end", "sensitivity_early", "sensitivity_advanced"} - set(data)
        if missing:
            raise InvalidParameter(f"protocol record missing {sorted(missing)}")
        return cls(data["screen_ages"], data["followup_end"], data["sensitivity_early"],
                   data["sensitivity_advanced"])


@dataclass
class TrialProjection:
    """Per-screen and per-interval advanced-stage probabilities for both arms.

    Index ``l`` of each array refers to screen ``a_l`` and the interval
    ``(a_l, a_{l+1})`` that follows it.
    """

    screen_detected: np.ndarray
    interval_clinical: np.ndarray
    control: np.ndarray
    interval_shifts: np.ndarray = field(init=False)
    cumulative_shift: float = field(init=False)

    def __post_init__(self):
        self.screen_detected = np.asarray(self.screen_detected, dtype=float)
        self.interval_clinical = np.asarray(self.interval_clinical, dtype=float)
        self.control = np.asarray(self.control, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.interval_shifts = (self.control - self.screened_advanced_by_interval) / self.control
        total = self.control_total
        if total <= 0:
            raise StageShiftError("no advanced-stage diagnoses expected in the control arm; shift undefined")
        self.cumulative_shift = float((total - self.screened_total) / total)

    @property
    def screened_advanced_by_interval(self):
        return self.screen_detected + self.interval_clinical

    @property
    def screened_total(self):
        """Advanced-stage diagnoses in the screened arm (screen + interval)."""
        return float(self.screen_detected.sum() + self.interval_clinical.sum())

    @property
    def control_total(self):
        return float(self.control.sum())

    def rows(self, protocol):
        """Plot/table-ready rows, one per interval plus a summary row."""
        out = []
        ages = protocol.ages
        for l in range(len(self.control)):
            out.append({
                "interval": l + 1,
                "age_start": ages[l],
                "age_end": ages[l + 1],
                "screen_detected": float(self.screen_detected[l]),
                "interval_clinical": float(self.interval_clinical[l]),
                "control": float(self.control[l]),
                "shift": float(self.interval_shifts[l]),
            })
        out.append({
            "interval": "total",
            "age_start": ages[0],
            "age_end": ages[-1],
            "screen_detected": float(self.screen_detected.sum()),
            "interval_clinical": float(self.interval_clinical.sum()),
            "control": self.control_total,
            "shift": self.cumulative_shift,
        })
        return out


def emission_matrix(k, sensitivity_early, sensitivity_advanced):
    """``(k+4) x 5`` matrix of screen outcome probabilities given the latent state."""
    be, bl = float(sensitivity_early), float(sensitivity_advanced)
    if not (0 <= be <= 1 and 0 <= bl <= 1):
        raise InvalidParameter("sensitivities must lie in [0, 1]")
    e = np.zeros((k + 4, 5))
    e[:k, 0] = 1.0
    e[k] = (1 - be, be, 0, 0, 0)
    e[k + 1] = (1 - bl, 0, bl, 0, 0)
    e[k + 2, 3] = 1.0
    e[k + 3, 4] = 1.0
    return e


def _undiagnosed(p_row, space):
    return 1.0 - (p_row[space.clinical_early] + p_row[space.clinical_advanced])


def initial_distribution(params, a1):
    """Latent-state distribution at trial entry, conditional on no clinical
    diagnosis before ``a1``."""
    if not np.isfinite(a1) or a1 <= 0:
        raise InvalidParameter(f"entry age must be > 0, got {a1}")
    space = params.space
    row = transition_matrix(build_intensity(params), a1)[0]
    surv = _undiagnosed(row, space)
    if surv < SURVIVAL_FLOOR:
        raise StageShiftError(f"undiagnosed fraction at age {a1} is {surv:.3g}; entry distribution undefined")
    pi = row.copy()
    pi[space.clinical_early] = pi[space.clinical_advanced] = 0.0
    return pi / surv


def _steps(params, protocol):
    lam = build_intensity(params)
    ages = protocol.ages
    return [transition_matrix(lam, b - a) for a, b in zip(ages, ages[1:])]


def sequence_probability(params, protocol, observations):
    """Probability of observing ``observations`` at ``a_1, a_2, ...``
    (screens then end of follow-up) in the screened arm."""
    obs = [int(o) for o in observations]
    if not 1 <= len(obs) <= protocol.n + 1:
        raise InvalidParameter(f"need 1..{protocol.n + 1} observations, got {len(obs)}")
    if any(o not in (1, 2, 3, 4, 5) for o in obs):
        raise InvalidParameter(f"observations must be in 1..5: {obs}")
    e = emission_matrix(params.k, protocol.sensitivity_early, protocol.sensitivity_advanced)
    steps = _steps(params, protocol)
    alpha = initial_distribution(params, protocol.screen_ages[0]) * e[:, obs[0] - 1]
    for step, o in zip(steps, obs[1:]):
        alpha = (alpha @ step) * e[:, o - 1]
    return float(alpha.sum())


def _forward(params, protocol):
    """Screen-detected and interval advanced probabilities for every ``l``
    in one pass, carrying the all-negative prefix."""
    space = params.space
    e = emission_matrix(params.k, protocol.sensitivity_early, protocol.sensitivity_advanced)
    steps = _steps(params, protocol)
    alpha = initial_distribution(params, protocol.screen_ages[0])
    sd = np.empty(protocol.n)
    jd = np.empty(protocol.n)
    for l, step in enumerate(steps):
        sd[l] = alpha @ e[:, SCREEN_ADVANCED - 1]
        alpha = (alpha * e[:, NO_FINDING - 1]) @ step
        jd[l] = alpha[space.clinical_advanced]
        # O=5 at the next age ends the all-negative prefix; drop absorbed mass
        alpha[space.clinical_early] = alpha[space.clinical_advanced] = 0.0
    return sd, jd


def _check_interval(protocol, l):
    if not 1 <= l <= protocol.n:
        raise InvalidParameter(f"interval index must be in 1..{protocol.n}, got {l}")


def screen_detected_advanced(params, protocol, l):
    """Probability that screen ``l`` (1-based) detects advanced-stage
    cancer after ``l-1`` negative screens."""
    _check_interval(protocol, l)
    return float(_forward(params, protocol)[0][l - 1])


def interval_clinical_advanced(params, protocol, l):
    """Probability of advanced clinical diagnosis in ``(a_l, a_{l+1})``
    after ``l`` negative screens."""
    _check_interval(protocol, l)
    return float(_forward(params, protocol)[1][l - 1])


def _control(params, protocol):
    """Unscreened advanced diagnoses per interval, given undiagnosed at a_1.

    Equal to ``(P15(a_{l+1}) - P15(a_l)) / S(a_1)``; propagating the entry
    distribution instead avoids the cancellation in that difference when
    few people are still undiagnosed at entry.
    """
    space = params.space
    alpha = initial_distribution(params, protocol.screen_ages[0])
    out = np.empty(protocol.n)
    for l, step in enumerate(_steps(params, protocol)):
        nxt = alpha @ step
        out[l] = nxt[space.clinical_advanced] - alpha[space.clinical_advanced]
        alpha = nxt
    return np.maximum(out, 0.0)


def control_interval_advanced(params, protocol, l):
    """Probability of advanced clinical diagnosis in ``[a_l, a_{l+1})``
    without screening, among those undiagnosed at ``a_1``."""
    _check_interval(protocol, l)
    return float(_control(params, protocol)[l - 1])


def stage_shift(params, protocol):
    sd, jd = _forward(params, protocol)
    return TrialProjection(screen_detected=sd, interval_clinical=jd, control=_control(params, protocol))


def relative_reduction(comparator, intervention):
    """Relative reduction in advanced-stage diagnoses of ``intervention``
    against an active ``comparator`` arm (both screened projections)."""
    ref = comparator.screened_total
    if ref <= 0:
        raise StageShiftError("comparator arm has no advanced-stage diagnoses")
    return (ref - intervention.screened_total) / ref


def _sweep_point(args):
    (plabel, params), (qlabel, protocol), (be, bl) = args
    row = {"params": plabel, "protocol": qlabel, "sensitivity_early": be, "sensitivity_advanced": bl}
    try:
        proj = stage_shift(params, protocol.with_sensitivity(be, bl))
        row.update(shift=proj.cumulative_shift, status="ok")
    except (StageShiftError, ValueError, ArithmeticError) as exc:
        row.update(shift=float("nan"), status=f"error: {exc}")
    return row


def sweep(params_family, protocol_family, sensitivities, workers=None):
    """Cumulative shift for every (params, protocol, sensitivity) combination.

    ``params_family`` and ``protocol_family`` map labels to objects (dict or
    sequence of pairs); ``sensitivities`` is a sequence of (early, advanced)
    pairs.  Rows come back in row-major order of the three inputs; a failing
    point yields a NaN shift and an error status instead of raising.
    """
    pf = list(params_family.items()) if hasattr(params_family, "items") else list(params_family)
    qf = list(protocol_family.items()) if hasattr(protocol_family, "items") else list(protocol_family)
    sens = [(float(a), float(b)) for a, b in sensitivities]
    if not pf or not qf or not sens:
        raise InvalidParameter("sweep grids must be non-empty")
    points = list(product(pf, qf, sens))
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_point, points))
    return [_sweep_point(p) for p in points]


@dataclass
class MCEDProjection:
    sites: dict
    pooled_shift: float

    def rows(self):
        out = [{"site": s, "shift": p.cumulative_shift, "screened_advanced": p.screened_total,
                "control_advanced": p.control_total, "extension": False}
               for s, p in self.sites.items()]
        out.append({"site": "pooled", "shift": self.pooled_shift,
                    "screened_advanced": sum(p.screened_total for p in self.sites.values()),
                    "control_advanced": sum(p.control_total for p in self.sites.values()),
                    "extension": True})
        return out


def mced_project(models, protocol, workers=None):
    """Per-cancer projections under a shared protocol plus a pooled shift.

    Cancers are treated as independent; the pooled shift weights each
    site by its expected advanced-stage probabilities.  ``models`` maps a
    site label to its parameters, or to ``(params, (early, advanced))``
    when sensitivities differ by site.
    """
    if not models:
        raise InvalidParameter("need at least one cancer model")

    def one(item):
        site, model = item
        if isinstance(model, tuple):
            params, (be, bl) = model
            return site, stage_shift(params, protocol.with_sensitivity(be, bl))
        return site, stage_shift(model, protocol)

    items = list(models.items())
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(i) for i in items]
    sites = dict(results)
    control = sum(p.control_total for p in sites.values())
    screened = sum(p.screened_total for p in sites.values())
    return MCEDProjection(sites=sites, pooled_shift=(control - screened) / control)
