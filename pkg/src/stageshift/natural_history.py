"""Parameterization of the natural history: sojourn-time hypotheses, the
identifiability relations between the progression rates, and the
age-specific quantities derived from the latent chain."""

from dataclasses import dataclass, field

import numpy as np

from .ctmc import StateSpace, build_intensity, transition_matrix
from .errors import ConstraintViolation, InvalidParameter

SURVIVAL_FLOOR = 1e-12

PARAM_FIELDS = ("theta", "lambda23", "lambda24", "lambda35", "omst", "lmst", "emst")


@dataclass(frozen=True)
class SojournHypothesis:
    """Working hypothesis for the overall and advanced-stage mean preclinical
    sojourn times (years)."""

    omst: float
    lmst: float

    def __post_init__(self):
        for name in ("omst", "lmst"):
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise InvalidParameter(f"{name} must be > 0, got {v}")
        if not self.lmst < self.omst:
            raise ConstraintViolation(
                f"LMST ({self.lmst}) must be smaller than OMST ({self.omst})", bound=self.omst
            )

    @property
    def lambda35(self):
        return 1.0 / self.lmst

    def lambda23_upper(self):
        """Open upper bound on the progression rate implied by the hypothesis."""
        l35 = self.lambda35
        return l35 / (l35 * self.omst - 1.0)


@dataclass(frozen=True)
class NaturalHistoryParams:
    theta: tuple
    lambda23: float
    lambda24: float
    lambda35: float

    def __post_init__(self):
        theta = tuple(float(x) for x in np.atleast_1d(self.theta))
        object.__setattr__(self, "theta", theta)
        for name in ("lambda23", "lambda24", "lambda35"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not theta:
            raise InvalidParameter("theta must contain at least one onset rate")
        for name, v in [("theta", x) for x in theta] + [
            ("lambda23", self.lambda23),
            ("lambda24", self.lambda24),
            ("lambda35", self.lambda35),
        ]:
            if not np.isfinite(v) or v <= 0:
                raise InvalidParameter(f"{name} rates must be > 0, got {v}")

    @classmethod
    def from_hypothesis(cls, theta, lambda23, hypothesis):
        """Build parameters with ``lambda35`` and ``lambda24`` closed by the
        sojourn-time hypothesis."""
        l24 = lambda24_from_hypothesis(hypothesis, lambda23)
        return cls(theta=theta, lambda23=lambda23, lambda24=l24, lambda35=hypothesis.lambda35)

    @property
    def k(self):
        return len(self.theta)

    @property
    def space(self):
        return StateSpace(self.k)

    @property
    def omst(self):
        return omst(self)

    @property
    def emst(self):
        return emst(self)

    @property
    def lmst(self):
        return 1.0 / self.lambda35

    @property
    def hypothesis(self):
        return SojournHypothesis(self.omst, self.lmst)

    def intensity(self):
        return build_intensity(self)

    def to_dict(self):
        return {
            "theta": list(self.theta),
            "lambda23": self.lambda23,
            "lambda24": self.lambda24,
            "lambda35": self.lambda35,
            "omst": self.omst,
            "lmst": self.lmst,
            "emst": self.emst,
        }

    @classmethod
    def from_dict(cls, data):
        """Inverse of :meth:`to_dict`.

        Derived fields (omst/lmst/emst) are ignored when the rates are
        present.  A record may instead omit ``lambda24``/``lambda35`` and
        give ``omst``/``lmst``, in which case they are closed from the
        hypothesis.
        """
        if "theta" not in data or "lambda23" not in data:
            raise InvalidParameter("parameter record needs 'theta' and 'lambda23'")
        if "lambda24" in data and "lambda35" in data:
            return cls(data["theta"], data["lambda23"], data["lambda24"], data["lambda35"])
        if "omst" in data and "lmst" in data:
            return cls.from_hypothesis(
                data["theta"], data["lambda23"], SojournHypothesis(data["omst"], data["lmst"])
            )
        raise InvalidParameter("parameter record needs lambda24/lambda35 or omst/lmst")


@dataclass
class HazardCurve:
    ages: np.ndarray
    h4: np.ndarray
    h5: np.ndarray
    survival: np.ndarray
    computable: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.computable is None:
            self.computable = self.survival >= SURVIVAL_FLOOR


def lambda24_from_hypothesis(hyp, lambda23):
    """Early-stage clinical surfacing rate closing the OMST relation."""
    upper = hyp.lambda23_upper()
    if not np.isfinite(lambda23) or not 0 < lambda23 < upper:
        raise ConstraintViolation(
            f"lambda23={lambda23} outside the open bound (0, {upper:.6g}) "
            f"implied by OMST={hyp.omst}, LMST={hyp.lmst}",
            bound=upper,
        )
    l35 = hyp.lambda35
    l24 = (l35 + lambda23) / (l35 * hyp.omst) - lambda23
    if l24 <= 0:
        # only reachable through roundoff right at the bound
        raise ConstraintViolation(f"lambda23={lambda23} too close to bound {upper:.6g}", bound=upper)
    return l24


def emst(params):
    return 1.0 / (params.lambda23 + params.lambda24)


def omst(params):
    total = params.lambda23 + params.lambda24
    return 1.0 / total + (params.lambda23 / total) / params.lambda35


def transition_path(lam, ages):
    """``P(a)`` for each age in ``ages`` (ascending, starting from age 0).

    Exponentials are computed per distinct increment and chained through
    the semigroup property, so an evenly spaced grid costs two exponentials.
    """
    ages = np.asarray(ages, dtype=float)
    if ages.ndim != 1:
        raise InvalidParameter("ages must be one-dimensional")
    if np.any(ages < 0) or np.any(np.diff(ages) < 0):
        raise InvalidParameter("ages must be >= 0 and non-decreasing")
    out = np.empty((ages.size,) + lam.shape)
    cache = {}
    p = np.eye(lam.shape[0])
    prev = 0.0
    for n, a in enumerate(ages):
        step = round(a - prev, 12)
        if step > 0:
            if step not in cache:
                cache[step] = transition_matrix(lam, step)
            p = p @ cache[step]
        out[n] = p
        prev = a
    return out


def hazards(params, ages):
    """Cause-specific hazards of early (``h4``) and advanced (``h5``)
    clinical diagnosis at each age, starting from ``1_1`` at age 0.

    Ages where the undiagnosed fraction drops below ``SURVIVAL_FLOOR`` are
    returned as NaN and flagged in ``computable``.
    """
    ages = np.asarray(ages, dtype=float)
    if np.any(ages < 0) or np.any(np.diff(ages) <= 0):
        raise InvalidParameter("ages must be >= 0 and strictly increasing")
    space = params.space
    lam = build_intensity(params)
    paths = transition_path(lam, ages)
    row = paths[:, 0, :]
    f4 = row[:, space.early] * params.lambda24
    f5 = row[:, space.advanced] * params.lambda35
    surv = 1.0 - (row[:, space.clinical_early] + row[:, space.clinical_advanced])
    ok = surv >= SURVIVAL_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        h4 = np.where(ok, f4 / surv, np.nan)
        h5 = np.where(ok, f5 / surv, np.nan)
    return HazardCurve(ages=ages, h4=h4, h5=h5, survival=surv, computable=ok)


def _check_age(a):
    if not np.isfinite(a) or a < 0:
        raise InvalidParameter(f"age must be >= 0, got {a}")


def cumulative_onset(params, a):
    """Probability that preclinical onset has occurred by age ``a``
    (no competing mortality)."""
    _check_age(a)
    p = transition_matrix(build_intensity(params), a)
    return float(1.0 - p[0, : params.k].sum())


def cumulative_diagnosis(params, a):
    """Probability of clinical diagnosis (either stage) by age ``a``."""
    _check_age(a)
    space = params.space
    p = transition_matrix(build_intensity(params), a)
    return float(p[0, space.clinical_early] + p[0, space.clinical_advanced])
