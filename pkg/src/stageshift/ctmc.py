"""Latent continuous-time Markov chain for the two-stage progressive model.

Latent states are ordered ``1_1 .. 1_k, 2, 3, 4, 5``:

* ``1_j``  healthy, j-th phase of the hypoexponential onset clock
* ``2``    early-stage preclinical
* ``3``    advanced-stage preclinical
* ``4``    early-stage clinical (absorbing)
* ``5``    advanced-stage clinical (absorbing)

All times are in years and all rates per year.
"""

from dataclasses import dataclass

import numpy as np
from .expm import expm

from .errors import InvalidParameter, NumericalIntegrityError

MAX_DIM = 64
ROW_SUM_TOL = 1e-10
ROW_SUM_FAIL = 1e-8


@dataclass(frozen=True)
class StateSpace:
    """Index bookkeeping for a latent chain with ``k`` onset phases."""

    k: int

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvalidParameter(f"onset dimension k must be an integer >= 1, got {self.k}")
        if self.k + 4 > MAX_DIM:
            raise InvalidParameter(f"latent dimension {self.k + 4} exceeds limit {MAX_DIM}")

    @property
    def d(self):
        return self.k + 4

    @property
    def early(self):
        return self.k

    @property
    def advanced(self):
        return self.k + 1

    @property
    def clinical_early(self):
        return self.k + 2

    @property
    def clinical_advanced(self):
        return self.k + 3

    @property
    def onset_states(self):
        return range(self.k)

    def index(self, label):
        """Map a state label to its row index.

        ``"1_j"`` (1-based j) names an onset phase; the integers 2..5 (or
        their string forms) name the observable disease states.  Plain
        integers outside 2..5 are rejected, use ``"1_1"`` for the start state.
        """
        if isinstance(label, str):
            if label.startswith("1_"):
                try:
                    j = int(label[2:])
                except ValueError:
                    raise InvalidParameter(f"bad state label {label!r}") from None
                if not 1 <= j <= self.k:
                    raise InvalidParameter(f"onset phase {label!r} outside 1_1..1_{self.k}")
                return j - 1
            try:
                label = int(label)
            except ValueError:
                raise InvalidParameter(f"bad state label {label!r}") from None
        if isinstance(label, (int, np.integer)) and 2 <= label <= 5:
            return self.k + int(label) - 2
        raise InvalidParameter(f"bad state label {label!r}")

    def observable(self, i):
        """Observable disease state (1..5) for latent index ``i``."""
        if not 0 <= i < self.d:
            raise InvalidParameter(f"latent index {i} outside 0..{self.d - 1}")
        return 1 if i < self.k else i - self.k + 2


def build_intensity(params):
    """Intensity matrix of the latent chain.

    ``params`` needs ``theta`` (onset phase rates), ``lambda23``,
    ``lambda24`` and ``lambda35``.
    """
    theta = np.atleast_1d(np.asarray(params.theta, dtype=float))
    rates = {
        "lambda23": params.lambda23,
        "lambda24": params.lambda24,
        "lambda35": params.lambda35,
    }
    if theta.ndim != 1 or theta.size == 0:
        raise InvalidParameter("theta must be a non-empty vector")
    if not np.all(np.isfinite(theta)) or np.any(theta <= 0):
        raise InvalidParameter(f"onset rates must be finite and > 0, got {theta.tolist()}")
    for name, value in rates.items():
        if not np.isfinite(value) or value <= 0:
            raise InvalidParameter(f"{name} must be finite and > 0, got {value}")

    space = StateSpace(theta.size)
    lam = np.zeros((space.d, space.d))
    for j, rate in enumerate(theta):
        lam[j, j + 1] = rate
    lam[space.early, space.advanced] = rates["lambda23"]
    lam[space.early, space.clinical_early] = rates["lambda24"]
    lam[space.advanced, space.clinical_advanced] = rates["lambda35"]
    lam[np.diag_indices(space.d)] = -lam.sum(axis=1)
    return lam


def _check_stochastic(p):
    dev = np.max(np.abs(p.sum(axis=1) - 1.0))
    if dev > ROW_SUM_FAIL or p.min() < -ROW_SUM_FAIL:
        raise NumericalIntegrityError(f"transition matrix is not stochastic (row-sum error {dev:.3g})")
    # clip roundoff so downstream probabilities stay in [0, 1]
    np.clip(p, 0.0, 1.0, out=p)
    if dev > ROW_SUM_TOL:
        p /= p.sum(axis=1, keepdims=True)
    return p


def transition_matrix(lam, t):
    """Transition probabilities ``P(t) = exp(lam * t)``."""
    if not np.isfinite(t) or t < 0:
        raise InvalidParameter(f"elapsed time must be >= 0, got {t}")
    lam = np.asarray(lam, dtype=float)
    if t == 0:
        return np.eye(lam.shape[0])
    return _check_stochastic(expm(lam * t))


def transition_density(lam, t, i, j):
    """Density of first entry into ``j`` at time ``t`` starting from ``i``.

    Computed as ``sum_l P[i, l](t) * lam[l, j]``; ``i`` and ``j`` are
    latent indices.
    """
    lam = np.asarray(lam, dtype=float)
    d = lam.shape[0]
    for s in (i, j):
        if not isinstance(s, (int, np.integer)) or not 0 <= s < d:
            raise InvalidParameter(f"state index {s!r} outside 0..{d - 1}")
    p = transition_matrix(lam, t)
    off = lam[:, j].copy()
    off[j] = 0.0
    return float(max(p[i] @ off, 0.0))


def transition_matrix_derivatives(lam, dlams, t):
    """``P(t)`` together with ``dP(t)/dp`` for each generator direction.

    ``dlams`` is a sequence of matrices ``dlam/dp``.  Uses the block
    upper-triangular identity ``exp([[A, E], [0, A]]) = [[e^A, L(A, E)], [0, e^A]]``
    with all directions stacked into one block matrix.
    """
    lam = np.asarray(lam, dtype=float)
    d = lam.shape[0]
    m = len(dlams)
    big = np.zeros((d * (m + 1), d * (m + 1)))
    for b in range(m + 1):
        big[b * d:(b + 1) * d, b * d:(b + 1) * d] = lam
    for b, dl in enumerate(dlams, start=1):
        big[:d, b * d:(b + 1) * d] = dl
    e = expm(big * t)
    p = e[:d, :d]
    dp = np.stack([e[:d, b * d:(b + 1) * d] for b in range(1, m + 1)]) if m else np.zeros((0, d, d))
    return p, dp
