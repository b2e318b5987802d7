"""Discrete-event cohort sampler for the screening trial.

Independent of the matrix-exponential machinery: life histories are drawn
from exponential dwell times, screens are Bernoulli tests, and the trial
quantities are tallied directly.  Used as a verification oracle for the
analytic projection.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter
from .projection import TrialProjection

CHUNK = 200_000


@dataclass
class CohortTally:
    """Counts from a simulated trial with ``n`` enrollees in each arm."""

    n: int
    screen_detected: np.ndarray
    interval_clinical: np.ndarray
    control: np.ndarray
    screen_detected_early: np.ndarray
    sampled: int

    def __add__(self, other):
        return CohortTally(
            n=self.n + other.n,
            screen_detected=self.screen_detected + other.screen_detected,
            interval_clinical=self.interval_clinical + other.interval_clinical,
            control=self.control + other.control,
            screen_detected_early=self.screen_detected_early + other.screen_detected_early,
            sampled=self.sampled + other.sampled,
        )

    def proportions(self):
        return (self.screen_detected / self.n, self.interval_clinical / self.n, self.control / self.n)

    def standard_errors(self):
        """Binomial standard errors of the three per-interval proportions."""
        return tuple(np.sqrt(p * (1 - p) / self.n) for p in self.proportions())

    def projection(self):
        sd, jd, cd = self.proportions()
        return TrialProjection(screen_detected=sd, interval_clinical=jd, control=cd)


def _histories(params, size, rng):
    """Ages of onset, progression and clinical diagnosis for ``size`` people.

    ``progress_age`` is ``inf`` for people surfacing in early stage;
    ``clinical_age`` is the age of clinical diagnosis in either stage.
    """
    theta = np.asarray(params.theta)
    onset = rng.exponential(1.0 / theta[:, None], size=(theta.size, size)).sum(axis=0)
    exit_rate = params.lambda23 + params.lambda24
    early_exit = onset + rng.exponential(1.0 / exit_rate, size=size)
    progresses = rng.random(size) < params.lambda23 / exit_rate
    advanced_exit = early_exit + rng.exponential(1.0 / params.lambda35, size=size)
    progress_age = np.where(progresses, early_exit, np.inf)
    clinical_age = np.where(progresses, advanced_exit, early_exit)
    return onset, progress_age, clinical_age, progresses


def _run_chunk(params, protocol, wanted, rng):
    ages = np.asarray(protocol.ages)
    a1 = ages[0]
    n_int = protocol.n
    sd = np.zeros(n_int, dtype=np.int64)
    se = np.zeros(n_int, dtype=np.int64)
    jd = np.zeros(n_int, dtype=np.int64)
    cd = np.zeros(n_int, dtype=np.int64)
    enrolled = 0
    sampled = 0
    while enrolled < wanted:
        batch = max(wanted - enrolled, 1024)
        onset, progress, clinical, adv = _histories(params, batch, rng)
        draws = rng.random((n_int, batch))
        sampled += batch
        keep = np.flatnonzero(clinical >= a1)[: wanted - enrolled]
        onset, progress, clinical, adv = onset[keep], progress[keep], clinical[keep], adv[keep]
        draws = draws[:, keep]
        enrolled += keep.size

        # control arm: advanced clinical diagnoses in [a_l, a_l+1)
        for l in range(n_int):
            cd[l] += np.count_nonzero(adv & (clinical >= ages[l]) & (clinical < ages[l + 1]))

        # screened arm
        active = np.ones(keep.size, dtype=bool)
        for l in range(n_int):
            a = ages[l]
            in_early = active & (onset <= a) & (a < progress) & (clinical > a)
            in_adv = active & (progress <= a) & (clinical > a)
            hit_early = in_early & (draws[l] < protocol.sensitivity_early)
            hit_adv = in_adv & (draws[l] < protocol.sensitivity_advanced)
            se[l] += np.count_nonzero(hit_early)
            sd[l] += np.count_nonzero(hit_adv)
            active &= ~(hit_early | hit_adv)
            surfaced = active & (clinical > a) & (clinical <= ages[l + 1])
            jd[l] += np.count_nonzero(surfaced & adv)
            active &= ~surfaced
    return CohortTally(enrolled, sd, jd, cd, se, sampled)


def simulate_cohort(params, protocol, n_individuals, seed, workers=None):
    """Simulate ``n_individuals`` trial enrollees (people undiagnosed at the
    first screen age) under both arms.

    Enrollees are generated in fixed-size chunks, each with its own child
    seed spawned from ``seed``, so tallies are identical for any ``workers``.
    """
    n = int(n_individuals)
    if n < 1:
        raise InvalidParameter("need at least one individual")
    sizes = [CHUNK] * (n // CHUNK) + ([n % CHUNK] if n % CHUNK else [])
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))

    def one(i):
        return _run_chunk(params, protocol, sizes[i], np.random.default_rng(seeds[i]))

    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, range(len(sizes))))
    else:
        parts = [one(i) for i in range(len(sizes))]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total
