"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (visible without ``-s``) and then
asserts at the stated tolerance.
"""

import csv
import json
import time
from itertools import product

import numpy as np
import pytest

from stageshift.calibration import (
    OptimizerSettings,
    FitConfig,
    PoissonObjective,
    fit,
    load_incidence,
    select_onset_dimension,
)
from stageshift.cli import EXIT_OK, main
from stageshift.ctmc import build_intensity, transition_matrix
from stageshift.miscan import derive_sojourn_inputs, load_tables, weighted_sensitivity
from stageshift.natural_history import NaturalHistoryParams, SojournHypothesis, hazards
from stageshift.projection import (
    ScreeningProtocol,
    emission_matrix,
    initial_distribution,
    sequence_probability,
    stage_shift,
)
from stageshift.simulation import simulate_cohort

from conftest import CONFIGS, FIXTURES, random_params
from test_calibration import fd_gradient


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
    return emit


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---- 1 ----------------------------------------------------------------------

SOJOURN = {"adenocarcinoma": (4.09, 3.09, 1.44), "squamous": (4.09, 3.22, 1.35),
           "small_cell": (2.90, 2.05, 0.94), "other": (4.48, 3.25, 1.49)}
WEIGHTED = (3.99, 2.98, 1.35)
SENSITIVITY = {("ldct", "early"): 35.5, ("ldct", "advanced"): 82.1,
               ("xray", "early"): 13.1, ("xray", "advanced"): 56.4}


def test_criterion_1_miscan_inputs(report):
    t0 = time.perf_counter()
    tables = load_tables()
    err_soj = 0.0
    for hist, want in SOJOURN.items():
        s = derive_sojourn_inputs(tables.chains[hist])
        err_soj = max(err_soj, *np.abs(np.array([s.omst, s.emst, s.lmst]) - want))
    _, mean = tables.sojourn()
    err_soj = max(err_soj, *np.abs(np.array([mean.omst, mean.emst, mean.lmst]) - WEIGHTED))
    err_sens = max(abs(weighted_sensitivity(tables.sensitivity[test], tables.weights, g)[0] - v)
                   for (test, g), v in SENSITIVITY.items())
    elapsed = time.perf_counter() - t0
    ok = err_soj <= 0.02 and err_sens <= 1.0 and elapsed < 1.0
    report(1, ok, f"max sojourn error {err_soj:.4f} y (<=0.02), max sensitivity error "
                  f"{err_sens:.3f} pp (<=1), {elapsed:.2f} s (<1)")
    assert ok


# ---- 2 ----------------------------------------------------------------------

def enumerate_paths(params, protocol, obs):
    lam = build_intensity(params)
    ages = protocol.ages
    steps = [transition_matrix(lam, b - a) for a, b in zip(ages, ages[1:])]
    pi = initial_distribution(params, ages[0])
    e = emission_matrix(params.k, protocol.sensitivity_early, protocol.sensitivity_advanced)
    total = 0.0
    for path in product(range(params.k + 4), repeat=len(obs)):
        p = pi[path[0]] * e[path[0], obs[0] - 1]
        for i in range(1, len(obs)):
            p *= steps[i - 1][path[i - 1], path[i]] * e[path[i], obs[i] - 1]
        total += p
    return total


def random_protocol(rng):
    return ScreeningProtocol.periodic(rng.uniform(40, 70), int(rng.integers(1, 5)), rng.uniform(0.5, 2.0),
                                      rng.uniform(0.5, 4.0), rng.uniform(), rng.uniform())


def test_criterion_2_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst_z, worst_enum = 0.0, 0.0
    for case in range(20):
        params = random_params(rng, k_max=3, theta=(0.01, 0.1))
        protocol = random_protocol(rng)
        proj = stage_shift(params, protocol)
        tally = simulate_cohort(params, protocol, 1_000_000, seed=1000 + case)
        for sim, se, exact in zip(tally.proportions(), tally.standard_errors(),
                                  (proj.screen_detected, proj.interval_clinical, proj.control)):
            # a zero-count cell has zero plug-in SE; use the one-event floor
            z = np.abs(sim - exact) / np.maximum(se, 1.0 / tally.n)
            worst_z = max(worst_z, float(z.max()))
    for _ in range(10):
        params = random_params(rng, k_max=2)
        protocol = random_protocol(rng)
        for _ in range(4):
            obs = tuple(int(o) for o in rng.integers(1, 6, size=rng.integers(1, protocol.n + 2)))
            diff = abs(sequence_probability(params, protocol, obs) - enumerate_paths(params, protocol, obs))
            worst_enum = max(worst_enum, diff)
    elapsed = time.perf_counter() - t0
    ok = worst_z <= 4 and worst_enum <= 1e-12 and elapsed < 300
    report(2, ok, f"max |analytic - MC| = {worst_z:.2f} SE (<=4), forward vs enumeration "
                  f"{worst_enum:.2e} (<=1e-12), {elapsed:.0f} s (<300)")
    assert ok


# ---- 3 ----------------------------------------------------------------------

def test_criterion_3_inert_screening(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        params = random_params(rng, k_max=3)
        protocol = random_protocol(rng).with_sensitivity(0.0, 0.0)
        worst = max(worst, abs(stage_shift(params, protocol).cumulative_shift))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 10
    report(3, ok, f"max |shift| with Be=Bl=0 over 50 cases = {worst:.2e} (<=1e-10), {elapsed:.2f} s (<10)")
    assert ok


# ---- 4 ----------------------------------------------------------------------

# the k+1 model contains the k model only as one onset rate goes to infinity;
# with rates capped the embedded k fit carries an excess of order 1e-4
TRACE_TOLERANCE = 1e-3


def test_criterion_4_round_trip(report):
    t0 = time.perf_counter()
    truth = NaturalHistoryParams.from_dict(json.loads((FIXTURES / "generators.json").read_text())["toy_k3"])
    table = load_incidence(FIXTURES / "toy_k3_incidence.csv")
    hyp = truth.hypothesis
    res = fit(table, FitConfig(3, hyp))
    e_emst = abs(res.params.emst / truth.emst - 1)
    e_l23 = abs(res.params.lambda23 / truth.lambda23 - 1)
    sel = select_onset_dimension(table, hyp, 5)
    dev = [d for _, d in sel.trace]
    rise = max(b - a for a, b in zip(dev, dev[1:]))
    elapsed = time.perf_counter() - t0
    ok = e_emst <= 0.03 and e_l23 <= 0.05 and rise <= TRACE_TOLERANCE and elapsed < 600
    report(4, ok, f"EMST error {100 * e_emst:.3g}% (<=3), lambda23 error {100 * e_l23:.3g}% (<=5), "
                  f"largest deviance rise along trace {rise:.1e} (<= {TRACE_TOLERANCE:g}), chosen k={sel.k}, "
                  f"{elapsed:.0f} s")
    assert ok


# ---- 5 ----------------------------------------------------------------------

def test_criterion_5_nlst(report, tmp_path):
    assert main(["project", "--config", str(CONFIGS / "nlst_project.json"), "--out", str(tmp_path)]) == EXIT_OK
    s = json.loads((tmp_path / "summary.json").read_text())
    shift, rel = 100 * s["shift"], 100 * s["relative_reduction_vs_comparator"]
    ok = abs(shift - 25) <= 1.5 and abs(rel - 17) <= 1.5
    report(5, ok, f"LDCT vs none {shift:.1f}% (25 +/- 1.5), LDCT vs x-ray {rel:.1f}% (17 +/- 1.5)")
    assert ok


# ---- 6 ----------------------------------------------------------------------

REFERENCE_MCED = {
    # (early sensitivity, protocol, site): (OMST=5/LMST=1, OMST=2/LMST=0.5)
    (0.3, "annual", "liver"): (29.9, 24.3), (0.3, "annual", "bladder"): (27.3, 24.6),
    (0.3, "annual", "pancreas"): (26.4, 22.3), (0.3, "biennial", "liver"): (26.3, 16.0),
    (0.3, "biennial", "bladder"): (25.4, 15.7), (0.3, "biennial", "pancreas"): (24.3, 13.7),
    (0.7, "annual", "liver"): (55.0, 48.3), (0.7, "annual", "bladder"): (53.8, 48.6),
    (0.7, "annual", "pancreas"): (52.3, 45.0), (0.7, "biennial", "liver"): (51.3, 24.3),
    (0.7, "biennial", "bladder"): (49.7, 33.4), (0.7, "biennial", "pancreas"): (48.0, 29.8),
}
HYPOTHESIS_COLUMN = {"omst5_lmst1": 0, "omst2_lmst0.5": 1}


def test_criterion_6_mced_sites(report, tmp_path):
    t0 = time.perf_counter()
    assert main(["mced", "--config", str(CONFIGS / "mced_sites.json"), "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "mced.csv")
    errs = []
    for r in rows:
        want = REFERENCE_MCED[(float(r["sensitivity_early"]), r["protocol"], r["site"])][HYPOTHESIS_COLUMN[r["hypothesis"]]]
        errs.append(abs(100 * float(r["shift"]) - want))
    elapsed = time.perf_counter() - t0
    within = sum(e <= 0.5 for e in errs)
    ok = len(rows) == 24 and within == 24 and elapsed < 120
    report(6, ok, f"{within}/{len(rows)} shifts within 0.5 pp of the reference values "
                  f"(max error {max(errs):.1f} pp), {elapsed:.1f} s (<120)")
    assert ok


# ---- 7 ----------------------------------------------------------------------

def test_criterion_7_sojourn_sweep(report, tmp_path):
    t0 = time.perf_counter()
    assert main(["sweep", "--config", str(CONFIGS / "sojourn_sweep.json"), "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "sweep.csv")
    elapsed = time.perf_counter() - t0
    lines, ok = [], elapsed < 120
    for label, (lo, hi) in {"followup_1y": (43, 76), "followup_4.5y": (23, 66)}.items():
        perfect = sorted((float(r["omst"]), 100 * float(r["shift"])) for r in rows
                         if r["protocol"] == label and float(r["sensitivity_early"]) == 1.0)
        first, last = perfect[0][1], perfect[-1][1]
        ok &= abs(first - lo) <= 2 and abs(last - hi) <= 2
        lines.append(f"{label} {first:.1f}-{last:.1f}% ({lo}-{hi} +/- 2)")
    monotone = True
    for key in {(r["params"], r["protocol"]) for r in rows}:
        s = [float(r["shift"]) for r in rows if (r["params"], r["protocol"]) == key]
        be = [float(r["sensitivity_early"]) for r in rows if (r["params"], r["protocol"]) == key]
        order = np.argsort(be)
        monotone &= bool(np.all(np.diff(np.array(s)[order]) >= 0))
    ok &= monotone and all(r["status"] == "ok" for r in rows)
    report(7, ok, f"{'; '.join(lines)}; non-decreasing in Be: {monotone}; {elapsed:.0f} s (<120)")
    assert ok


# ---- 8 ----------------------------------------------------------------------

def test_criterion_8_numerical_integrity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    ck = rs = hz = gr = 0.0
    for _ in range(30):
        p = random_params(rng, k_max=8, theta=(0.02, 1.0))
        lam = build_intensity(p)
        s, t = rng.uniform(0, 50, 2)
        ck = max(ck, np.abs(transition_matrix(lam, s + t) - transition_matrix(lam, s) @ transition_matrix(lam, t)).max())
        rs = max(rs, np.abs(transition_matrix(lam, rng.uniform(0, 120)).sum(axis=1) - 1).max())
        a = rng.uniform(1, 90)
        c = hazards(p, [a])
        if c.computable[0]:
            h = 1e-5
            d = (transition_matrix(lam, a + h)[0] - transition_matrix(lam, a - h)[0]) / (2 * h)
            sp = p.space
            hz = max(hz, abs(c.h4[0] * c.survival[0] - d[sp.clinical_early]),
                     abs(c.h5[0] * c.survival[0] - d[sp.clinical_advanced]))
    table = load_incidence(FIXTURES / "liver_incidence.csv")
    for _ in range(10):
        k = int(rng.integers(1, 5))
        obj = PoissonObjective(table, SojournHypothesis(3.0, 1.0), k)
        z = np.concatenate([np.log(rng.uniform(0.02, 0.2, k)), [rng.uniform(-2, 2)]])
        _, g = obj.evaluate(z)
        fd = fd_gradient(obj, z)
        gr = max(gr, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-300))))
    elapsed = time.perf_counter() - t0
    ok = ck <= 1e-9 and rs <= 1e-10 and hz <= 1e-5 and gr <= 1e-4 and elapsed < 60
    report(8, ok, f"Chapman-Kolmogorov {ck:.1e} (<=1e-9), row sums {rs:.1e} (<=1e-10), "
                  f"hazard vs FD {hz:.1e} (<=1e-5), gradient vs FD rel {gr:.1e} (<=1e-4), {elapsed:.1f} s (<60)")
    assert ok
