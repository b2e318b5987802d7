"""Regenerate the bundled fixtures under src/stageshift/data/fixtures.

Registry counts are not redistributable, so every incidence table here is
synthetic: expected counts from a known natural history times approximate
registry person-years, with seeded Poisson noise.

* lung: onset clock chosen so that cumulative onset and clinical diagnosis
  under OMST=2/LMST=0.5 match the reference lung curves at ages 50-80,
  with 66% of clinical diagnoses in advanced stage.
* liver, bladder, pancreas: onset clocks matched to approximate
  cumulative incidence at 50-80, advanced fractions 0.45/0.25/0.85.
* toy_k3: the round-trip table (k=3, lambda23=0.3, OMST=3, LMST=1,
  5e7 person-years per age group).

Fitted-parameter fixtures are then produced with ``stageshift.calibration.fit``.

Usage: python scripts/build_fixtures.py
"""

import json
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from stageshift import io as sio
from stageshift.calibration import FitConfig, IncidenceTable, OptimizerSettings, expected_counts, fit, write_incidence
from stageshift.natural_history import (
    NaturalHistoryParams,
    SojournHypothesis,
    cumulative_diagnosis,
    cumulative_onset,
)

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "src" / "stageshift" / "data" / "fixtures"

AGE_LO = np.arange(0, 90, 5.0)
AGE_HI = np.append(AGE_LO[1:], np.inf)

# US resident population (millions) by 5-year group, scaled to a ~9.4%
# registry catchment over the tabulation period
POP_2005 = np.array([20.3, 19.5, 20.9, 21.0, 20.8, 19.9, 20.0, 21.1, 22.9, 22.5,
                     20.0, 17.5, 13.0, 10.1, 8.5, 7.4, 5.5, 4.9])
POP_2013 = np.array([19.9, 20.5, 20.7, 21.4, 22.6, 21.6, 21.3, 19.6, 21.0, 21.5,
                     22.6, 21.0, 18.2, 14.3, 10.3, 7.5, 5.8, 6.0])
PY_2002_2009 = POP_2005 * 1e6 * 0.094 * 8
PY_2011_2015 = POP_2013 * 1e6 * 0.094 * 5

CHECK_AGES = (50, 60, 70, 80)
LUNG_ONSET = np.array([273, 1077, 3058, 6846]) / 1e5
LUNG_DIAGNOSIS = np.array([203, 858, 2560, 5952]) / 1e5

SITES = {
    # cumulative clinical diagnosis by 50/60/70/80, advanced fraction
    "liver": (np.array([0.0006, 0.0031, 0.0064, 0.0098]), 0.45),
    "bladder": (np.array([0.0003, 0.0024, 0.0082, 0.0194]), 0.25),
    "pancreas": (np.array([0.0003, 0.0021, 0.0061, 0.0131]), 0.85),
}
SITE_K = 6
LUNG_K = 12  # deviance trace flattens here (708 at k=11, ~31 from k=12 on)
MCED_HYPOTHESES = {"omst5_lmst1": (5.0, 1.0), "omst2_lmst0.5": (2.0, 0.5)}


def progression_rate(frac_advanced, hyp):
    return frac_advanced / (hyp.omst - frac_advanced * hyp.lmst)


def match_onset(k, hyp, l23, diag_targets, onset_targets=None, start=0.08):
    def resid(z):
        p = NaturalHistoryParams.from_hypothesis(np.exp(z), l23, hyp)
        r = [np.log(cumulative_diagnosis(p, a)) - np.log(t) for a, t in zip(CHECK_AGES, diag_targets)]
        if onset_targets is not None:
            r += [np.log(cumulative_onset(p, a)) - np.log(t) for a, t in zip(CHECK_AGES, onset_targets)]
        return r

    z0 = np.log(np.full(k, start)) + np.linspace(-0.05, 0.05, k)
    res = least_squares(resid, z0, bounds=(np.log(1e-6), np.log(10.0)))
    return NaturalHistoryParams.from_hypothesis(np.exp(res.x), l23, hyp)


def synth_table(params, person_years, seed):
    blank = IncidenceTable(AGE_LO, AGE_HI, np.zeros(18), np.zeros(18), person_years)
    mean = expected_counts(params, blank)
    rng = np.random.default_rng(seed)
    return IncidenceTable(AGE_LO, AGE_HI, rng.poisson(mean[:, 0]), rng.poisson(mean[:, 1]),
                          np.round(person_years))


def save_table(table, name, header):
    path = OUT / name
    with open(path, "w", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        write_incidence(table, fh)
    return path


def save_fit(result, name, **meta):
    rec = sio.params_record(result.params, k=result.k, **meta, diagnostics=result.diagnostics())
    sio.write_json(OUT / name, rec)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    generators = {}

    hyp = SojournHypothesis(2.0, 0.5)
    lung_gen = match_onset(12, hyp, progression_rate(0.66, hyp), LUNG_DIAGNOSIS, LUNG_ONSET, start=0.09)
    generators["lung"] = lung_gen.to_dict()
    lung = synth_table(lung_gen, PY_2002_2009, seed=2002)
    save_table(lung, "lung_incidence.csv", [
        "Synthetic lung incidence, ages 0-85+, registry-sized person-years (8 years).",
        "Generated from the onset clock in generators.json; not registry data.",
    ])

    opt = OptimizerSettings(multistart=4, seed=0)
    res = fit(lung, FitConfig(LUNG_K, SojournHypothesis(4.0, 1.4), risk_inflation=3.0, optimizer=opt))
    save_fit(res, "lung_nlst_fit.json", site="lung", risk_inflation=3.0)

    gen_hyp = SojournHypothesis(3.0, 0.75)
    for seed, (site, (targets, frac)) in enumerate(SITES.items(), start=2011):
        gen = match_onset(SITE_K, gen_hyp, progression_rate(frac, gen_hyp), targets, start=0.05)
        generators[site] = gen.to_dict()
        table = synth_table(gen, PY_2011_2015, seed=seed)
        save_table(table, f"{site}_incidence.csv", [
            f"Synthetic {site} incidence, ages 0-85+, registry-sized person-years (5 years).",
            f"Advanced-stage fraction about {frac}; generated from generators.json, not registry data.",
        ])
        for label, (om, lm) in MCED_HYPOTHESES.items():
            r = fit(table, FitConfig(SITE_K, SojournHypothesis(om, lm), optimizer=opt))
            save_fit(r, f"{site}_{label}.json", site=site)

    toy = NaturalHistoryParams.from_hypothesis([0.06, 0.05, 0.04], 0.3, SojournHypothesis(3.0, 1.0))
    generators["toy_k3"] = toy.to_dict()
    save_table(synth_table(toy, np.full(18, 5e7), seed=3), "toy_k3_incidence.csv", [
        "Synthetic round-trip table: k=3, lambda23=0.3, OMST=3, LMST=1, 5e7 person-years per group.",
    ])

    sio.write_json(OUT / "generators.json", generators)
    print(json.dumps({k: round(v["emst"], 3) for k, v in generators.items()}))


if __name__ == "__main__":
    main()
