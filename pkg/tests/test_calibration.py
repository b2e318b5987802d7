import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import poisson

from stageshift import calibration
from stageshift.calibration import (
    FitConfig,
    IncidenceTable,
    OptimizerSettings,
    PoissonObjective,
    deviance,
    expected_counts,
    fit,
    inflate_risk,
    load_incidence,
    poisson_loglik,
    select_onset_dimension,
    write_incidence,
)
from stageshift.errors import InvalidParameter, NonConvergence, TableFormatError
from stageshift.natural_history import (
    NaturalHistoryParams,
    SojournHypothesis,
    cumulative_diagnosis,
    cumulative_onset,
    hazards,
)

from conftest import FIXTURES, TOY_K1, sample_histories

AGE_LO = np.arange(0, 90, 5.0)
AGE_HI = np.append(AGE_LO[1:], np.inf)
HEADER = "age_lo,age_hi,early_count,advanced_count,person_years\n"


def table_text(rows):
    return HEADER + "".join(",".join(str(v) for v in r) + "\n" for r in rows)


def good_rows():
    rows = [[lo, lo + 5, 1, 2, 1000] for lo in range(0, 85, 5)]
    rows.append([85, "", 3, 4, 500])
    return rows


def exact_table(params, person_years=1e7):
    """Table whose counts equal the model's expected counts."""
    blank = IncidenceTable(AGE_LO, AGE_HI, np.zeros(18), np.zeros(18), np.full(18, person_years))
    m = expected_counts(params, blank)
    return IncidenceTable(AGE_LO, AGE_HI, m[:, 0], m[:, 1], blank.person_years)


class TestLoadIncidence:
    def test_well_formed(self):
        t = load_incidence(table_text(good_rows()))
        assert len(t) == 18
        assert t.midpoints[-1] == 87.5
        assert t.midpoints[0] == 2.5

    def test_bundled_lung(self):
        t = load_incidence(FIXTURES / "lung_incidence.csv")
        assert len(t) == 18 and t.observed.sum() > 100_000

    def test_stream_and_comments(self):
        text = "# a comment\n" + table_text(good_rows()) + "# trailing\n"
        assert len(load_incidence(io.StringIO(text))) == 18

    def test_negative_count_names_row(self):
        rows = good_rows()
        rows[6][3] = -1
        with pytest.raises(TableFormatError, match=r"row 7: advanced_count"):
            load_incidence(table_text(rows))

    def test_gap(self):
        rows = good_rows()
        del rows[9]
        with pytest.raises(TableFormatError, match="contiguous"):
            load_incidence(table_text(rows))

    def test_overlap(self):
        rows = good_rows()
        rows[3][0] = 12
        with pytest.raises(TableFormatError, match="row 4"):
            load_incidence(table_text(rows), group_width=None)

    def test_wrong_width(self):
        rows = good_rows()
        rows[2][1] = 16
        with pytest.raises(TableFormatError, match="5 years"):
            load_incidence(table_text(rows))

    @pytest.mark.parametrize("header", [
        "age_lo,age_hi,early_count,person_years\n",
        "age_lo,age_hi,early_count,advanced_count,person_years,extra\n",
        "age_lo,age_high,early_count,advanced_count,person_years\n",
    ])
    def test_header(self, header):
        with pytest.raises(TableFormatError, match="header"):
            load_incidence(header + "0,5,1,1,100\n")

    def test_non_integer_count(self):
        rows = good_rows()
        rows[0][2] = 1.5
        with pytest.raises(TableFormatError, match="row 1: early_count must be an integer"):
            load_incidence(table_text(rows))

    def test_counts_without_person_years(self):
        rows = good_rows()
        rows[4][4] = 0
        with pytest.raises(TableFormatError, match="row 5"):
            load_incidence(table_text(rows))

    def test_open_group_only_last(self):
        rows = good_rows()
        rows[5][1] = ""
        with pytest.raises(TableFormatError):
            load_incidence(table_text(rows))

    def test_empty(self):
        with pytest.raises(TableFormatError):
            load_incidence("# nothing\n\n")
        with pytest.raises(TableFormatError):
            load_incidence(HEADER)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_incidence(tmp_path / "absent.csv")

    def test_write_round_trip(self):
        t = load_incidence(table_text(good_rows()))
        buf = io.StringIO()
        write_incidence(t, buf)
        back = load_incidence(buf.getvalue())
        np.testing.assert_array_equal(back.observed, t.observed)
        np.testing.assert_array_equal(back.age_hi, t.age_hi)
        np.testing.assert_array_equal(back.person_years, t.person_years)


class TestInflateRisk:
    def make(self, early):
        return IncidenceTable([0, 5], [5, np.inf], early, [0, 0], [1e5, 1e5])

    def test_identity(self):
        t = self.make([7, 9])
        np.testing.assert_array_equal(inflate_risk(t, 1.0).observed, t.observed)

    def test_factor_three(self):
        assert inflate_risk(self.make([100, 0]), 3.0).early[0] == 300

    def test_half_to_even(self):
        # 252.5 and 257.5 go to their even neighbours
        out = inflate_risk(self.make([101, 103]), 2.5).early
        assert out.tolist() == [252, 258]

    def test_person_years_unchanged(self):
        t = self.make([1, 2])
        np.testing.assert_array_equal(inflate_risk(t, 3.0).person_years, t.person_years)

    @pytest.mark.parametrize("f", [0.0, -1.0, float("nan")])
    def test_bad_factor(self, f):
        with pytest.raises(InvalidParameter):
            inflate_risk(self.make([1, 1]), f)


class TestLikelihood:
    def test_hand_value(self):
        assert calibration._loglik_terms([3], [2.0], True) == pytest.approx(3 * math.log(2) - 2 - math.log(6))
        assert calibration._loglik_terms([3], [2.0], True) == pytest.approx(-1.7123, abs=1e-4)
        assert calibration._loglik_terms([0], [0.5], True) == pytest.approx(-0.5)

    def test_matches_scipy_pmf(self):
        t = load_incidence(FIXTURES / "toy_k3_incidence.csv")
        p = NaturalHistoryParams.from_hypothesis([0.06, 0.05, 0.04], 0.3, SojournHypothesis(3, 1))
        m = expected_counts(p, t)
        assert poisson_loglik(p, t) == pytest.approx(poisson.logpmf(t.observed, m).sum(), abs=1e-6)
        kernel = poisson_loglik(p, t, include_constant=False)
        assert kernel - poisson_loglik(p, t) == pytest.approx(
            sum(math.lgamma(o + 1) for o in t.observed.ravel()), abs=1e-6)

    def test_expected_counts_arithmetic(self):
        t = IncidenceTable([55.0], [60.0], [0], [0], [1e6])
        c = hazards(TOY_K1, [57.5])
        np.testing.assert_allclose(expected_counts(TOY_K1, t), [[1e6 * c.h4[0], 1e6 * c.h5[0]]])

    def test_no_progression(self):
        p = NaturalHistoryParams.from_hypothesis((0.05,), 1e-12, SojournHypothesis(2.0, 0.5))
        m = expected_counts(p, IncidenceTable(AGE_LO, AGE_HI, np.zeros(18), np.zeros(18), np.full(18, 1e6)))
        assert m[:, 1].max() < 1e-6

    def test_saturated_is_maximal(self, rng):
        obs = rng.integers(0, 50, size=20).astype(float)
        mean = np.where(obs > 0, obs, 1e-300)
        best = calibration._loglik_terms(obs, obs, True)
        for _ in range(20):
            pert = np.maximum(obs * np.exp(rng.normal(0, 0.1, 20)), 1e-3)
            assert calibration._loglik_terms(obs, pert, True) < best
        assert deviance(obs, mean) == pytest.approx(0.0, abs=1e-9)

    def test_rejected_point(self):
        assert calibration._loglik_terms([1], [0.0], True) == -math.inf
        # onset so fast that nobody is undiagnosed at older ages
        fast = NaturalHistoryParams((5.0,), 5.0, 5.0, 10.0)
        t = IncidenceTable([0, 50], [50, np.inf], [1, 1], [1, 1], [1e3, 1e3], open_width=5)
        assert poisson_loglik(fast, t) == -math.inf

    def test_expected_counts_monte_carlo(self):
        # occurrence/exposure rates from simulated histories vs PY * h(midpoint)
        p = NaturalHistoryParams((0.03,), 0.3, 0.25, 1.2)
        rng = np.random.default_rng(3)
        n = 10_000_000
        ev4 = np.zeros(3)
        ev5 = np.zeros(3)
        expo = np.zeros(3)
        edges = [(39.5, 40.5), (59.5, 60.5), (79.5, 80.5)]
        for _ in range(5):
            _, dx, stage = sample_histories(p, n // 5, rng)
            for i, (lo, hi) in enumerate(edges):
                expo[i] += np.clip(dx - lo, 0, hi - lo).sum()
                inside = (dx >= lo) & (dx < hi)
                ev4[i] += np.count_nonzero(inside & (stage == 4))
                ev5[i] += np.count_nonzero(inside & (stage == 5))
        py = 1e6
        # contiguous groups whose 1st, 3rd and 5th midpoints are 40, 60, 80
        t = IncidenceTable([39.5, 40.5, 59.5, 60.5, 79.5], [40.5, 59.5, 60.5, 79.5, 80.5],
                           np.zeros(5), np.zeros(5), np.full(5, py))
        m = expected_counts(p, t)[::2]
        for col, ev in ((0, ev4), (1, ev5)):
            emp = py * ev / expo
            se = py * np.sqrt(ev) / expo
            assert np.all(np.abs(emp - m[:, col]) < 3 * se)


def fd_gradient(obj, z, h=1e-3):
    """Five-point central differences (truncation error O(h^4))."""
    f = lambda x: obj.evaluate(x, gradient=False)[0]
    out = np.empty(z.size)
    for i in range(z.size):
        e = np.zeros(z.size)
        e[i] = h
        out[i] = (8 * (f(z + e) - f(z - e)) - (f(z + 2 * e) - f(z - 2 * e))) / (12 * h)
    return out


class TestGradient:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 2**31 - 1))
    def test_finite_differences(self, k, seed):
        rng = np.random.default_rng(seed)
        t = load_incidence(FIXTURES / "liver_incidence.csv")
        obj = PoissonObjective(t, SojournHypothesis(3.0, 1.0), k)
        z = np.concatenate([np.log(rng.uniform(0.02, 0.2, k)), [rng.uniform(-2, 2)]])
        _, g = obj.evaluate(z)
        np.testing.assert_allclose(g, fd_gradient(obj, z), rtol=1e-4)

    def test_loglik_convention(self):
        t = load_incidence(FIXTURES / "toy_k3_incidence.csv")
        obj = PoissonObjective(t, SojournHypothesis(3.0, 1.0), 3)
        p = NaturalHistoryParams.from_hypothesis([0.06, 0.05, 0.04], 0.3, SojournHypothesis(3, 1))
        assert obj.evaluate(obj.encode(p))[0] == pytest.approx(poisson_loglik(p, t), abs=1e-6)


class TestFit:
    HYP = SojournHypothesis(3.0, 1.0)

    def test_round_trip_k1(self):
        true = NaturalHistoryParams.from_hypothesis((0.01,), 0.3, self.HYP)
        res = fit(exact_table(true), FitConfig(1, self.HYP, optimizer=OptimizerSettings(multistart=2)))
        assert res.converged
        assert res.params.theta[0] == pytest.approx(0.01, rel=1e-4)
        assert res.params.lambda23 == pytest.approx(0.3, rel=1e-4)
        assert 0 < res.params.lambda23 < self.HYP.lambda23_upper()

    def test_result_consistency(self):
        t = load_incidence(FIXTURES / "bladder_incidence.csv")
        res = fit(t, FitConfig(2, self.HYP, optimizer=OptimizerSettings(multistart=2)))
        assert res.loglik == pytest.approx(poisson_loglik(res.params, t), rel=1e-10)
        assert np.all(res.predicted > 0)
        assert res.deviance == pytest.approx(deviance(t.observed, res.predicted))
        diag = res.diagnostics()
        assert {"loglik", "deviance", "converged", "iterations", "k", "hypothesis"} <= set(diag)
        assert "log(o!)" in diag["loglik_convention"]

    def test_deterministic(self):
        t = load_incidence(FIXTURES / "bladder_incidence.csv")
        cfg = FitConfig(2, self.HYP, optimizer=OptimizerSettings(multistart=3, seed=4))
        assert fit(t, cfg).params == fit(t, cfg).params

    def test_scale_invariance(self):
        t = load_incidence(FIXTURES / "pancreas_incidence.csv")
        cfg = FitConfig(2, self.HYP, optimizer=OptimizerSettings(multistart=2))
        a, b = fit(t, cfg), fit(t.scaled(4.0), cfg)
        np.testing.assert_allclose(b.params.theta, a.params.theta, rtol=1e-4)
        assert b.params.lambda23 == pytest.approx(a.params.lambda23, rel=1e-4)

    def test_all_zero_counts(self):
        t = IncidenceTable(AGE_LO, AGE_HI, np.zeros(18), np.zeros(18), np.full(18, 1e6))
        res = fit(t, FitConfig(2, self.HYP, optimizer=OptimizerSettings(multistart=1)))
        assert res.degenerate
        assert res.rates_at_bound

    def test_inflation_applied(self):
        t = load_incidence(FIXTURES / "liver_incidence.csv")
        res = fit(t, FitConfig(1, self.HYP, risk_inflation=3.0, optimizer=OptimizerSettings(multistart=1)))
        assert res.predicted.sum() == pytest.approx(inflate_risk(t, 3.0).observed.sum(), rel=0.05)

    def test_all_starts_fail(self, monkeypatch):
        def boom(*args, **kwargs):
            raise FloatingPointError("diverged")

        monkeypatch.setattr(calibration, "_optimize", boom)
        t = load_incidence(FIXTURES / "liver_incidence.csv")
        with pytest.raises(NonConvergence) as info:
            fit(t, FitConfig(1, self.HYP, optimizer=OptimizerSettings(multistart=2)))
        assert info.value.best is None

    def test_settings_validation(self):
        with pytest.raises(InvalidParameter):
            OptimizerSettings(multistart=0)
        with pytest.raises(InvalidParameter):
            OptimizerSettings(theta_bounds=(1.0, 0.5))
        with pytest.raises(InvalidParameter):
            FitConfig(1, self.HYP, risk_inflation=0.0)


class TestSelectOnsetDimension:
    HYP = SojournHypothesis(3.0, 1.0)

    def test_generator_k1(self):
        t = exact_table(NaturalHistoryParams.from_hypothesis((0.01,), 0.3, self.HYP))
        sel = select_onset_dimension(t, self.HYP, 3, optimizer=None)
        assert sel.k == 1
        assert [k for k, _ in sel.trace] == [1, 2, 3]

    def test_zero_threshold_selects_k_max(self):
        t = load_incidence(FIXTURES / "toy_k3_incidence.csv")
        sel = select_onset_dimension(t, self.HYP, 3, threshold=0.0, abs_tol=-1.0)
        assert sel.k == 3
        assert sel.chosen.k == 3

    def test_trace_non_increasing(self):
        t = load_incidence(FIXTURES / "toy_k3_incidence.csv")
        sel = select_onset_dimension(t, self.HYP, 5)
        dev = [d for _, d in sel.trace]
        # the k model sits inside the k+1 box only up to a phase at the rate cap
        assert all(b <= a + 1e-3 for a, b in zip(dev, dev[1:]))
        assert sel.k == 3

    def test_k_max(self):
        with pytest.raises(InvalidParameter):
            select_onset_dimension(exact_table(TOY_K1), self.HYP, 0)


@pytest.fixture(scope="module")
def lung_fits():
    t = load_incidence(FIXTURES / "lung_incidence.csv")
    fits = {}
    for h in [(2.0, 0.5), (2.0, 1.0), (4.0, 0.5), (4.0, 1.0)]:
        fits[h] = fit(t, FitConfig(12, SojournHypothesis(*h), optimizer=OptimizerSettings(multistart=2)))
    return t, fits


class TestLungFits:
    """Refits of the bundled lung table under the four reference hypotheses."""

    @pytest.mark.parametrize("hyp,emst", [((2.0, 0.5), 1.67), ((2.0, 1.0), 1.34), ((4.0, 0.5), 3.67), ((4.0, 1.0), 3.34)])
    def test_emst(self, lung_fits, hyp, emst):
        assert lung_fits[1][hyp].params.emst == pytest.approx(emst, abs=0.05)

    def test_reference_cumulative_incidence(self, lung_fits):
        fits = lung_fits[1]
        assert 1e5 * cumulative_onset(fits[(2.0, 0.5)].params, 70) == pytest.approx(3058, rel=0.03)
        assert 1e5 * cumulative_onset(fits[(4.0, 0.5)].params, 80) == pytest.approx(7740, rel=0.03)
        assert 1e5 * cumulative_diagnosis(fits[(2.0, 0.5)].params, 80) == pytest.approx(5952, rel=0.03)

    def test_diagnosis_invariant_to_hypothesis(self, lung_fits):
        for a in (50, 60, 70, 80):
            v = [cumulative_diagnosis(f.params, a) for f in lung_fits[1].values()]
            assert max(v) / min(v) - 1 < 0.02

    def test_predicted_incidence_similar(self, lung_fits):
        t, fits = lung_fits
        pred = np.array([f.predicted for f in fits.values()])
        spread = (pred.max(axis=0) - pred.min(axis=0)) / pred.min(axis=0)
        obs = t.observed
        # 5%, or two Poisson standard errors where counts are too small to resolve 5%
        limit = np.maximum(0.05, 2 / np.sqrt(np.where(obs > 0, obs, np.nan)))
        informative = obs > 0
        assert np.all(spread[informative] < limit[informative])

    def test_nlst_hypothesis_emst(self):
        t = load_incidence(FIXTURES / "lung_incidence.csv")
        res = fit(t, FitConfig(12, SojournHypothesis(4.0, 1.4), risk_inflation=3.0,
                               optimizer=OptimizerSettings(multistart=2)))
        assert res.params.emst == pytest.approx(3.1, abs=0.1)
