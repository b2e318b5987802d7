"""Convert stage- and histology-specific lung model inputs into the
two-stage model's exogenous inputs: aggregate early/advanced test
sensitivities and the overall/early/late mean sojourn times."""

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import InvalidParameter, TableFormatError

EARLY_STAGES = ("IA", "IB", "II")
ADVANCED_STAGES = ("IIIA", "IIIB", "IV")
STAGES = EARLY_STAGES + ADVANCED_STAGES

TABLE_FILES = {
    "shares": "histology_shares.csv",
    "proportions": "stage_proportions.csv",
    "sensitivity": "sensitivity.csv",
    "sojourn": "sojourn.csv",
    "transitions": "transitions.csv",
}
SEX_WEIGHTS = (0.59, 0.41)


@dataclass(frozen=True)
class StageHistologyWeights:
    """Histology shares and, per histology, the share of each AJCC stage
    within its aggregate group (``{group: {stage: proportion}}``)."""

    shares: dict
    proportions: dict

    def __post_init__(self):
        total = sum(self.shares.values())
        if abs(total - 1.0) > 0.02:
            raise InvalidParameter(f"histology shares sum to {total:.3f}, expected 1")
        for hist in self.shares:
            if hist not in self.proportions:
                raise InvalidParameter(f"no stage proportions for histology {hist!r}")
            for group, column in self.proportions[hist].items():
                s = sum(column.values())
                if abs(s - 1.0) > 0.02:
                    raise InvalidParameter(f"{hist}/{group} stage proportions sum to {s:.3f}")

    @property
    def histologies(self):
        return tuple(self.shares)


@dataclass(frozen=True)
class StageChain:
    """Preclinical stage chain for one histology.

    ``mst`` maps stage to mean sojourn time; ``progression[i]`` is the
    probability of moving from ``stages[i]`` on to ``stages[i + 1]``.
    """

    stages: tuple
    mst: dict
    progression: tuple

    def __post_init__(self):
        if len(self.progression) != len(self.stages) - 1:
            raise InvalidParameter("need one progression probability per successive stage pair")
        for s in self.stages:
            if s not in self.mst:
                raise InvalidParameter(f"missing mean sojourn time for stage {s}")
            if not self.mst[s] > 0:
                raise InvalidParameter(f"mean sojourn time for stage {s} must be > 0")
        if any(not 0.0 <= p <= 1.0 for p in self.progression):
            raise InvalidParameter("progression probabilities must lie in [0, 1]")

    def scaled(self, factor):
        return StageChain(self.stages, {s: v * factor for s, v in self.mst.items()}, self.progression)


@dataclass(frozen=True)
class SojournInputs:
    omst: float
    emst: float
    lmst: float

    def as_dict(self):
        return {"omst": self.omst, "emst": self.emst, "lmst": self.lmst}


def weighted_sensitivity(sens_table, weights, stage_group, groups=None):
    """Aggregate sensitivity for ``stage_group`` ('early' or 'advanced').

    Stage sensitivities are first averaged within each histology using the
    stage proportions (renormalized, since the source rounds), then across
    histologies with the histology shares.  ``sens_table`` maps histology
    to ``{stage: sensitivity}``.
    """
    if stage_group not in ("early", "advanced"):
        raise InvalidParameter(f"stage group must be 'early' or 'advanced', got {stage_group!r}")
    by_hist = {}
    for hist in weights.histologies:
        props = weights.proportions[hist].get(stage_group)
        if not props:
            raise InvalidParameter(f"no {stage_group} stage proportions for {hist}")
        if hist not in sens_table:
            raise InvalidParameter(f"missing sensitivity column for histology {hist!r}")
        num = 0.0
        for stage, w in props.items():
            if stage not in sens_table[hist]:
                raise InvalidParameter(f"missing sensitivity cell ({hist}, {stage})")
            num += w * sens_table[hist][stage]
        by_hist[hist] = num / sum(props.values())
    total = sum(weights.shares.values())
    return sum(weights.shares[h] * v for h, v in by_hist.items()) / total, by_hist


def chain_reach_probability(chain, from_stage, to_stage):
    """Probability of ever reaching ``to_stage`` from ``from_stage``."""
    try:
        i, j = chain.stages.index(from_stage), chain.stages.index(to_stage)
    except ValueError:
        raise InvalidParameter(f"unknown stage in {from_stage!r} -> {to_stage!r}") from None
    if j < i:
        raise InvalidParameter(f"{to_stage} is not downstream of {from_stage}")
    p = 1.0
    for q in chain.progression[i:j]:
        p *= q
    return p


def _expected_time(chain, start, stages):
    return sum(chain_reach_probability(chain, start, s) * chain.mst[s] for s in stages)


def derive_sojourn_inputs(chain, early=EARLY_STAGES, advanced=ADVANCED_STAGES):
    """Mean preclinical sojourn times for one histology.

    Overall and early times are conditional on starting in the first stage;
    the late time is conditional on entering the first advanced stage.
    """
    first = chain.stages[0]
    return SojournInputs(
        omst=_expected_time(chain, first, chain.stages),
        emst=_expected_time(chain, first, early),
        lmst=_expected_time(chain, advanced[0], advanced),
    )


def weighted_sojourn_inputs(chains, shares):
    """Per-histology sojourn inputs and their share-weighted mean."""
    per = {h: derive_sojourn_inputs(c) for h, c in chains.items()}
    total = sum(shares[h] for h in per)
    mean = SojournInputs(
        *(sum(shares[h] * getattr(per[h], f) for h in per) / total for f in ("omst", "emst", "lmst"))
    )
    return per, mean


def average_sexes(men, women, weights=SEX_WEIGHTS):
    """Sex-weighted mean of two ``{stage: mst}`` mappings."""
    wm, ww = weights
    if set(men) != set(women):
        raise InvalidParameter("sex-specific tables cover different stages")
    return {s: (wm * men[s] + ww * women[s]) / (wm + ww) for s in men}


# ---- table readers --------------------------------------------------------

def _rows(text, name):
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise TableFormatError(f"{name}: empty table")
    reader = csv.DictReader(io.StringIO("\n".join(lines)))
    return reader.fieldnames, list(reader)


def _num(value, name, row, col):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise TableFormatError(f"{name}: missing or non-numeric cell {col!r}", row=row) from None


def _histology_columns(fields, keys, name):
    hists = [f for f in fields if f not in keys]
    if not hists:
        raise TableFormatError(f"{name}: no histology columns")
    return hists


@dataclass
class MiscanTables:
    weights: StageHistologyWeights
    sensitivity: dict
    chains: dict

    def sensitivities(self, test):
        """``(early, advanced)`` aggregate sensitivity as probabilities."""
        if test not in self.sensitivity:
            raise InvalidParameter(f"no sensitivity table for test {test!r}")
        table = self.sensitivity[test]
        early, _ = weighted_sensitivity(table, self.weights, "early")
        adv, _ = weighted_sensitivity(table, self.weights, "advanced")
        return early / 100.0, adv / 100.0

    def sojourn(self):
        return weighted_sojourn_inputs(self.chains, self.weights.shares)


def parse_tables(texts):
    """Build :class:`MiscanTables` from the CSV texts keyed as in ``TABLE_FILES``."""
    for key in TABLE_FILES:
        if key not in texts:
            raise TableFormatError(f"missing table {TABLE_FILES[key]}")

    fields, rows = _rows(texts["shares"], "histology_shares")
    shares = {}
    for i, r in enumerate(rows, 1):
        shares[r["histology"].strip()] = _num(r.get("share"), "histology_shares", i, "share")

    fields, rows = _rows(texts["proportions"], "stage_proportions")
    hists = _histology_columns(fields, ("stage_group", "stage"), "stage_proportions")
    props = {h: {} for h in hists}
    for i, r in enumerate(rows, 1):
        for h in hists:
            props[h].setdefault(r["stage_group"].strip(), {})[r["stage"].strip()] = _num(
                r.get(h), "stage_proportions", i, h)
    weights = StageHistologyWeights(shares, props)

    fields, rows = _rows(texts["sensitivity"], "sensitivity")
    hists = _histology_columns(fields, ("test", "stage"), "sensitivity")
    sens = {}
    for i, r in enumerate(rows, 1):
        t = sens.setdefault(r["test"].strip(), {h: {} for h in hists})
        for h in hists:
            t[h][r["stage"].strip()] = _num(r.get(h), "sensitivity", i, h)

    fields, rows = _rows(texts["sojourn"], "sojourn")
    hists = _histology_columns(fields, ("stage",), "sojourn")
    stages = tuple(r["stage"].strip() for r in rows)
    mst = {h: {} for h in hists}
    for i, r in enumerate(rows, 1):
        for h in hists:
            mst[h][r["stage"].strip()] = _num(r.get(h), "sojourn", i, h)

    fields, rows = _rows(texts["transitions"], "transitions")
    thists = _histology_columns(fields, ("from_stage", "to_stage"), "transitions")
    pairs = [(r["from_stage"].strip(), r["to_stage"].strip()) for r in rows]
    expected = list(zip(stages, stages[1:]))
    if pairs != expected:
        raise TableFormatError(f"transitions must list successive stages {expected}, got {pairs}")
    chains = {}
    for h in hists:
        if h not in thists:
            raise TableFormatError(f"transitions: missing histology column {h!r}")
        probs = tuple(_num(r.get(h), "transitions", i, h) for i, r in enumerate(rows, 1))
        chains[h] = StageChain(stages, mst[h], probs)
    return MiscanTables(weights, sens, chains)


def load_tables(directory=None):
    """Read the five tables from ``directory`` (bundled copies if ``None``)."""
    texts = {}
    for key, fname in TABLE_FILES.items():
        if directory is None:
            path = resources.files("stageshift.data.miscan") / fname
        else:
            path = Path(directory) / fname
        if not path.is_file():
            raise TableFormatError(f"missing table {fname}")
        texts[key] = path.read_text(encoding="utf-8")
    return parse_tables(texts)
