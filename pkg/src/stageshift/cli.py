"""Command-line front end.

    stageshift <fit|project|sweep|mced|derive-inputs|simulate> --config PATH [--seed N] [--out DIR]

Every config is a JSON object.  File references inside a config are
resolved relative to the config file; the prefix ``bundled:`` names a
file shipped in ``stageshift/data/fixtures``.  A protocol may be given
inline or as a path to a protocol record, and inline protocols may use
the periodic shorthand ``{"start", "n", "interval", "followup",
"sensitivity_early", "sensitivity_advanced"}``.

All references are resolved and read before anything is written, and
every output is written atomically, so a failed run leaves no partial
artifacts (except the diagnostics of a fit that did not converge).
Each run writes ``manifest.json`` next to its outputs.

Exit status: 0 success, 2 input error (bad config, missing or malformed
file, invalid parameter), 3 numerical failure, 4 non-convergence.
"""

import argparse
import sys
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from .calibration import (
    FitConfig,
    OptimizerSettings,
    fit,
    inflate_risk,
    load_incidence,
    select_onset_dimension,
)
from .errors import InvalidParameter, NonConvergence, NumericalIntegrityError, StageShiftError, TableFormatError
from .miscan import load_tables
from .natural_history import NaturalHistoryParams
from .projection import ScreeningProtocol, mced_project, relative_reduction, stage_shift, sweep
from .simulation import simulate_cohort

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGENCE = 4

COMMANDS = ("fit", "project", "sweep", "mced", "derive-inputs", "simulate")
BUNDLED = "bundled:"


class InputError(StageShiftError):
    """Bad or unresolvable command input."""


class FitDidNotConverge(StageShiftError):
    pass


class Run:
    """Config access, reference resolution and manifest bookkeeping."""

    def __init__(self, command, config_path, seed, out):
        self.command = command
        self.config_path = Path(config_path)
        if not self.config_path.is_file():
            raise FileNotFoundError(f"config file not found: {config_path}")
        self.config = sio.read_json(self.config_path)
        self.base = self.config_path.parent
        self.seed = seed if seed is not None else self.config.get("seed", 0)
        self.out = Path(out)
        self.inputs = {str(self.config_path): sio.sha256_file(self.config_path)}
        self.started = _now()

    def require(self, key, where=None):
        src = self.config if where is None else where
        if key not in src:
            raise InputError(f"config is missing required key {key!r}")
        return src[key]

    def path(self, ref):
        if not isinstance(ref, str):
            raise InputError(f"expected a file reference, got {ref!r}")
        if ref.startswith(BUNDLED):
            p = Path(str(resources.files("stageshift.data.fixtures") / ref[len(BUNDLED):]))
        else:
            p = Path(ref)
            if not p.is_absolute():
                p = self.base / p
        if not p.is_file():
            raise FileNotFoundError(f"file not found: {ref}")
        self.inputs[ref] = sio.sha256_file(p)
        return p

    def params(self, ref):
        if isinstance(ref, dict):
            return NaturalHistoryParams.from_dict(ref)
        return sio.load_params(self.path(ref))

    def protocol(self, ref):
        rec = ref if isinstance(ref, dict) else sio.read_json(self.path(ref))
        if "screen_ages" in rec:
            return ScreeningProtocol.from_dict(rec)
        keys = ("start", "n", "interval", "followup", "sensitivity_early", "sensitivity_advanced")
        missing = [k for k in keys if k not in rec]
        if missing:
            raise InputError(f"protocol needs screen_ages or the periodic keys (missing {missing})")
        return ScreeningProtocol.periodic(rec["start"], int(rec["n"]), rec["interval"], rec["followup"],
                                          rec["sensitivity_early"], rec["sensitivity_advanced"])

    def optimizer(self, rec=None):
        rec = dict(self.config.get("optimizer", {}) if rec is None else rec)
        rec.setdefault("seed", int(self.seed))
        try:
            if "theta_bounds" in rec:
                rec["theta_bounds"] = tuple(rec["theta_bounds"])
            return OptimizerSettings(**rec)
        except TypeError as exc:
            raise InputError(f"bad optimizer settings: {exc}") from None

    def manifest(self, outputs):
        return {
            "command": self.command,
            "tool_version": __version__,
            "config_path": str(self.config_path),
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": sorted(outputs),
            "started": self.started,
            "finished": _now(),
        }

    def write(self, files):
        """``files`` maps output names to text; manifest is written last."""
        for name, text in files.items():
            sio.atomic_write(self.out / name, text)
        sio.write_json(self.out / "manifest.json", self.manifest(files))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _hypothesis(rec):
    if not isinstance(rec, dict):
        raise InputError(f"hypothesis must be an object with omst and lmst, got {rec!r}")
    return sio.hypothesis_from(rec)


def _sensitivity_pairs(value):
    try:
        pairs = [(float(a), float(b)) for a, b in value]
    except (TypeError, ValueError):
        raise InputError("sensitivities must be a list of [early, advanced] pairs") from None
    if not pairs:
        raise InputError("sensitivity grid is empty")
    return pairs


# ---- fit ------------------------------------------------------------------

FIT_COLUMNS = ("age_lo", "age_hi", "midpoint", "person_years", "observed_early", "observed_advanced",
               "predicted_early", "predicted_advanced", "observed_rate_early", "observed_rate_advanced",
               "predicted_rate_early", "predicted_rate_advanced")


def _fit_rows(table, predicted):
    rows = []
    obs = table.observed
    for i in range(len(table)):
        py = float(table.person_years[i])
        rows.append({
            "age_lo": float(table.age_lo[i]), "age_hi": float(table.age_hi[i]),
            "midpoint": float(table.midpoints[i]), "person_years": py,
            "observed_early": float(obs[i, 0]), "observed_advanced": float(obs[i, 1]),
            "predicted_early": float(predicted[i, 0]), "predicted_advanced": float(predicted[i, 1]),
            "observed_rate_early": float(obs[i, 0] / py), "observed_rate_advanced": float(obs[i, 1] / py),
            "predicted_rate_early": float(predicted[i, 0] / py),
            "predicted_rate_advanced": float(predicted[i, 1] / py),
        })
    return rows


def _fit_scenario(run, rec):
    """Load and fit one scenario record; returns (table, FitResult, trace)."""
    table = load_incidence(run.path(run.require("incidence", rec)), group_width=float(rec.get("group_width", 5.0)))
    hyp = _hypothesis(run.require("hypothesis", rec))
    inflation = float(rec.get("risk_inflation", 1.0))
    opt = run.optimizer(rec.get("optimizer", run.config.get("optimizer", {})))
    k = rec.get("k", "auto")
    if k == "auto":
        sel = select_onset_dimension(table, hyp, int(rec.get("k_max", 12)),
                                     threshold=float(rec.get("threshold", 0.005)),
                                     risk_inflation=inflation, optimizer=opt)
        return inflate_risk(table, inflation), sel.chosen, sel.trace
    if not isinstance(k, int) or isinstance(k, bool):
        raise InputError(f"k must be an integer or 'auto', got {k!r}")
    res = fit(table, FitConfig(k, hyp, risk_inflation=inflation, optimizer=opt))
    return inflate_risk(table, inflation), res, None


def cmd_fit(run):
    cfg = run.config
    try:
        table, res, trace = _fit_scenario(run, cfg)
    except NonConvergence as exc:
        diag = {"site": cfg.get("site"), "converged": False, "error": str(exc)}
        if exc.best is not None:
            diag.update(exc.best.diagnostics())
        run.write({"diagnostics.json": sio.dumps(diag)})
        raise FitDidNotConverge(str(exc)) from None
    diag = {"site": cfg.get("site"), **res.diagnostics()}
    files = {
        "params.json": sio.dumps(sio.params_record(res.params, k=res.k, site=cfg.get("site"))),
        "diagnostics.json": sio.dumps(diag),
        "incidence_fit.csv": sio.table_text(_fit_rows(table, res.predicted), FIT_COLUMNS),
    }
    if trace is not None:
        files["k_trace.csv"] = sio.table_text([{"k": k, "deviance": d} for k, d in trace], ("k", "deviance"))
    run.write(files)
    if not res.converged:
        raise FitDidNotConverge(f"optimizer did not converge (gradient norm {res.gradient_norm:.3g})")
    print(f"fit {cfg.get('site', '')}: k={res.k} EMST={res.params.emst:.4f} deviance={res.deviance:.2f}")


# ---- project --------------------------------------------------------------

PROJECTION_COLUMNS = ("interval", "age_start", "age_end", "screen_detected", "interval_clinical", "control", "shift")


def cmd_project(run):
    params = run.params(run.require("params"))
    protocol = run.protocol(run.require("protocol"))
    comparator = run.protocol(run.config["comparator"]) if "comparator" in run.config else None
    proj = stage_shift(params, protocol)
    summary = {
        "shift": proj.cumulative_shift,
        "screened_advanced": proj.screened_total,
        "control_advanced": proj.control_total,
        "emst": params.emst,
        "protocol": protocol.to_dict(),
    }
    if comparator is not None:
        ref = stage_shift(params, comparator)
        summary["comparator_shift"] = ref.cumulative_shift
        summary["relative_reduction_vs_comparator"] = relative_reduction(ref, proj)
        summary["comparator"] = comparator.to_dict()
    run.write({
        "projection.csv": sio.table_text(proj.rows(protocol), PROJECTION_COLUMNS),
        "summary.json": sio.dumps(summary),
    })
    line = f"shift={100 * proj.cumulative_shift:.1f}%"
    if comparator is not None:
        line += f" vs comparator={100 * summary['relative_reduction_vs_comparator']:.1f}%"
    print(line)


# ---- sweep ----------------------------------------------------------------

SWEEP_COLUMNS = ("params", "omst", "lmst", "emst", "fit_converged", "protocol", "followup",
                 "sensitivity_early", "sensitivity_advanced", "shift", "status")


def _models(run):
    """Labelled parameter sets from ``models`` (files) and/or ``fits``."""
    models, converged = {}, {}
    for label, ref in run.config.get("models", {}).items():
        models[label] = run.params(ref)
        converged[label] = None
    if "fits" in run.config:
        spec = run.config["fits"]
        hyps = run.require("hypotheses", spec)
        if not hyps:
            raise InputError("fits.hypotheses is empty")
        for h in hyps:
            rec = {**spec, "hypothesis": h}
            _, res, _ = _fit_scenario(run, rec)
            label = h.get("label", f"omst{h['omst']:g}_lmst{h['lmst']:g}")
            models[label] = res.params
            converged[label] = bool(res.converged)
    if not models:
        raise InputError("sweep needs 'models' or 'fits'")
    return models, converged


def cmd_sweep(run):
    protocols = {label: run.protocol(ref) for label, ref in run.require("protocols").items()}
    if not protocols:
        raise InputError("protocol grid is empty")
    sens = _sensitivity_pairs(run.require("sensitivities"))
    models, converged = _models(run)
    rows = sweep(models, protocols, sens, workers=run.config.get("workers"))
    for r in rows:
        p, q = models[r["params"]], protocols[r["protocol"]]
        r.update(omst=p.omst, lmst=p.lmst, emst=p.emst, fit_converged=converged[r["params"]],
                 followup=q.followup_end - q.screen_ages[-1])
    run.write({"sweep.csv": sio.table_text(rows, SWEEP_COLUMNS)})
    print(f"sweep: {len(rows)} rows")


# ---- mced -----------------------------------------------------------------

MCED_COLUMNS = ("sensitivity_early", "sensitivity_advanced", "protocol", "hypothesis", "site", "shift",
                "screened_advanced", "control_advanced", "pooled_shift_extension")


def cmd_mced(run):
    """Per-site shifts for every (sensitivity, protocol, hypothesis) cell.

    ``models`` maps a hypothesis label to ``{site: params reference}``.  The
    pooled shift across sites is reported in the ``pooled_shift_extension``
    column; it is not one of the per-site projections.
    """
    protocols = {label: run.protocol(ref) for label, ref in run.require("protocols").items()}
    sens = _sensitivity_pairs(run.require("sensitivities"))
    groups = run.require("models")
    if not protocols or not groups:
        raise InputError("mced needs at least one protocol and one model group")
    models = {h: {site: run.params(ref) for site, ref in sites.items()} for h, sites in groups.items()}
    rows = []
    for be, bl in sens:
        for qlabel, q in protocols.items():
            for h, sites in models.items():
                res = mced_project(sites, q.with_sensitivity(be, bl))
                for site, proj in res.sites.items():
                    rows.append({
                        "sensitivity_early": be, "sensitivity_advanced": bl, "protocol": qlabel,
                        "hypothesis": h, "site": site, "shift": proj.cumulative_shift,
                        "screened_advanced": proj.screened_total, "control_advanced": proj.control_total,
                        "pooled_shift_extension": res.pooled_shift,
                    })
    run.write({"mced.csv": sio.table_text(rows, MCED_COLUMNS)})
    print(f"mced: {len(rows)} rows")


# ---- derive-inputs --------------------------------------------------------

SOJOURN_COLUMNS = ("histology", "share", "omst", "emst", "lmst")


def cmd_derive_inputs(run):
    ref = run.config.get("tables")
    if ref is None:
        tables = load_tables()
    else:
        d = Path(ref)
        d = d if d.is_absolute() else run.base / d
        if not d.is_dir():
            raise FileNotFoundError(f"tables directory not found: {ref}")
        tables = load_tables(d)
        for f in sorted(d.glob("*.csv")):
            run.inputs[str(f)] = sio.sha256_file(f)
    tests = run.config.get("tests", sorted(tables.sensitivity))
    per, mean = tables.sojourn()
    sens = {}
    for t in tests:
        be, bl = tables.sensitivities(t)
        sens[t] = {"sensitivity_early": be, "sensitivity_advanced": bl}
    rows = [{"histology": h, "share": tables.weights.shares[h], **s.as_dict()} for h, s in per.items()]
    rows.append({"histology": "weighted", "share": 1.0, **mean.as_dict()})
    files = {
        "hypothesis.json": sio.dumps(mean.as_dict()),
        "sensitivity.json": sio.dumps(sens),
        "sojourn_by_histology.csv": sio.table_text(rows, SOJOURN_COLUMNS),
    }
    run.write(files)
    print(f"OMST={mean.omst:.3f} EMST={mean.emst:.3f} LMST={mean.lmst:.3f}")


# ---- simulate -------------------------------------------------------------

SIMULATION_COLUMNS = ("interval", "age_start", "age_end", "screen_detected", "screen_detected_se",
                      "interval_clinical", "interval_clinical_se", "control", "control_se",
                      "analytic_screen_detected", "analytic_interval_clinical", "analytic_control")


def cmd_simulate(run):
    params = run.params(run.require("params"))
    protocol = run.protocol(run.require("protocol"))
    n = int(run.config.get("n", 1_000_000))
    tally = simulate_cohort(params, protocol, n, seed=int(run.seed), workers=run.config.get("workers"))
    sd, jd, cd = tally.proportions()
    se = tally.standard_errors()
    exact = stage_shift(params, protocol)
    ages = protocol.ages
    rows = []
    for l in range(protocol.n):
        rows.append({
            "interval": l + 1, "age_start": ages[l], "age_end": ages[l + 1],
            "screen_detected": float(sd[l]), "screen_detected_se": float(se[0][l]),
            "interval_clinical": float(jd[l]), "interval_clinical_se": float(se[1][l]),
            "control": float(cd[l]), "control_se": float(se[2][l]),
            "analytic_screen_detected": float(exact.screen_detected[l]),
            "analytic_interval_clinical": float(exact.interval_clinical[l]),
            "analytic_control": float(exact.control[l]),
        })
    summary = {"n": tally.n, "sampled": tally.sampled, "seed": run.seed, "analytic_shift": exact.cumulative_shift}
    try:
        summary["shift"] = tally.projection().cumulative_shift
    except StageShiftError:
        summary["shift"] = float("nan")
    run.write({"simulation.csv": sio.table_text(rows, SIMULATION_COLUMNS), "summary.json": sio.dumps(summary)})
    print(f"simulated shift={100 * summary['shift']:.2f}% analytic={100 * exact.cumulative_shift:.2f}%")


HANDLERS = {
    "fit": cmd_fit,
    "project": cmd_project,
    "sweep": cmd_sweep,
    "mced": cmd_mced,
    "derive-inputs": cmd_derive_inputs,
    "simulate": cmd_simulate,
}


def build_parser():
    p = argparse.ArgumentParser(prog="stageshift", description="Two-stage natural history calibration and stage-shift projection.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run = Run(args.command, args.config, args.seed, args.out)
        with np.errstate(over="ignore", under="ignore"):
            HANDLERS[args.command](run)
    except FitDidNotConverge as exc:
        print(f"error: non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except FileNotFoundError as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, TableFormatError, InvalidParameter, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalIntegrityError, StageShiftError, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
