"""Command line entry point: ``rrfda preprocess|fit|simulate --config C --out DIR``.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical failure.
Errors are reported on stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import (
    ConfigurationError,
    DegenerateSegmentError,
    InputError,
    MissingDrawsError,
    NumericalError,
    StructuralError,
)
from .model import BandPowerDataset, BasisSettings, ModelSpec, build_model_basis
from .sampler import SamplerConfig, gibbs_fit
from .spectral import DEFAULT_BANDS, DEFAULT_SPANS, BandDefinition, SegmentedRecording, region_band_powers

log = logging.getLogger("rrfda")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


# ---------------------------------------------------------------------------
# config schema


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    bad = sorted(set(d) - set(allowed))
    if bad:
        raise ConfigurationError(f"unknown key(s) {bad} in {where}; allowed: {sorted(allowed)}")


def _require(d, key, where):
    if key not in d:
        raise ConfigurationError(f"missing required key '{key}' in {where}")
    return d[key]


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def _parse_bands(spec):
    if spec is None:
        spec = DEFAULT_BANDS
    if not isinstance(spec, dict) or not spec:
        raise ConfigurationError("bands must be a non-empty object name -> [lower, upper]")
    out = []
    for name, lim in spec.items():
        if not (isinstance(lim, (list, tuple)) and len(lim) == 2):
            raise ConfigurationError(f"band {name}: expected [lower, upper]")
        out.append(BandDefinition(str(name), float(lim[0]), float(lim[1])))
    return out


PREPROCESS_KEYS = {"manifest", "bands", "span_grid", "floor"}
MANIFEST_KEYS = {"sampling_rate", "segment_length", "regions", "subjects"}
SUBJECT_KEYS = {"id", "file"}


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# preprocess


def validate_preprocess(cfg: dict, base: Path) -> dict:
    _check_keys(cfg, PREPROCESS_KEYS, "preprocess config")
    mpath = _resolve(base, _require(cfg, "manifest", "preprocess config"))
    if not mpath.is_file():
        raise InputError(f"manifest not found: {mpath}")
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"manifest is not valid JSON: {exc}") from exc
    _check_keys(man, MANIFEST_KEYS, "manifest")
    fs = float(_require(man, "sampling_rate", "manifest"))
    seg = int(_require(man, "segment_length", "manifest"))
    if fs <= 0 or seg < 2:
        raise ConfigurationError("sampling_rate must be positive and segment_length >= 2")
    regions = _require(man, "regions", "manifest")
    if not isinstance(regions, dict) or not regions:
        raise ConfigurationError("manifest.regions must map region names to channel lists")
    for r, ch in regions.items():
        if not isinstance(ch, list) or not ch:
            raise ConfigurationError(f"region {r}: channel list is empty")
    subjects = _require(man, "subjects", "manifest")
    if not isinstance(subjects, list) or not subjects:
        raise ConfigurationError("manifest.subjects is empty")
    subs = []
    for k, s in enumerate(subjects):
        _check_keys(s, SUBJECT_KEYS, f"manifest.subjects[{k}]")
        f = _resolve(mpath.parent, _require(s, "file", f"manifest.subjects[{k}]"))
        if not f.is_file():
            raise InputError(f"recording not found for subject {s.get('id', k)}: {f}")
        subs.append({"id": str(_require(s, "id", f"manifest.subjects[{k}]")), "file": f})
    bands = _parse_bands(cfg.get("bands"))
    nyq = fs / 2
    for b in bands:
        if b.upper > nyq + 1e-9:
            raise ConfigurationError(f"band {b.name} upper limit {b.upper} Hz exceeds Nyquist {nyq} Hz")
    spans = [int(s) for s in cfg.get("span_grid", DEFAULT_SPANS)]
    if not spans or any(s < 1 or s % 2 == 0 for s in spans):
        raise ConfigurationError("span_grid must hold positive odd integers")
    floor = float(cfg.get("floor", 1e-12))
    if not floor > 0:
        raise ConfigurationError("floor must be positive")
    return {"fs": fs, "segment_length": seg, "regions": regions, "subjects": subs, "bands": bands,
            "span_grid": spans, "floor": floor}


def cmd_preprocess(cfg: dict, base: Path, out: Path, threads: int = 1, seed: int | None = None):
    v = validate_preprocess(cfg, base)
    out.mkdir(parents=True, exist_ok=True)
    rows = {b.name: [] for b in v["bands"]}
    spans = []
    for s in v["subjects"]:
        try:
            raw = pd.read_csv(s["file"])
        except Exception as exc:
            raise InputError(f"cannot read recording for subject {s['id']}: {exc}") from exc
        for region, channels in v["regions"].items():
            missing = [c for c in channels if c not in raw.columns]
            if missing:
                raise InputError(f"subject {s['id']}, region {region}: channels {missing} not in recording")
            data = raw[channels].to_numpy(dtype=float)
            rec = SegmentedRecording.from_continuous(s["id"], region, data, v["fs"], v["segment_length"])
            span, series = region_band_powers(rec, v["bands"], v["span_grid"], v["floor"])
            spans.append({"subject": s["id"], "region": region, "span": span})
            for bp in series:
                for t in range(len(bp.gamma)):
                    rows[bp.band].append((s["id"], region, t, bp.band, repr(float(bp.gamma[t])),
                                          repr(float(bp.log_gamma[t])), int(bp.floored[t])))
    written = []
    for band, rs in rows.items():
        df = pd.DataFrame(rs, columns=["subject", "region", "segment_index", "band", "gamma", "log_gamma",
                                       "floored_flag"])
        path = out / f"band_power_{band}.csv"
        df.to_csv(path, index=False, lineterminator="\n")
        written.append(path.name)
    (out / "spans.json").write_text(json.dumps(spans, indent=2, sort_keys=True) + "\n")
    return {"outputs": written + ["spans.json"]}


# ---------------------------------------------------------------------------
# fit


FIT_KEYS = {"data", "covariates", "value_column", "time_column", "time_scale", "basis", "model", "sampler",
            "bands", "predictive", "loo"}
BANDS_KEYS = {"levels", "grid_size", "contrasts", "kind"}
PRED_KEYS = {"level"}


def read_long_dataset(path, covariates=None, value_column="log_gamma", time_column="segment_index",
                      time_scale=1.0) -> BandPowerDataset:
    """Build a dataset from long-format rows ``subject, region, time, value``.

    ``covariates`` is an optional CSV with a ``subject`` column and numeric
    design columns; without it the design is an intercept.
    """
    path = Path(path)
    if not path.is_file():
        raise InputError(f"data file not found: {path}")
    df = pd.read_csv(path, dtype={"subject": str, "region": str}, float_precision="round_trip")
    for col in ("subject", "region", time_column, value_column):
        if col not in df.columns:
            raise InputError(f"data file lacks column '{col}'")
    if df.empty:
        raise InputError("data file has no rows")
    if not np.all(np.isfinite(df[value_column].to_numpy(dtype=float))):
        raise InputError(f"non-finite values in column '{value_column}'")
    subjects = list(dict.fromkeys(df["subject"]))
    regions = list(dict.fromkeys(df["region"]))
    times, Y = [], []
    for s in subjects:
        sub = df[df["subject"] == s]
        wide = sub.pivot_table(index=time_column, columns="region", values=value_column, aggfunc="mean")
        wide = wide.reindex(columns=regions).dropna(axis=0, how="any").sort_index()
        times.append(wide.index.to_numpy(dtype=float) * float(time_scale))
        Y.append(wide.to_numpy(dtype=float).T)
    if covariates is not None:
        cpath = Path(covariates)
        if not cpath.is_file():
            raise InputError(f"covariate file not found: {cpath}")
        cov = pd.read_csv(cpath, dtype={"subject": str})
        if "subject" not in cov.columns:
            raise InputError("covariate file lacks a 'subject' column")
        cov = cov.set_index("subject")
        missing = [s for s in subjects if s not in cov.index]
        if missing:
            raise InputError(f"covariates missing for subjects {missing[:5]}")
        W = cov.loc[subjects].to_numpy(dtype=float)
        names = list(cov.columns)
    else:
        W = np.ones((len(subjects), 1))
        names = ["intercept"]
    return BandPowerDataset(times, Y, W, subjects=subjects, regions=regions, covariates=names)


def write_long_dataset(ds: BandPowerDataset, data_path, covariates_path=None, time_step: float | None = None,
                       value_column: str = "log_gamma"):
    """Inverse of :func:`read_long_dataset`; times become integer indices when ``time_step`` is given."""
    rows = []
    for i, (t, y) in enumerate(zip(ds.times, ds.Y)):
        idx = np.rint(t / time_step).astype(int) if time_step else t
        for j, r in enumerate(ds.regions):
            for k in range(len(t)):
                rows.append((ds.subjects[i], r, idx[k], repr(float(y[j, k]))))
    pd.DataFrame(rows, columns=["subject", "region", "segment_index", value_column]).to_csv(
        data_path, index=False, lineterminator="\n")
    if covariates_path is not None:
        cov = pd.DataFrame(ds.W, columns=list(ds.covariates))
        cov.insert(0, "subject", list(ds.subjects))
        cov.to_csv(covariates_path, index=False, lineterminator="\n")


def bundled_path(name: str) -> Path:
    """Path of a file shipped in the package ``data`` directory."""
    path = Path(__file__).parent / "data" / name
    if not path.is_file():
        raise InputError(f"no bundled file named {name!r}")
    return path


def validate_fit(cfg: dict, base: Path, seed: int | None = None) -> dict:
    _check_keys(cfg, FIT_KEYS, "fit config")
    data = _resolve(base, _require(cfg, "data", "fit config"))
    cov = _resolve(base, cfg["covariates"]) if cfg.get("covariates") else None
    basis_cfg = cfg.get("basis", {})
    _check_keys(basis_cfg, _fields(BasisSettings), "basis")
    model_cfg = dict(cfg.get("model", {}))
    _check_keys(model_cfg, _fields(ModelSpec) - {"basis"}, "model")
    spec = ModelSpec.from_dict({**model_cfg, "basis": dict(basis_cfg)})
    sampler_cfg = dict(cfg.get("sampler", {}))
    _check_keys(sampler_cfg, _fields(SamplerConfig), "sampler")
    if seed is not None:
        sampler_cfg["seed"] = seed
    if "fixed" in sampler_cfg:
        sampler_cfg["fixed"] = tuple(sampler_cfg["fixed"])
    scfg = SamplerConfig(**sampler_cfg)
    bands = cfg.get("bands", {})
    _check_keys(bands, BANDS_KEYS, "bands")
    levels = tuple(float(x) for x in bands.get("levels", (0.2, 0.6, 0.9)))
    if any(not 0 < x < 1 for x in levels):
        raise ConfigurationError("band levels must lie in (0, 1)")
    grid_size = int(bands.get("grid_size", 101))
    if grid_size < 2:
        raise ConfigurationError("bands.grid_size must be >= 2")
    kind = bands.get("kind", "simultaneous")
    if kind not in ("simultaneous", "pointwise"):
        raise ConfigurationError("bands.kind must be 'simultaneous' or 'pointwise'")
    pred = cfg.get("predictive")
    if pred is not None:
        _check_keys(pred, PRED_KEYS, "predictive")
        if not 0 < float(pred.get("level", 0.9)) < 1:
            raise ConfigurationError("predictive.level must lie in (0, 1)")
        if not scfg.store_theta:
            raise ConfigurationError("predictive bands need Theta draws; set sampler.store_theta = true")
    loo = bool(cfg.get("loo", False))
    if loo and not scfg.store_loglik:
        raise ConfigurationError("loo requested but subject log-likelihoods are not stored; "
                                 "set sampler.store_loglik = true")
    return {"data": data, "covariates": cov, "value_column": cfg.get("value_column", "log_gamma"),
            "time_column": cfg.get("time_column", "segment_index"), "time_scale": float(cfg.get("time_scale", 1.0)),
            "spec": spec, "sampler": scfg, "levels": levels, "grid_size": grid_size, "kind": kind,
            "contrasts": bands.get("contrasts"), "predictive": pred, "loo": loo}


def cmd_fit(cfg: dict, base: Path, out: Path, threads: int = 1, seed: int | None = None):
    from .inference import bands_to_frame, coverage_iqr, elpd_loo, group_mean_bands, predictive_coverage

    v = validate_fit(cfg, base, seed)
    ds = read_long_dataset(v["data"], v["covariates"], v["value_column"], v["time_column"], v["time_scale"])
    spec = v["spec"]
    basis = build_model_basis(spec, ds)
    contrasts = v["contrasts"]
    if contrasts is None:
        contrasts = {name: np.eye(ds.d)[l].tolist() for l, name in enumerate(ds.covariates)}
    for name, c in contrasts.items():
        if len(c) != ds.d:
            raise StructuralError(f"contrast {name} has length {len(c)}, design has d={ds.d}")
    arch = gibbs_fit(ds, spec, v["sampler"], basis=basis)
    arch.metadata.update({"regions": list(ds.regions), "subjects": list(ds.subjects),
                          "covariates": list(ds.covariates), "version": __version__})
    out.mkdir(parents=True, exist_ok=True)
    arch.save(out / "archive")
    a, b = basis.domain
    t_grid = np.linspace(a, b, v["grid_size"])
    min_draws = min(100, arch.n_draws)
    bands = []
    for name, c in contrasts.items():
        bands += group_mean_bands(arch, c, t_grid, v["levels"], v["kind"], name=name, min_draws=min_draws)
    bands_to_frame(bands).to_csv(out / "bands.csv", index=False, lineterminator="\n")
    summary = {
        "family": arch.family,
        "n_draws": arch.n_draws,
        "n": ds.n, "p": ds.p, "q": basis.q, "d": ds.d,
        "sigma_eps_mean": dict(zip(ds.regions, np.mean(arch.draws["sigma_eps"], axis=0).tolist())),
        "loglik_mean": float(np.mean(arch.draws["loglik"])),
    }
    outputs = ["archive", "bands.csv"]
    if v["predictive"] is not None:
        cov = predictive_coverage(arch, ds, float(v["predictive"].get("level", 0.9)), seed=v["sampler"].seed,
                                  min_draws=min_draws)
        cov.to_csv(out / "predictive_coverage.csv", index=False, lineterminator="\n")
        summary["predictive_coverage_iqr"] = coverage_iqr(cov)
        outputs.append("predictive_coverage.csv")
    if v["loo"]:
        res = elpd_loo(arch, subjects=ds.subjects)
        (out / "loo.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
        summary["elpd_loo"] = res.elpd_loo
        summary["elpd_loo_se"] = res.se
        outputs.append("loo.json")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"outputs": outputs + ["summary.json"]}


# ---------------------------------------------------------------------------
# simulate


SIMULATE_KEYS = {"truths", "snrs", "n_per_group", "families", "replicates", "seed", "scenario", "model", "sampler"}


def validate_simulate(cfg: dict, seed: int | None = None):
    from .simgen import StudyGrid

    _check_keys(cfg, SIMULATE_KEYS, "simulate config")
    kw = dict(cfg)
    for key in ("truths", "snrs", "n_per_group", "families"):
        if key in kw:
            kw[key] = tuple(kw[key])
    if seed is not None:
        kw["seed"] = seed
    if "scenario" in kw:
        _check_keys(kw["scenario"], {"groups", "p", "q_true", "grid_length", "max_discard", "separable_decay"},
                    "scenario")
    if "model" in kw:
        _check_keys(kw["model"], _fields(ModelSpec) - {"basis", "prior_family"}, "model")
    if "sampler" in kw:
        _check_keys(kw["sampler"], _fields(SamplerConfig) - {"seed", "store_theta"}, "sampler")
    return StudyGrid(**kw)


def cmd_simulate(cfg: dict, base: Path, out: Path, threads: int = 1, seed: int | None = None):
    from .simgen import run_study

    grid = validate_simulate(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    summary, reps = run_study(grid, workers=threads,
                              progress=lambda k, n: log.info("replicate job %d/%d done", k, n))
    summary.to_csv(out / "results.csv", index=False, lineterminator="\n", float_format="%.6g")
    reps.to_csv(out / "replicates.csv", index=False, lineterminator="\n", float_format="%.10g")
    return {"outputs": ["results.csv", "replicates.csv"]}


COMMANDS = {"preprocess": cmd_preprocess, "fit": cmd_fit, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rrfda", description="Region-referenced functional data analysis of band power.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--threads", type=int, default=None, help="worker processes (default: logical cores)")
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _fail(code: int, exc: BaseException) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, NumericalError) and exc.iteration is not None:
        payload["iteration"] = exc.iteration
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
    try:
        if threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg_path = Path(args.config)
        cfg = load_config(cfg_path)
        res = COMMANDS[args.command](cfg, cfg_path.resolve().parent, Path(args.out), threads, args.seed)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except (ConfigurationError, InputError, StructuralError, MissingDrawsError, DegenerateSegmentError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    except (TypeError, ValueError) as exc:
        return _fail(EXIT_VALIDATION, exc)
    print(json.dumps({"status": "ok", "command": args.command, **res}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
