from __future__ import annotations

import json
import time

import numpy as np
import pandas as pd
import pytest

from rrfda.archive import PosteriorArchive
from rrfda.cli import EXIT_OK, EXIT_VALIDATION, bundled_path, main, read_long_dataset, write_long_dataset
from rrfda.simgen import demo_dataset

FS = 128


def write_recordings(root, amps=(2.0, 0.5), n_subjects=2):
    rng = np.random.default_rng(0)
    t = np.arange(FS * 4) / FS
    subjects = []
    for s in range(n_subjects):
        sig = amps[0] * np.sin(2 * np.pi * 10 * t) + amps[1] * np.sin(2 * np.pi * 38 * t)
        cols = {f"c{c}": sig * (1 + 0.2 * c) + 0.05 * rng.standard_normal(len(t)) for c in range(4)}
        pd.DataFrame(cols).to_csv(root / f"s{s}.csv", index=False)
        subjects.append({"id": f"s{s}", "file": f"s{s}.csv"})
    manifest = {"sampling_rate": FS, "segment_length": FS, "regions": {"front": ["c0", "c1"], "back": ["c2", "c3"]},
                "subjects": subjects}
    (root / "manifest.json").write_text(json.dumps(manifest))
    cfg = {"manifest": "manifest.json", "bands": {"alpha": [8, 15], "gamma": [30, 45]}}
    (root / "pre.json").write_text(json.dumps(cfg))
    return root / "pre.json"


def run(capsys, *argv):
    code = main(list(map(str, argv)))
    out, err = capsys.readouterr()
    return code, out, err


def test_preprocess_alpha_dominates_and_is_deterministic(tmp_path, capsys):
    cfg = write_recordings(tmp_path)
    code, out, _ = run(capsys, "preprocess", "--config", cfg, "--out", tmp_path / "a")
    assert code == EXIT_OK and json.loads(out)["status"] == "ok"
    alpha = pd.read_csv(tmp_path / "a" / "band_power_alpha.csv")
    gamma = pd.read_csv(tmp_path / "a" / "band_power_gamma.csv")
    assert list(alpha.columns) == ["subject", "region", "segment_index", "band", "gamma", "log_gamma", "floored_flag"]
    assert len(alpha) == 2 * 2 * 4
    assert np.all(alpha["gamma"].to_numpy() > gamma["gamma"].to_numpy())
    run(capsys, "preprocess", "--config", cfg, "--out", tmp_path / "b")
    for name in ("band_power_alpha.csv", "band_power_gamma.csv", "spans.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_preprocess_output_feeds_fit_reader(tmp_path, capsys):
    cfg = write_recordings(tmp_path)
    run(capsys, "preprocess", "--config", cfg, "--out", tmp_path / "a")
    ds = read_long_dataset(tmp_path / "a" / "band_power_alpha.csv")
    assert (ds.n, ds.p) == (2, 2) and ds.regions == ["front", "back"]


def test_preprocess_empty_manifest(tmp_path, capsys):
    (tmp_path / "manifest.json").write_text(json.dumps({"sampling_rate": 128, "segment_length": 64,
                                                         "regions": {"a": ["c0"]}, "subjects": []}))
    (tmp_path / "pre.json").write_text(json.dumps({"manifest": "manifest.json"}))
    code, out, err = run(capsys, "preprocess", "--config", tmp_path / "pre.json", "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION and out == ""
    payload = json.loads(err)
    assert payload["exit_code"] == 2 and "empty" in payload["message"]
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("mutate", [lambda c: c.update(bogus=1), lambda c: c.update(bands={"beta": [16, 80]})])
def test_preprocess_rejects_bad_config(tmp_path, capsys, mutate):
    cfg_path = write_recordings(tmp_path)
    cfg = json.loads(cfg_path.read_text())
    mutate(cfg)
    cfg_path.write_text(json.dumps(cfg))
    code, _, err = run(capsys, "preprocess", "--config", cfg_path, "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION and json.loads(err)["error"] == "ConfigurationError"


def test_preprocess_channel_mismatch(tmp_path, capsys):
    write_recordings(tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["regions"]["back"] = ["c9"]
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    code, _, err = run(capsys, "preprocess", "--config", tmp_path / "pre.json", "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION and "c9" in json.loads(err)["message"]


def demo_config(tmp_path, **overrides):
    cfg = json.loads(bundled_path("demo_fit.json").read_text())
    cfg["data"] = str(bundled_path(cfg["data"]))
    cfg["covariates"] = str(bundled_path(cfg["covariates"]))
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **val}
        else:
            cfg[key] = val
    path = tmp_path / f"fit_{len(list(tmp_path.glob('fit_*.json')))}.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def demo_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo")
    out = {}
    for fam in ("NS", "NB"):
        cfg = demo_config(root, model={"prior_family": fam, **({"nb_ridge": 1.0} if fam == "NB" else {})})
        assert main(["fit", "--config", str(cfg), "--out", str(root / fam), "--threads", "1"]) == EXIT_OK
        out[fam] = root / fam
    return out


def test_demo_fit_emits_all_outputs(demo_runs):
    d = demo_runs["NS"]
    for name in ("bands.csv", "predictive_coverage.csv", "loo.json", "summary.json"):
        assert (d / name).is_file()
    arch = PosteriorArchive.load(d / "archive")
    assert arch.family == "NS" and arch.n_draws == 250
    bands = pd.read_csv(d / "bands.csv")
    assert set(bands["region"]) == set(arch.metadata["regions"]) and len(set(bands["region"])) == 3
    assert np.all(bands["lower"] <= bands["upper"])
    loo = json.loads((d / "loo.json").read_text())
    assert len(loo["pointwise"]) == 6
    cov = pd.read_csv(d / "predictive_coverage.csv")
    assert len(cov) == 6 * 3 and cov["coverage_pointwise"].between(0, 1).all()


def test_nb_and_ns_share_schemas(demo_runs):
    a, b = demo_runs["NS"], demo_runs["NB"]
    ba, bb = pd.read_csv(a / "bands.csv"), pd.read_csv(b / "bands.csv")
    assert list(ba.columns) == list(bb.columns) and len(ba) == len(bb)
    assert not np.allclose(ba["center"], bb["center"])
    sa, sb = json.loads((a / "summary.json").read_text()), json.loads((b / "summary.json").read_text())
    assert sorted(sa) == sorted(sb) and (sa["family"], sb["family"]) == ("NS", "NB")
    assert sorted(json.loads((a / "loo.json").read_text())) == sorted(json.loads((b / "loo.json").read_text()))


def test_fit_is_byte_identical_on_rerun(tmp_path, capsys):
    cfg = demo_config(tmp_path, sampler={"iterations": 60, "burn_in": 20, "thin": 2}, predictive=None, loo=False,
                      bands={"levels": [0.9], "grid_size": 11})
    for name in ("x", "y"):
        assert run(capsys, "fit", "--config", cfg, "--out", tmp_path / name)[0] == EXIT_OK
    for name in ("bands.csv", "summary.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_loo_without_loglik_names_the_flag(tmp_path, capsys):
    cfg = demo_config(tmp_path, sampler={"store_loglik": False})
    code, out, err = run(capsys, "fit", "--config", cfg, "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION and out == ""
    assert "sampler.store_loglik" in json.loads(err)["message"]
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("override", [{"model": {"bogus": 1}}, {"sampler": {"thin": 0}}, {"extra": True},
                                      {"predictive": {"level": 0.9}, "sampler": {"store_theta": False}},
                                      {"bands": {"levels": [1.5]}}])
def test_fit_config_validation(tmp_path, capsys, override):
    cfg = demo_config(tmp_path, **override)
    code, _, err = run(capsys, "fit", "--config", cfg, "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION and json.loads(err)["exit_code"] == 2


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "fit", "--config", tmp_path / "nope.json", "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION and json.loads(err)["error"] == "InputError"


def test_long_dataset_round_trip(tmp_path):
    ds, _ = demo_dataset()
    write_long_dataset(ds, tmp_path / "d.csv", tmp_path / "c.csv", time_step=1 / 39)
    back = read_long_dataset(tmp_path / "d.csv", tmp_path / "c.csv", time_scale=1 / 39)
    assert back.subjects == list(ds.subjects) and back.regions == list(ds.regions)
    for a, b in zip(ds.Y, back.Y):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(ds.times, back.times):
        np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_array_equal(ds.W, back.W)


@pytest.mark.parametrize("snrs", [[0.0], [-0.5]])
def test_simulate_rejects_nonpositive_snr(tmp_path, capsys, snrs):
    (tmp_path / "sim.json").write_text(json.dumps({"snrs": snrs}))
    code, _, err = run(capsys, "simulate", "--config", tmp_path / "sim.json", "--out", tmp_path / "o")
    assert code == EXIT_VALIDATION and "snr" in json.loads(err)["message"].lower()


def test_simulate_micro_grid_under_five_minutes(tmp_path, capsys):
    cfg = {"truths": ["separable"], "snrs": [1.0], "n_per_group": [10], "families": ["NS"], "replicates": 1}
    (tmp_path / "sim.json").write_text(json.dumps(cfg))
    start = time.perf_counter()
    code, out, _ = run(capsys, "simulate", "--config", tmp_path / "sim.json", "--out", tmp_path / "o",
                       "--threads", 1)
    elapsed = time.perf_counter() - start
    assert code == EXIT_OK and elapsed < 300
    res = pd.read_csv(tmp_path / "o" / "results.csv")
    assert len(res) == 1 and res.loc[0, "n_failed"] == 0 and 0 < res.loc[0, "rse_cov"] < 5
    assert len(pd.read_csv(tmp_path / "o" / "replicates.csv")) == 1
