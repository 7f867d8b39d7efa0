"""Regenerate the datasets and configs shipped in ``src/rrfda/data``."""

from __future__ import annotations

import json
from pathlib import Path

from rrfda.cli import write_long_dataset
from rrfda.simgen import case_study_dataset, demo_dataset

OUT = Path(__file__).resolve().parents[1] / "src" / "rrfda" / "data"


def _relabel(ds, region_names):
    ds.subjects = [f"s{i + 1:02d}" for i in range(ds.n)]
    ds.regions = list(region_names)
    return ds


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    ds, _ = demo_dataset()
    _relabel(ds, ["frontal", "central", "occipital"])
    write_long_dataset(ds, OUT / "demo.csv", OUT / "demo_covariates.csv", time_step=1 / 39)
    demo = {
        "data": "demo.csv",
        "covariates": "demo_covariates.csv",
        "time_scale": 1 / 39,
        "basis": {"q": 8, "domain": [0.0, 1.0]},
        "model": {"prior_family": "NS", "k": 4},
        "sampler": {"iterations": 500, "burn_in": 250, "thin": 1, "seed": 1, "store_theta": True,
                    "store_loglik": True},
        "bands": {"levels": [0.2, 0.6, 0.9], "grid_size": 51},
        "predictive": {"level": 0.9},
        "loo": True,
    }
    (OUT / "demo_fit.json").write_text(json.dumps(demo, indent=2) + "\n")

    ds, _ = case_study_dataset()
    regions = ["LF", "MF", "RF", "LT", "LC", "MC", "RC", "RT", "LP", "MP", "RP"]
    _relabel(ds, regions)
    ds.covariates = ["TD", "vASD", "mvASD"]
    write_long_dataset(ds, OUT / "case_study.csv", OUT / "case_study_covariates.csv", time_step=1 / 139)
    case = {
        "data": "case_study.csv",
        "covariates": "case_study_covariates.csv",
        "time_scale": 1 / 139,
        "basis": {"q": 12, "domain": [0.0, 1.0]},
        "model": {"prior_family": "NS", "k": 10},
        "sampler": {"iterations": 3000, "burn_in": 1000, "thin": 4, "seed": 7, "store_theta": True,
                    "store_loglik": True},
        "bands": {"levels": [0.2, 0.6, 0.9], "grid_size": 101,
                  "contrasts": {"TD": [1, 0, 0], "vASD": [0, 1, 0], "mvASD": [0, 0, 1],
                               "mvASD-TD": [-1, 0, 1]}},
        "predictive": {"level": 0.9},
        "loo": True,
    }
    (OUT / "case_study_fit.json").write_text(json.dumps(case, indent=2) + "\n")


if __name__ == "__main__":
    main()
