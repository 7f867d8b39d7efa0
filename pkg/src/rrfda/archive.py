"""Posterior draw archives and their on-disk format.

An archive directory holds ``metadata.json`` and one ``.npy`` file per
parameter block under ``blocks/``; each block's leading axis indexes draws.
``metadata.json`` records the format version, the resolved model spec, the
basis, run metadata and the list of blocks with their shapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .basis import BasisSystem
from .errors import MissingDrawsError, StructuralError
from .model import LatentState, ModelSpec, implied_sigma_z

FORMAT_VERSION = 1


@dataclass
class PosteriorArchive:
    family: str
    spec: ModelSpec
    basis: object
    draws: dict
    fixed: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(len(self.draws["psi"]))

    def has(self, block: str) -> bool:
        return block in self.draws

    def require(self, block: str, flag: str):
        if block not in self.draws:
            raise MissingDrawsError(
                f"archive has no stored '{block}' draws; re-run the fit with sampler.{flag} = true"
            )
        return self.draws[block]

    def state_at(self, s: int) -> LatentState:
        """Partial :class:`LatentState` for draw ``s`` (enough for Sigma_z and means)."""
        d = self.draws
        st = LatentState(self.family, d["theta"][s] if "theta" in d else None, d["psi"][s], d["sigma_eps"][s])
        for name in ("S", "upsilon", "gamma", "sigma_p", "sigma_q", "xi", "sigma_r", "delta", "delta_u", "delta_pi"):
            if name in d:
                setattr(st, name, d[name][s])
        if self.family == "NB":
            st.omega0 = self.fixed["omega0"]
        return st

    def sigma_z(self, s: int) -> np.ndarray:
        return implied_sigma_z(self.state_at(s))

    def sigma_z_mean(self) -> np.ndarray:
        acc = None
        for s in range(self.n_draws):
            Sz = self.sigma_z(s)
            acc = Sz if acc is None else acc + Sz
        return acc / self.n_draws

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> Path:
        path = Path(path)
        (path / "blocks").mkdir(parents=True, exist_ok=True)
        blocks = {}
        for name in sorted(self.draws):
            arr = np.ascontiguousarray(self.draws[name])
            np.save(path / "blocks" / f"{name}.npy", arr, allow_pickle=False)
            blocks[name] = {"shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name in sorted(self.fixed):
            arr = np.ascontiguousarray(self.fixed[name])
            np.save(path / "blocks" / f"fixed_{name}.npy", arr, allow_pickle=False)
        if not isinstance(self.basis, BasisSystem):
            raise StructuralError("only B-spline bases can be persisted")
        meta = {
            "format_version": FORMAT_VERSION,
            "family": self.family,
            "spec": self.spec.to_dict(),
            "basis": self.basis.to_dict(),
            "metadata": self.metadata,
            "blocks": blocks,
            "fixed": sorted(self.fixed),
        }
        (path / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "PosteriorArchive":
        path = Path(path)
        meta = json.loads((path / "metadata.json").read_text())
        if meta.get("format_version") != FORMAT_VERSION:
            raise StructuralError(f"unsupported archive format version {meta.get('format_version')}")
        draws = {name: np.load(path / "blocks" / f"{name}.npy") for name in meta["blocks"]}
        fixed = {name: np.load(path / "blocks" / f"fixed_{name}.npy") for name in meta.get("fixed", [])}
        return cls(
            family=meta["family"],
            spec=ModelSpec.from_dict(meta["spec"]),
            basis=BasisSystem.from_dict(meta["basis"]),
            draws=draws,
            fixed=fixed,
            metadata=meta["metadata"],
        )
