"""Posterior archives and checkpoints.

An archive is a directory of raw .npy files plus a JSON index; .npy carries
no timestamps, so identical draws serialize to identical bytes, which is
what makes manifest-driven re-runs byte-reproducible. Checkpoints use the
same container with a different role: they hold the live chain state and the
partial archive so a resumed run finishes identically to an uninterrupted
one.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

FORMAT_VERSION = 1


def save_arrays(directory, arrays: dict[str, np.ndarray], meta: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    index = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "arrays": {},
    }
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        fname = f"{name}.npy"
        np.save(os.path.join(directory, fname), arr)
        index["arrays"][name] = {"file": fname, "dtype": str(arr.dtype),
                                 "shape": list(arr.shape)}
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_arrays(directory) -> tuple[dict[str, np.ndarray], dict]:
    index_path = os.path.join(directory, "index.json")
    if not os.path.exists(index_path):
        raise ConfigurationError(f"no archive index at {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    if index.get("format_version") != FORMAT_VERSION:
        raise ConfigurationError(
            f"unsupported archive format version {index.get('format_version')}")
    arrays = {}
    for name, entry in index["arrays"].items():
        arrays[name] = np.load(os.path.join(directory, entry["file"]))
    return arrays, index["meta"]


@dataclass
class PosteriorArchive:
    """Thinned post-burn-in draws plus the per-patient likelihood trace.

    ``draws`` maps parameter names to arrays with the retained-draw axis
    first (e.g. beta (K, p), beta_star (K, L, q), allocation (K, n)).
    ``loglik`` is the (K, n) log of the per-patient data likelihood used for
    LPML. Joint archives also carry ``imputed`` completed outcome matrices
    (M, n, Tmax) captured at precomputed retained iterations.
    """

    mode: str
    draws: dict[str, np.ndarray]
    loglik: np.ndarray
    meta: dict = field(default_factory=dict)
    imputed: np.ndarray | None = None
    imputed_indices: np.ndarray | None = None

    @property
    def n_retained(self) -> int:
        return int(self.loglik.shape[0])

    @property
    def n_patients(self) -> int:
        return int(self.loglik.shape[1])

    def modal_allocation(self) -> np.ndarray:
        """Most frequent class label per patient across retained draws."""
        alloc = self.draws["allocation"]
        L = int(self.meta["L"])
        counts = np.stack([(alloc == l).sum(axis=0) for l in range(L)], axis=1)
        return counts.argmax(axis=1)

    def posterior_means(self) -> dict[str, np.ndarray]:
        return {k: v.mean(axis=0) for k, v in self.draws.items() if k != "allocation"}

    def save(self, directory) -> None:
        arrays = {f"draw_{k}": v for k, v in self.draws.items()}
        arrays["loglik"] = self.loglik
        if self.imputed is not None:
            arrays["imputed"] = self.imputed
            arrays["imputed_indices"] = self.imputed_indices
        save_arrays(directory, arrays, {"mode": self.mode, **self.meta})

    @classmethod
    def load(cls, directory) -> "PosteriorArchive":
        arrays, meta = load_arrays(directory)
        mode = meta.pop("mode")
        draws = {k[len("draw_"):]: v for k, v in arrays.items() if k.startswith("draw_")}
        return cls(mode=mode, draws=draws, loglik=arrays["loglik"], meta=meta,
                   imputed=arrays.get("imputed"),
                   imputed_indices=arrays.get("imputed_indices"))


def select_spaced(n_available: int, m: int) -> np.ndarray:
    """Indices of m equally spaced items out of n_available (0-based)."""
    if m > n_available:
        raise ConfigurationError(
            f"requested {m} draws but only {n_available} are retained")
    return (np.arange(m, dtype=np.int64) * n_available) // m
