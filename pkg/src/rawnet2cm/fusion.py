"""Linear score-level fusion of several countermeasure systems."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ScoreRecord, write_text_atomic

log = logging.getLogger(__name__)

FUSION_FORMAT = "rawnet2cm-fusion"
FUSION_VERSION = 1
MAX_SYSTEMS = 8


class AlignmentError(ValueError):
    pass


@dataclass
class FusionModel:
    kind: str
    weights: np.ndarray
    bias: float
    means: np.ndarray
    stds: np.ndarray

    @property
    def n_systems(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        return {"format": FUSION_FORMAT, "version": FUSION_VERSION, "kind": self.kind,
                "weights": self.weights.tolist(), "bias": self.bias,
                "means": self.means.tolist(), "stds": self.stds.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> FusionModel:
        if d.get("format") != FUSION_FORMAT or d.get("version") != FUSION_VERSION:
            raise ValueError("not a version-1 fusion model")
        return cls(d["kind"], np.asarray(d["weights"], float), float(d["bias"]),
                   np.asarray(d["means"], float), np.asarray(d["stds"], float))

    def save(self, path) -> None:
        write_text_atomic(path, json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> FusionModel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def align_scores(systems: Sequence[Sequence[ScoreRecord]]) -> tuple[list[ScoreRecord], np.ndarray]:
    """Join per-system score lists on utterance id.

    Returns the first system's records (defining row order) and an
    (N, n_systems) score matrix.
    """
    if not systems:
        raise AlignmentError("no systems given")
    tables = []
    for recs in systems:
        table = {r.utterance_id: r.score for r in recs}
        if len(table) != len(recs):
            raise AlignmentError("duplicate utterance ids in a score list")
        tables.append(table)
    ref_ids = set(tables[0])
    for i, table in enumerate(tables[1:], start=1):
        missing = sorted(ref_ids ^ set(table))
        if missing:
            shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
            raise AlignmentError(f"system {i} is misaligned with system 0; ids not in both: {shown}")
    rows = list(systems[0])
    matrix = np.array([[t[r.utterance_id] for t in tables] for r in rows], dtype=np.float64)
    return rows, matrix.reshape(len(rows), len(tables))


def _objective(kind: str, w, b, z, y, lam) -> float:
    margin = y * (z @ w + b)
    if kind == "linear_svm":
        loss = np.maximum(0.0, 1.0 - margin).mean()
    else:
        loss = np.logaddexp(0.0, -margin).mean()
    return float(loss + 0.5 * lam * w @ w)


def fit_fusion(scores: np.ndarray, labels, kind: str = "linear_svm", c: float = 1.0,
               epochs: int = 200, lr: float = 0.5, batch_size: int = 64, seed: int = 0) -> FusionModel:
    """Fit a linear separator on standardized per-system scores.

    ``labels`` are 1 for bona fide and 0 for spoof. The objective is
    ``0.5 * lam * |w|^2 + mean(loss)`` with ``lam = 1 / (c * N)`` and hinge
    (``linear_svm``) or logistic loss, minimized by seeded mini-batch
    subgradient descent with a ``lr / sqrt(t)`` step; the iterate with the
    lowest full objective is kept. Constant systems are dropped (weight 0).
    """
    if kind not in ("linear_svm", "logistic"):
        raise ValueError(f"unknown fusion kind {kind!r}")
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("fusion needs a (N, n_systems >= 2) score matrix")
    if x.shape[1] > MAX_SYSTEMS:
        raise ValueError(f"at most {MAX_SYSTEMS} systems can be fused")
    lab = np.asarray(labels)
    if lab.shape != (x.shape[0],):
        raise ValueError("one label per row is required")
    if not (np.any(lab == 1) and np.any(lab == 0)):
        raise ValueError("both classes are required to fit a fusion")
    y = np.where(lab == 1, 1.0, -1.0)
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    scale = np.maximum(np.abs(means), 1.0)
    constant = stds <= 1e-12 * scale
    for j in np.flatnonzero(constant):
        log.warning("system %d has constant scores; dropped from the fusion", j)
    stds = np.where(constant, 1.0, stds)
    z = (x - means) / stds
    z[:, constant] = 0.0
    n = z.shape[0]
    lam = 1.0 / (c * n)

    rng = np.random.default_rng(seed)
    w = np.zeros(z.shape[1])
    b = 0.0
    best = (_objective(kind, w, b, z, y, lam), w.copy(), b)
    t = 0
    for _ in range(epochs):
        for idx in np.array_split(rng.permutation(n), max(1, n // batch_size)):
            t += 1
            zb, yb = z[idx], y[idx]
            margin = yb * (zb @ w + b)
            if kind == "linear_svm":
                coef = np.where(margin < 1.0, -yb, 0.0)
            else:
                coef = -yb / (1.0 + np.exp(np.clip(margin, -500, 500)))
            gw = zb.T @ coef / len(idx) + lam * w
            gb = coef.mean()
            step = lr / np.sqrt(t)
            w = w - step * gw
            w[constant] = 0.0
            b = b - step * gb
        obj = _objective(kind, w, b, z, y, lam)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    _, w, b = best
    return FusionModel(kind, w, float(b), means, stds)


def apply_fusion(model: FusionModel, scores: np.ndarray) -> np.ndarray:
    """Signed distance of each standardized score vector to the fusion hyperplane.

    With all-zero weights the bias alone is returned (a constant score).
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_systems:
        raise ValueError(f"expected (N, {model.n_systems}) scores, got {x.shape}")
    decision = ((x - model.means) / model.stds) @ model.weights + model.bias
    norm = float(np.linalg.norm(model.weights))
    return decision / norm if norm > 0 else decision


def fuse_records(model: FusionModel, systems: Sequence[Sequence[ScoreRecord]]) -> list[ScoreRecord]:
    rows, matrix = align_scores(systems)
    fused = apply_fusion(model, matrix)
    return [ScoreRecord(r.utterance_id, r.attack_id, r.key, float(s)) for r, s in zip(rows, fused)]


def fit_fusion_records(systems: Sequence[Sequence[ScoreRecord]], **kwargs) -> FusionModel:
    rows, matrix = align_scores(systems)
    labels = np.array([1 if r.key == "bonafide" else 0 for r in rows])
    return fit_fusion(matrix, labels, **kwargs)
