"""LFCC front-end with a two-GMM (bona fide / spoof) log-likelihood-ratio back-end."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from scipy.special import logsumexp

from .data import ScoreRecord, Utterance, Waveform, write_text_atomic

log = logging.getLogger(__name__)

GMM_FORMAT = "rawnet2cm-gmm"
GMM_VERSION = 1
FEATURE_MAGIC = b"LFCCFEAT"


@dataclass(frozen=True)
class LfccConfig:
    n_filters: int = 70
    frame_ms: float = 20.0
    shift_ms: float = 10.0
    n_fft: int = 1024
    n_ceps: int = 20
    deltas: bool = True
    double_deltas: bool = True
    delta_width: int = 2
    sample_rate: int = 16000
    f_min: float = 0.0
    f_max: float | None = None

    def __post_init__(self):
        if self.n_filters < self.n_ceps:
            raise ValueError("n_filters must be >= n_ceps")
        if self.shift_ms > self.frame_ms:
            raise ValueError("frame shift must not exceed frame length")
        if self.frame_len > self.n_fft:
            raise ValueError("frame longer than FFT size")

    @property
    def frame_len(self) -> int:
        return int(round(self.frame_ms * self.sample_rate / 1000))

    @property
    def frame_shift(self) -> int:
        return int(round(self.shift_ms * self.sample_rate / 1000))

    @property
    def dim(self) -> int:
        return self.n_ceps * (1 + int(self.deltas) + int(self.double_deltas))


def linear_filterbank(cfg: LfccConfig) -> tuple[np.ndarray, np.ndarray]:
    """Triangular filters with centres equally spaced in Hz.

    Returns (weights of shape (n_filters, n_fft//2 + 1), centre frequencies).
    """
    f_max = cfg.f_max if cfg.f_max is not None else cfg.sample_rate / 2
    edges = np.linspace(cfg.f_min, f_max, cfg.n_filters + 2)
    freqs = np.fft.rfftfreq(cfg.n_fft, 1.0 / cfg.sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs[None, :] - lo) / (mid - lo)
    fall = (hi - freqs[None, :]) / (hi - mid)
    return np.clip(np.minimum(rise, fall), 0.0, None), edges[1:-1]


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas over +-``width`` frames with edge replication."""
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    n = feat.shape[0]
    num = sum(k * (padded[width + k: width + k + n] - padded[width - k: width - k + n])
              for k in range(1, width + 1))
    return num / (2 * sum(k * k for k in range(1, width + 1)))


def lfcc_extract(w: Waveform | np.ndarray, cfg: LfccConfig = LfccConfig()) -> np.ndarray:
    """(n_frames, dim) LFCC matrix: Hamming frame, power spectrum, linear
    triangular filterbank, log, orthonormal DCT-II, optional deltas."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if x.size < cfg.frame_len:
        raise ValueError(f"waveform of {x.size} samples is shorter than one frame ({cfg.frame_len})")
    frames = sliding_window_view(x, cfg.frame_len)[:: cfg.frame_shift]
    power = np.abs(np.fft.rfft(frames * np.hamming(cfg.frame_len), cfg.n_fft, axis=1)) ** 2
    fb, _ = linear_filterbank(cfg)
    energies = np.log(np.maximum(power @ fb.T, 1e-30))
    ceps = dct(energies, type=2, axis=1, norm="ortho")[:, : cfg.n_ceps]
    parts = [ceps]
    if cfg.deltas or cfg.double_deltas:
        d1 = deltas(ceps, cfg.delta_width)
        if cfg.deltas:
            parts.append(d1)
        if cfg.double_deltas:
            parts.append(deltas(d1, cfg.delta_width))
    return np.hstack(parts)


def save_features(path, feat: np.ndarray) -> None:
    """Binary matrix: 8-byte magic, uint32 version, uint32 rows, uint32 cols, float32 LE data."""
    feat = np.ascontiguousarray(feat, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", 1, *feat.shape))
        fh.write(feat.tobytes())


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    version, rows, cols = struct.unpack("<III", raw[8:20])
    if version != 1:
        raise ValueError(f"{path}: unsupported feature version {version}")
    data = np.frombuffer(raw[20:], dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated feature matrix")
    return data.reshape(rows, cols).astype(np.float64)


# ---------------------------------------------------------------- GMM

@dataclass
class GmmModel:
    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, D)
    variances: np.ndarray  # (M, D)
    train_loglik: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_loglik(self, x: np.ndarray) -> np.ndarray:
        """(N, M) of log w_m + log N(x | mu_m, diag var_m)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"features of shape {x.shape} do not match GMM dimension {self.dim}")
        inv = 1.0 / self.variances
        maha = (x * x) @ inv.T - 2.0 * x @ (self.means * inv).T + np.sum(self.means ** 2 * inv, axis=1)
        maha = np.maximum(maha, 0.0)
        const = -0.5 * (self.dim * np.log(2 * np.pi) + np.sum(np.log(self.variances), axis=1))
        return np.log(self.weights) + const - 0.5 * maha

    def frame_loglik(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_loglik(x), axis=1)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> GmmModel:
        return cls(np.asarray(d["weights"], dtype=np.float64), np.asarray(d["means"], dtype=np.float64),
                   np.asarray(d["variances"], dtype=np.float64))


def _kmeans_init(x: np.ndarray, m: int, rng: np.random.Generator, iters: int) -> np.ndarray:
    means = x[rng.choice(x.shape[0], size=m, replace=False)].copy()
    for _ in range(iters):
        d = (x * x).sum(1)[:, None] - 2 * x @ means.T + (means * means).sum(1)[None, :]
        assign = np.argmin(d, axis=1)
        for k in range(m):
            members = x[assign == k]
            if len(members):
                means[k] = members.mean(axis=0)
    return means


def gmm_fit(frames: np.ndarray, n_components: int, iterations: int = 20, seed: int = 0,
            var_floor: float = 1e-6, kmeans_iters: int = 5) -> GmmModel:
    """Diagonal-covariance GMM by EM after a seeded k-means start.

    ``train_loglik`` holds the mean per-frame log-likelihood of the model
    before each EM update and after the last one; it never decreases except
    when a component with no responsibility mass is re-seeded (logged).
    """
    x = np.asarray(frames, dtype=np.float64)
    n, d = x.shape
    if n < n_components:
        raise ValueError(f"{n} frames cannot fit {n_components} components")
    rng = np.random.default_rng(seed)
    means = _kmeans_init(x, n_components, rng, kmeans_iters)
    global_var = np.maximum(x.var(axis=0), var_floor)
    model = GmmModel(np.full(n_components, 1.0 / n_components), means,
                     np.tile(global_var, (n_components, 1)))
    history: list[float] = []
    for _ in range(iterations):
        comp = model.component_loglik(x)
        total = logsumexp(comp, axis=1)
        history.append(float(total.mean()))
        resp = np.exp(comp - total[:, None])
        nk = resp.sum(axis=0)
        dead = nk < 1e-10
        nk_safe = np.where(dead, 1.0, nk)
        means = (resp.T @ x) / nk_safe[:, None]
        sq = (resp.T @ (x * x)) / nk_safe[:, None]
        var = np.maximum(sq - means ** 2, var_floor)
        weights = nk / n
        if dead.any():
            for k in np.flatnonzero(dead):
                log.warning("GMM component %d lost all mass; re-seeding from a data point", k)
                means[k] = x[rng.integers(n)]
                var[k] = global_var
                weights[k] = 1.0 / n
            weights /= weights.sum()
        model = GmmModel(weights, means, var)
    history.append(float(model.frame_loglik(x).mean()))
    model.train_loglik = history
    return model


def gmm_score(frames: np.ndarray, bona_model: GmmModel, spoof_model: GmmModel) -> float:
    """Average per-frame log-likelihood ratio, bona fide over spoof."""
    if bona_model.dim != spoof_model.dim:
        raise ValueError("bona fide and spoof GMMs have different dimensions")
    return float(np.mean(bona_model.frame_loglik(frames) - spoof_model.frame_loglik(frames)))


# ---------------------------------------------------------------- system

@dataclass
class BaselineModel:
    lfcc: LfccConfig
    bonafide: GmmModel
    spoof: GmmModel

    def save(self, path) -> None:
        doc = {"format": GMM_FORMAT, "version": GMM_VERSION, "lfcc": asdict(self.lfcc),
               "models": {"bonafide": self.bonafide.to_dict(), "spoof": self.spoof.to_dict()}}
        write_text_atomic(path, json.dumps(doc, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> BaselineModel:
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != GMM_FORMAT or doc.get("version") != GMM_VERSION:
            raise ValueError(f"{path}: not a version-{GMM_VERSION} GMM model file")
        return cls(LfccConfig(**doc["lfcc"]), GmmModel.from_dict(doc["models"]["bonafide"]),
                   GmmModel.from_dict(doc["models"]["spoof"]))


def train_baseline(utterances: Sequence[Utterance], cfg: LfccConfig = LfccConfig(),
                   n_components: int = 512, iterations: int = 20, seed: int = 0) -> BaselineModel:
    feats = {"bonafide": [], "spoof": []}
    for u in utterances:
        feats[u.entry.key].append(lfcc_extract(u.samples, cfg))
    if not feats["bonafide"] or not feats["spoof"]:
        raise ValueError("baseline training needs both bona fide and spoof utterances")
    models = {}
    for i, key in enumerate(("bonafide", "spoof")):
        x = np.vstack(feats[key])
        m = min(n_components, x.shape[0])
        if m < n_components:
            log.warning("%s: only %d frames, using %d components", key, x.shape[0], m)
        models[key] = gmm_fit(x, m, iterations, seed + i)
    return BaselineModel(cfg, models["bonafide"], models["spoof"])


def score_baseline(model: BaselineModel, utterances: Sequence[Utterance]) -> list[ScoreRecord]:
    return [ScoreRecord(u.entry.utterance_id, u.entry.attack_id, u.entry.key,
                        gmm_score(lfcc_extract(u.samples, model.lfcc), model.bonafide, model.spoof))
            for u in utterances]
