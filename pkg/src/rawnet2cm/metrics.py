"""EER and minimum normalized tandem detection cost (t-DCF) for countermeasure scores.

Scores follow the "higher = more bona fide" convention unless a caller says
otherwise. Error rates at threshold ``tau``::

    P_miss(tau) = #{bona fide < tau} / N_bona
    P_fa(tau)   = #{spoof >= tau} / N_spoof
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ScoreRecord

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


def _arrays(bona, spoof) -> tuple[np.ndarray, np.ndarray]:
    b = np.asarray(bona, dtype=np.float64).ravel()
    s = np.asarray(spoof, dtype=np.float64).ravel()
    if b.size == 0 or s.size == 0:
        raise MetricError("both bona fide and spoof scores are required")
    return b, s


def det_curve(bona, spoof) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, p_miss, p_fa) at -inf, every distinct score, and +inf."""
    b, s = _arrays(bona, spoof)
    b = np.sort(b)
    s = np.sort(s)
    thr = np.concatenate(([-np.inf], np.unique(np.concatenate((b, s))), [np.inf]))
    p_miss = np.searchsorted(b, thr, side="left") / b.size
    p_fa = (s.size - np.searchsorted(s, thr, side="left")) / s.size
    return thr, p_miss, p_fa


def _lower_hull(x: np.ndarray, y: np.ndarray) -> list[int]:
    """Indices of the lower-left convex hull of points sorted by increasing x."""
    hull: list[int] = []
    for i in range(x.size):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a])
            if cross <= 0:
                hull.pop()
            else:
                break
        hull.append(i)
    return hull


def _diagonal_crossing(x1, y1, x2, y2) -> float:
    d1 = x1 - y1
    d2 = x2 - y2
    if d1 == d2:
        return min(x1, x2)
    s = d1 / (d1 - d2)
    return x1 + s * (x2 - x1)


def compute_eer(bona, spoof, method: str = "rocch") -> tuple[float, float]:
    """Equal error rate and a threshold at (or next to) the operating point.

    ``rocch`` intersects the P_miss = P_fa line with the convex hull of the
    DET points, interpolating linearly between hull vertices. ``naive``
    interpolates between adjacent raw DET points instead.
    """
    thr, p_miss, p_fa = det_curve(bona, spoof)
    if method == "naive":
        d = p_fa - p_miss  # decreasing from 1 to -1 as the threshold rises
        j = int(np.argmax(d <= 0))
        if d[j] == 0 or j == 0:
            return float(p_miss[j]), float(thr[j])
        i = j - 1
        eer = _diagonal_crossing(p_fa[i], p_miss[i], p_fa[j], p_miss[j])
        return float(eer), float(thr[i] if abs(d[i]) < abs(d[j]) else thr[j])
    if method != "rocch":
        raise ValueError(f"unknown EER method {method!r}")
    # hull walks from (p_fa=0, p_miss=1) to (1, 0): reverse threshold order
    x = p_fa[::-1]
    y = p_miss[::-1]
    hull = _lower_hull(x, y)
    closest = thr[int(np.argmin(np.abs(p_miss - p_fa)))]
    for a, b in zip(hull[:-1], hull[1:]):
        if x[a] - y[a] <= 0 <= x[b] - y[b]:
            return float(_diagonal_crossing(x[a], y[a], x[b], y[b])), float(closest)
    raise AssertionError("DET hull never crosses the diagonal")


@dataclass(frozen=True)
class TdcfConfig:
    """ASV operating point, detection costs and priors of the t-DCF.

    Field names match the keys of the plain-text config file.
    """

    p_fa_asv: float
    p_miss_asv: float
    p_miss_spoof_asv: float
    c_miss_asv: float = 1.0
    c_fa_asv: float = 10.0
    c_miss_cm: float = 1.0
    c_fa_cm: float = 10.0
    pi_target: float = 0.95 * 0.99
    pi_nontarget: float = 0.95 * 0.01
    pi_spoof: float = 0.05

    def __post_init__(self):
        for name in ("p_fa_asv", "p_miss_asv", "p_miss_spoof_asv", "pi_target", "pi_nontarget", "pi_spoof"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} is not a probability")
        costs = (self.c_miss_asv, self.c_fa_asv, self.c_miss_cm, self.c_fa_cm)
        if min(costs) < 0 or max(costs) <= 0:
            raise MetricError("costs must be non-negative with at least one positive")
        total = self.pi_target + self.pi_nontarget + self.pi_spoof
        if abs(total - 1.0) > 1e-12:
            raise MetricError(f"priors sum to {total!r}, not 1")

    @property
    def c1(self) -> float:
        """Weight of the CM miss rate."""
        return (self.pi_target * (self.c_miss_cm - self.c_miss_asv * self.p_miss_asv)
                - self.pi_nontarget * self.c_fa_asv * self.p_fa_asv)

    @property
    def c2(self) -> float:
        """Weight of the CM false-alarm rate."""
        return self.c_fa_cm * self.pi_spoof * (1.0 - self.p_miss_spoof_asv)

    @classmethod
    def parse(cls, text: str) -> TdcfConfig:
        """``key = value`` lines; ``#`` starts a comment."""
        known = {f.name for f in fields(cls)}
        values: dict[str, float] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise MetricError(f"line {lineno}: expected 'key = value'")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in known:
                raise MetricError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = float(val)
            except ValueError:
                raise MetricError(f"line {lineno}: {val!r} is not a number") from None
        try:
            return cls(**values)
        except TypeError as exc:
            raise MetricError(f"incomplete t-DCF config: {exc}") from None

    @classmethod
    def from_file(cls, path) -> TdcfConfig:
        return cls.parse(Path(path).read_text())

    @classmethod
    def default(cls) -> TdcfConfig:
        text = resources.files("rawnet2cm").joinpath("tdcf_default.cfg").read_text()
        return cls.parse(text)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self))


def tdcf_curve(bona, spoof, cfg: TdcfConfig) -> tuple[np.ndarray, np.ndarray]:
    """(thresholds, normalized t-DCF) over the DET thresholds.

    Normalization divides by ``min(C1, C2)``, the cost of the better of the
    accept-all / reject-all countermeasures.
    """
    c1, c2 = cfg.c1, cfg.c2
    if c1 <= 0 and c2 <= 0:
        raise MetricError(f"degenerate t-DCF costs C1={c1}, C2={c2}")
    if min(c1, c2) <= 0:
        raise MetricError(f"t-DCF normalization undefined for C1={c1}, C2={c2}")
    thr, p_miss, p_fa = det_curve(bona, spoof)
    return thr, (c1 * p_miss + c2 * p_fa) / min(c1, c2)


def min_tdcf(bona, spoof, cfg: TdcfConfig) -> tuple[float, float]:
    thr, curve = tdcf_curve(bona, spoof, cfg)
    i = int(np.argmin(curve))
    return float(curve[i]), float(thr[i])


@dataclass
class AttackResult:
    attack_id: str
    n_spoof: int
    min_tdcf: float
    tdcf_threshold: float
    eer: float


@dataclass
class MetricReport:
    pooled_eer: float
    eer_threshold: float
    pooled_min_tdcf: float
    tdcf_threshold: float
    n_bonafide: int
    n_spoof: int
    per_attack: list[AttackResult] = field(default_factory=list)

    def attack_map(self) -> dict[str, float]:
        return {r.attack_id: r.min_tdcf for r in self.per_attack}

    def to_text(self) -> str:
        out = io.StringIO()
        out.write(f"pooled EER        : {100 * self.pooled_eer:9.4f} %  (threshold {self.eer_threshold:.6g})\n")
        out.write(f"pooled min t-DCF  : {self.pooled_min_tdcf:9.6f}    (threshold {self.tdcf_threshold:.6g})\n")
        out.write(f"trials            : {self.n_bonafide} bona fide, {self.n_spoof} spoof\n")
        out.write(f"{'attack':<10}{'n_spoof':>8}{'min t-DCF':>12}{'EER %':>10}\n")
        for r in self.per_attack:
            out.write(f"{r.attack_id:<10}{r.n_spoof:>8d}{r.min_tdcf:>12.6f}{100 * r.eer:>10.4f}\n")
        return out.getvalue()

    def to_tsv(self) -> str:
        rows = ["attack\tn_spoof\tmin_tdcf\teer\tthreshold"]
        rows.append(f"pooled\t{self.n_spoof}\t{self.pooled_min_tdcf!r}\t{self.pooled_eer!r}\t{self.tdcf_threshold!r}")
        for r in self.per_attack:
            rows.append(f"{r.attack_id}\t{r.n_spoof}\t{r.min_tdcf!r}\t{r.eer!r}\t{r.tdcf_threshold!r}")
        return "\n".join(rows) + "\n"


def split_scores(records: Iterable[ScoreRecord], higher_is_bonafide: bool = True
                 ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Bona fide scores and spoof scores grouped by attack id."""
    sign = 1.0 if higher_is_bonafide else -1.0
    bona: list[float] = []
    spoof: dict[str, list[float]] = {}
    for r in records:
        if r.key == "bonafide":
            bona.append(sign * r.score)
        else:
            spoof.setdefault(r.attack_id, []).append(sign * r.score)
    return np.array(bona), {k: np.array(v) for k, v in spoof.items()}


def per_attack_report(records: Sequence[ScoreRecord], cfg: TdcfConfig | None = None,
                      attacks: Sequence[str] | None = None, higher_is_bonafide: bool = True,
                      eer_method: str = "rocch") -> MetricReport:
    """Pooled EER / min t-DCF plus one min t-DCF per attack (all bona fide vs that attack).

    Rows are in lexicographic attack-id order. Requested attacks with no
    spoof trials are skipped with a warning.
    """
    cfg = cfg or TdcfConfig.default()
    bona, by_attack = split_scores(records, higher_is_bonafide)
    if bona.size == 0 or not by_attack:
        raise MetricError("scores must contain both bona fide and spoof trials")
    spoof_all = np.concatenate([by_attack[k] for k in sorted(by_attack)])
    eer, eer_thr = compute_eer(bona, spoof_all, eer_method)
    tdcf, tdcf_thr = min_tdcf(bona, spoof_all, cfg)
    report = MetricReport(eer, eer_thr, tdcf, tdcf_thr, int(bona.size), int(spoof_all.size))
    wanted = sorted(set(attacks) if attacks is not None else by_attack)
    for attack in wanted:
        s = by_attack.get(attack)
        if s is None or s.size == 0:
            log.warning("attack %s has no spoof trials; skipped", attack)
            continue
        t, th = min_tdcf(bona, s, cfg)
        e, _ = compute_eer(bona, s, eer_method)
        report.per_attack.append(AttackResult(attack, int(s.size), t, th, e))
    return report

