"""Audio I/O, fixed-length cropping/tiling, protocol and score files, synthetic corpus."""

from __future__ import annotations

import csv
import io
import os
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

SAMPLE_RATE = 16000
TARGET_LEN = 64000
KEYS = ("bonafide", "spoof")
SPLITS = ("train", "dev", "eval")
ARTIFACT_KINDS = ("click", "phase", "bandgap", "hum")


class WavFormatError(ValueError):
    """The file is not 16-bit PCM mono at the expected rate."""


class ParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size


# ---------------------------------------------------------------- WAV

def load_wav(path, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a RIFF/WAVE PCM16 mono file, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise WavFormatError(f"{path}: format: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: format: truncated file") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: channels: expected 1, got {channels}")
    if width != 2:
        raise WavFormatError(f"{path}: sample width: expected 16-bit, got {8 * width}-bit")
    if rate != sample_rate:
        raise WavFormatError(f"{path}: sample rate: expected {sample_rate}, got {rate}")
    pcm = np.frombuffer(frames, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: length: no samples")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def save_wav(path, samples: np.ndarray | Waveform, sample_rate: int = SAMPLE_RATE) -> None:
    if isinstance(samples, Waveform):
        sample_rate = samples.sample_rate
        samples = samples.samples
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(to_pcm16(samples).tobytes())


def fix_length(w: Waveform | np.ndarray, target: int = TARGET_LEN, random_crop: bool = False,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop or tile to exactly ``target`` samples.

    Long inputs keep samples ``[0, target)`` unless ``random_crop``; short
    inputs are repeated end to end starting at sample 0.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w)
    n = x.shape[-1]
    if n == 0:
        raise ValueError("cannot fix the length of an empty waveform")
    if n >= target:
        start = 0
        if random_crop and n > target:
            start = int((rng or np.random.default_rng()).integers(0, n - target + 1))
        return x[..., start:start + target]
    reps = -(-target // n)
    return np.tile(x, reps)[..., :target]


# ---------------------------------------------------------------- protocol / scores

@dataclass(frozen=True)
class ProtocolEntry:
    utterance_id: str
    attack_id: str
    key: str
    split: str = "eval"

    def __post_init__(self):
        if self.key not in KEYS:
            raise ValueError(f"unknown key {self.key!r}")
        if (self.key == "bonafide") != (self.attack_id == "-"):
            raise ValueError(f"{self.utterance_id}: key {self.key} inconsistent with attack {self.attack_id}")


@dataclass(frozen=True)
class ScoreRecord:
    utterance_id: str
    attack_id: str
    key: str
    score: float


def _lines(text: str) -> Iterator[tuple[int, list[str]]]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if parts and not parts[0].startswith("#"):
            yield lineno, parts


def parse_protocol(text: str, default_split: str = "eval") -> list[ProtocolEntry]:
    """Lines ``utt_id attack_id key [split]``."""
    out = []
    for lineno, parts in _lines(text):
        if len(parts) not in (3, 4):
            raise ParseError(lineno, f"expected 3 or 4 fields, got {len(parts)}")
        utt, attack, key = parts[:3]
        split = parts[3] if len(parts) == 4 else default_split
        if key not in KEYS:
            raise ParseError(lineno, f"unknown key {key!r}")
        if split not in SPLITS:
            raise ParseError(lineno, f"unknown split {split!r}")
        try:
            out.append(ProtocolEntry(utt, attack, key, split))
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
    return out


def format_protocol(entries: Iterable[ProtocolEntry]) -> str:
    return "".join(f"{e.utterance_id} {e.attack_id} {e.key} {e.split}\n" for e in entries)


def parse_scores(text: str) -> list[ScoreRecord]:
    """Lines ``utt_id attack_id key score``."""
    out = []
    for lineno, parts in _lines(text):
        if len(parts) != 4:
            raise ParseError(lineno, f"expected 4 fields, got {len(parts)}")
        utt, attack, key, raw = parts
        if key not in KEYS:
            raise ParseError(lineno, f"unknown key {key!r}")
        try:
            score = float(raw)
        except ValueError:
            raise ParseError(lineno, f"score {raw!r} is not a number") from None
        if not np.isfinite(score):
            raise ParseError(lineno, f"non-finite score {raw!r}")
        out.append(ScoreRecord(utt, attack, key, score))
    return out


def format_scores(records: Iterable[ScoreRecord]) -> str:
    # repr round-trips floats exactly
    return "".join(f"{r.utterance_id} {r.attack_id} {r.key} {float(r.score)!r}\n" for r in records)


def read_scores(path) -> list[ScoreRecord]:
    return parse_scores(Path(path).read_text())


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------- synthetic corpus

@dataclass
class SynthSpec:
    """Recipe for a desk-scale bona fide / spoof corpus.

    ``counts`` maps split -> (n_bonafide, n_spoof). Spoof utterances are
    assigned round-robin to ``attacks`` (attack id -> artifact kind).
    """

    counts: dict[str, tuple[int, int]] = field(default_factory=lambda: {
        "train": (100, 100), "dev": (50, 50), "eval": (50, 50)})
    attacks: dict[str, str] = field(default_factory=lambda: {"A17": "click"})
    seed: int = 0
    duration: float = 1.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        for split, (nb, ns) in self.counts.items():
            if split not in SPLITS:
                raise ValueError(f"unknown split {split!r}")
            if nb < 1 or ns < 1:
                raise ValueError(f"{split}: counts must be >= 1")
        for attack, kind in self.attacks.items():
            if kind not in ARTIFACT_KINDS:
                raise ValueError(f"{attack}: unknown artifact kind {kind!r}")
            if attack == "-":
                raise ValueError("'-' is reserved for bona fide")
        if not self.attacks:
            raise ValueError("at least one attack is required")


@dataclass
class Utterance:
    entry: ProtocolEntry
    samples: np.ndarray


@dataclass
class Corpus:
    utterances: list[Utterance]

    @property
    def protocol(self) -> list[ProtocolEntry]:
        return [u.entry for u in self.utterances]

    def split(self, name: str) -> list[Utterance]:
        return [u for u in self.utterances if u.entry.split == name]


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """1/f power spectrum noise, unit RMS."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


def synth_voice(n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    """Harmonic tone complex with drifting pitch, syllable envelope and pink noise floor."""
    t = np.arange(n) / sr
    f0 = rng.uniform(90.0, 250.0)
    drift = 1.0 + 0.05 * np.sin(2 * np.pi * rng.uniform(0.5, 3.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * drift) / sr
    x = np.zeros(n)
    n_harm = int(4000.0 // f0)
    for k in range(1, n_harm + 1):
        amp = rng.uniform(0.3, 1.0) / k
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    x *= env
    x /= np.max(np.abs(x)) + 1e-12
    x = 0.5 * x + 0.01 * pink_noise(n, rng)
    return x


def _click_positions(n: int, rng: np.random.Generator) -> np.ndarray:
    period = int(rng.integers(600, 1200))
    start = int(rng.integers(0, period))
    return np.arange(start, n, period)


def add_artifact(x: np.ndarray, kind: str, sr: int, rng: np.random.Generator) -> np.ndarray:
    n = x.size
    y = x.copy()
    if kind == "click":
        # short alternating-sign bursts: energy concentrated near Nyquist
        burst = 0.4 * np.array([1.0, -1.0, 1.0, -1.0, 0.5, -0.5])
        for p in _click_positions(n, rng):
            seg = burst[: n - p]
            y[p:p + seg.size] += seg
    elif kind == "phase":
        block = 512
        spec_blocks = []
        for s in range(0, n, block):
            seg = y[s:s + block]
            spec = np.fft.rfft(seg)
            spec[1:] *= np.exp(1j * rng.uniform(-np.pi, np.pi))
            spec_blocks.append(np.fft.irfft(spec, seg.size))
        y = np.concatenate(spec_blocks)
    elif kind == "bandgap":
        spec = np.fft.rfft(y)
        f = np.fft.rfftfreq(n, 1.0 / sr)
        lo = rng.uniform(1000.0, 2500.0)
        spec[(f >= lo) & (f <= lo + 800.0)] = 0.0
        y = np.fft.irfft(spec, n)
    elif kind == "hum":
        t = np.arange(n) / sr
        y += sum(0.05 / k * np.sin(2 * np.pi * 50.0 * k * t) for k in (1, 2, 3))
    else:
        raise ValueError(f"unknown artifact kind {kind!r}")
    return np.clip(y, -0.99, 0.99)


def synth_corpus(spec: SynthSpec) -> Corpus:
    """Generate the corpus; a pure function of ``spec``.

    Each utterance draws from its own generator seeded by
    ``(seed, split, index)``, so splits never share signals.
    """
    n = int(round(spec.duration * spec.sample_rate))
    attack_ids = sorted(spec.attacks)
    utts: list[Utterance] = []
    for split in SPLITS:
        if split not in spec.counts:
            continue
        sidx = SPLITS.index(split)
        n_bona, n_spoof = spec.counts[split]
        for i in range(n_bona + n_spoof):
            rng = np.random.default_rng([spec.seed, sidx, i])
            x = synth_voice(n, spec.sample_rate, rng)
            if i < n_bona:
                entry = ProtocolEntry(f"{split}_{i:05d}", "-", "bonafide", split)
            else:
                attack = attack_ids[(i - n_bona) % len(attack_ids)]
                x = add_artifact(x, spec.attacks[attack], spec.sample_rate, rng)
                entry = ProtocolEntry(f"{split}_{i:05d}", attack, "spoof", split)
            # quantize now so in-memory and on-disk corpora are identical
            utts.append(Utterance(entry, to_pcm16(x).astype(np.float64) / 32768.0))
    return Corpus(utts)


def write_corpus(corpus: Corpus, root, sample_rate: int = SAMPLE_RATE) -> None:
    """Write ``wav/<utt>.wav``, ``protocol.txt`` and ``manifest.tsv`` under ``root``."""
    root = Path(root)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(["utterance_id", "split", "key", "attack_id", "path", "n_samples"])
    for u in corpus.utterances:
        rel = f"wav/{u.entry.utterance_id}.wav"
        save_wav(root / rel, u.samples, sample_rate)
        writer.writerow([u.entry.utterance_id, u.entry.split, u.entry.key, u.entry.attack_id,
                         rel, u.samples.size])
    write_text_atomic(root / "protocol.txt", format_protocol(corpus.protocol))
    write_text_atomic(root / "manifest.tsv", buf.getvalue())


def read_corpus(root, splits: Sequence[str] | None = None) -> Corpus:
    root = Path(root)
    entries = parse_protocol((root / "protocol.txt").read_text())
    utts = []
    for e in entries:
        if splits is not None and e.split not in splits:
            continue
        utts.append(Utterance(e, load_wav(root / "wav" / f"{e.utterance_id}.wav").samples))
    return Corpus(utts)


# ---------------------------------------------------------------- batching

def batch_iter(n_items: int | Sequence, batch_size: int = 32, shuffle_seed: int | None = 0,
               epoch: int = 0) -> list[np.ndarray]:
    """Index batches over ``n_items``; the order depends only on (seed, epoch).

    The final short batch is kept. ``shuffle_seed=None`` keeps input order.
    """
    n = n_items if isinstance(n_items, int) else len(n_items)
    if n < 1:
        raise ValueError("dataset is empty")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(n) if shuffle_seed is None else \
        np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def holdout_split(items: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    """Disjoint (kept, held-out) partition with ``round(fraction * n)`` held out, stratified by key."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    kept, held = [], []
    for key in KEYS:
        idx = [i for i, it in enumerate(items) if _key_of(it) == key]
        idx = list(rng.permutation(idx)) if idx else []
        k = int(round(fraction * len(idx)))
        held += idx[:k]
        kept += idx[k:]
    return [items[i] for i in sorted(kept)], [items[i] for i in sorted(held)]


def repartition(train: Sequence, dev: Sequence, dev_fraction: float = 0.9,
                seed: int = 0) -> tuple[list, list]:
    """Move ``dev_fraction`` of dev into training; the rest becomes validation."""
    dev_train, validation = holdout_split(dev, 1.0 - dev_fraction, seed)
    return list(train) + dev_train, validation


def _key_of(item) -> str:
    entry = getattr(item, "entry", item)
    return entry.key
