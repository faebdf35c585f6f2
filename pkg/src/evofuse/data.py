"""Synthetic multimodal data with controllable cross-modal structure,
JSONL persistence, and train/val/test splitting.

Each sample carries one fixed-length feature vector per modality. All
modalities are linear views of a common latent vector (each observing
only a subset of latent factors, so signal is partial and overlapping),
the sentiment score is a squashed projection of the latent, and the
emotion label partitions the latent plane into six fixed sectors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError
from .rng import DATA_STREAM, spawn_rng

# latent factors observed by each modality (latent_dim = 4)
MODALITY_FACTORS = {
    "text": (0, 1, 2),
    "audio": (1, 2, 3),
    "visual": (2, 3, 0),
}
LATENT_DIM = 4
SENTIMENT_DIRECTION_NORM = 0.75  # keeps tanh near its linear range
N_EMOTIONS = 6


@dataclass(frozen=True)
class LabelBundle:
    sentiment: float  # in [-3, 3]
    class7: int
    class2: int
    emotion: int

    def __post_init__(self):
        if not -3.0 <= self.sentiment <= 3.0:
            raise FormatError(f"sentiment {self.sentiment} outside [-3, 3]")
        if self.class7 != sentiment_to_class7(self.sentiment):
            raise FormatError("class7 inconsistent with sentiment")
        if self.class2 != (1 if self.sentiment >= 0 else 0):
            raise FormatError("class2 inconsistent with sentiment")
        if not 0 <= self.emotion < N_EMOTIONS:
            raise FormatError(f"emotion {self.emotion} out of range")

    @classmethod
    def from_sentiment(cls, sentiment: float, emotion: int) -> "LabelBundle":
        return cls(
            sentiment=float(sentiment),
            class7=sentiment_to_class7(sentiment),
            class2=1 if sentiment >= 0 else 0,
            emotion=int(emotion),
        )


def sentiment_to_class7(score: float) -> int:
    return int(np.round(min(max(score, -3.0), 3.0))) + 3


@dataclass(frozen=True)
class MultimodalSample:
    id: str
    text: np.ndarray
    audio: np.ndarray
    visual: np.ndarray
    labels: LabelBundle


@dataclass(frozen=True)
class GeneratorSpec:
    n: int = 2000
    d_text: int = 16
    d_audio: int = 16
    d_visual: int = 16
    noise_level: float = 0.3
    seed: int = 0
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.n < 30:
            raise ConfigError("need n >= 30")
        if min(self.d_text, self.d_audio, self.d_visual) < 2:
            raise ConfigError("modality dims must be >= 2")
        if self.noise_level < 0:
            raise ConfigError("noise_level must be >= 0")
        check_ratios(self.ratios)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "d_text": self.d_text,
            "d_audio": self.d_audio,
            "d_visual": self.d_visual,
            "noise_level": self.noise_level,
            "seed": self.seed,
            "ratios": list(self.ratios),
        }


def check_ratios(ratios) -> tuple[float, float, float]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or ratios[0] <= 0 or ratios[1] <= 0:
        raise ConfigError("ratios must be positive for train/val (test may be 0)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios sum to {sum(ratios)}, expected 1")
    return tuple(float(r) for r in ratios)


@dataclass
class DatasetSplit:
    d_text: int
    d_audio: int
    d_visual: int
    train: list[MultimodalSample] = field(default_factory=list)
    val: list[MultimodalSample] = field(default_factory=list)
    test: list[MultimodalSample] = field(default_factory=list)
    spec: dict | None = None

    def __post_init__(self):
        ids = [s.id for part in (self.train, self.val, self.test) for s in part]
        if len(set(ids)) != len(ids):
            raise FormatError("sample ids must be disjoint across splits")
        if not self.val:
            raise FormatError("validation split must be nonempty")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.d_text, self.d_audio, self.d_visual)


def emotion_from_latent(z: np.ndarray) -> np.ndarray:
    """Six fixed 60-degree sectors of the (z2, z3) latent plane."""
    angle = np.arctan2(z[:, 3], z[:, 2])  # (-pi, pi]
    idx = np.floor((angle + math.pi) / (math.pi / 3.0)).astype(int)
    return np.clip(idx, 0, N_EMOTIONS - 1)


def generate_synthetic(spec: GeneratorSpec) -> DatasetSplit:
    """Seed-deterministic synthetic dataset split per the generator spec."""
    rng = spawn_rng(spec.seed, DATA_STREAM)
    u = rng.normal(size=LATENT_DIM)
    u *= SENTIMENT_DIRECTION_NORM / np.linalg.norm(u)
    mixing = {}
    offsets = {}
    for name, d in (("text", spec.d_text), ("audio", spec.d_audio), ("visual", spec.d_visual)):
        a = rng.normal(size=(d, LATENT_DIM))
        mask = np.zeros(LATENT_DIM)
        mask[list(MODALITY_FACTORS[name])] = 1.0
        mixing[name] = a * mask / math.sqrt(len(MODALITY_FACTORS[name]))
        offsets[name] = rng.normal(scale=0.5, size=d)

    z = rng.normal(size=(spec.n, LATENT_DIM))
    sentiment = 3.0 * np.tanh(z @ u)
    emotion = emotion_from_latent(z)
    features = {}
    for name in ("text", "audio", "visual"):
        clean = z @ mixing[name].T + offsets[name]
        noise = rng.normal(size=clean.shape)
        features[name] = clean + spec.noise_level * noise

    samples = []
    for i in range(spec.n):
        samples.append(
            MultimodalSample(
                id=f"s{i:06d}",
                text=features["text"][i],
                audio=features["audio"][i],
                visual=features["visual"][i],
                labels=LabelBundle.from_sentiment(sentiment[i], emotion[i]),
            )
        )
    split = split_dataset(samples, spec.ratios, spec.seed, dims=(spec.d_text, spec.d_audio, spec.d_visual))
    split.spec = spec.to_dict()
    return split


def split_dataset(
    samples: list[MultimodalSample],
    ratios: tuple[float, float, float],
    seed: int,
    dims: tuple[int, int, int] | None = None,
) -> DatasetSplit:
    """Seeded shuffle then contiguous partition into train/val/test."""
    ratios = check_ratios(ratios)
    if dims is None:
        first = samples[0]
        dims = (len(first.text), len(first.audio), len(first.visual))
    rng = spawn_rng(seed, DATA_STREAM, 1)
    order = rng.permutation(len(samples))
    shuffled = [samples[i] for i in order]
    n = len(samples)
    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor(ratios[1] * n))
    return DatasetSplit(
        d_text=dims[0],
        d_audio=dims[1],
        d_visual=dims[2],
        train=shuffled[:n_train],
        val=shuffled[n_train : n_train + n_val],
        test=shuffled[n_train + n_val :],
    )


# -- JSONL persistence ------------------------------------------------------

SPLIT_FILES = ("train.jsonl", "val.jsonl", "test.jsonl")


def _sample_to_json(s: MultimodalSample) -> dict:
    return {
        "id": s.id,
        "text": [float(v) for v in s.text],
        "audio": [float(v) for v in s.audio],
        "visual": [float(v) for v in s.visual],
        "labels": {
            "sentiment": float(s.labels.sentiment),
            "class7": s.labels.class7,
            "class2": s.labels.class2,
            "emotion": s.labels.emotion,
        },
    }


def save_jsonl(split: DatasetSplit, out_dir: str | Path) -> None:
    """Writes train.jsonl / val.jsonl / test.jsonl, each with a header line."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "d_text": split.d_text,
        "d_audio": split.d_audio,
        "d_visual": split.d_visual,
        "spec": split.spec,
    }
    for fname, part in zip(SPLIT_FILES, (split.train, split.val, split.test)):
        with open(out / fname, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
            for s in part:
                fh.write(json.dumps(_sample_to_json(s), sort_keys=True, separators=(",", ":")) + "\n")


def _parse_sample(row: dict, dims: tuple[int, int, int], where: str) -> MultimodalSample:
    try:
        vecs = {}
        for key, d in zip(("text", "audio", "visual"), dims):
            v = np.asarray(row[key], dtype=np.float64)
            if v.shape != (d,):
                raise FormatError(f"{where}: {key} has {v.size} features, header says {d}")
            if not np.all(np.isfinite(v)):
                raise FormatError(f"{where}: non-finite {key} feature")
            vecs[key] = v
        lab = row["labels"]
        labels = LabelBundle(
            sentiment=float(lab["sentiment"]),
            class7=int(lab["class7"]),
            class2=int(lab["class2"]),
            emotion=int(lab["emotion"]),
        )
        return MultimodalSample(id=str(row["id"]), labels=labels, **vecs)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{where}: malformed record ({exc})") from exc
    except FormatError as exc:
        if where in str(exc):
            raise
        raise FormatError(f"{where}: {exc}") from exc


def _read_split_file(path: Path):
    if not path.exists():
        raise FormatError(f"missing split file {path}")
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
        dims = (int(header["d_text"]), int(header["d_audio"]), int(header["d_visual"]))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad header line ({exc})") from exc
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path} row {lineno}: invalid JSON") from exc
        samples.append(_parse_sample(row, dims, f"{path} row {lineno}"))
    return header, samples


def load_jsonl(data_dir: str | Path) -> DatasetSplit:
    """Loads the three split files written by save_jsonl."""
    data_dir = Path(data_dir)
    headers, parts = [], []
    for fname in SPLIT_FILES:
        header, samples = _read_split_file(data_dir / fname)
        headers.append(header)
        parts.append(samples)
    dims = {(h["d_text"], h["d_audio"], h["d_visual"]) for h in headers}
    if len(dims) != 1:
        raise FormatError("split files disagree on feature dims")
    d = dims.pop()
    if not parts[1]:
        raise FormatError("validation split is empty")
    return DatasetSplit(
        d_text=d[0], d_audio=d[1], d_visual=d[2],
        train=parts[0], val=parts[1], test=parts[2],
        spec=headers[0].get("spec"),
    )


# -- array views ------------------------------------------------------------

@dataclass(frozen=True)
class ArrayBundle:
    """Stacked feature/label arrays for one list of samples."""

    ids: tuple[str, ...]
    text: np.ndarray
    audio: np.ndarray
    visual: np.ndarray
    sentiment: np.ndarray
    class7: np.ndarray
    class2: np.ndarray
    emotion: np.ndarray

    @property
    def n(self) -> int:
        return len(self.ids)


def stack_samples(samples: list[MultimodalSample]) -> ArrayBundle:
    if not samples:
        raise ConfigError("cannot stack an empty sample list")
    return ArrayBundle(
        ids=tuple(s.id for s in samples),
        text=np.stack([s.text for s in samples]),
        audio=np.stack([s.audio for s in samples]),
        visual=np.stack([s.visual for s in samples]),
        sentiment=np.array([s.labels.sentiment for s in samples]),
        class7=np.array([s.labels.class7 for s in samples]),
        class2=np.array([s.labels.class2 for s in samples]),
        emotion=np.array([s.labels.emotion for s in samples]),
    )
