"""Manifests, dataset loading and the synthetic toy-data generator."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .text import EmbeddingTable, tokenize, write_embeddings
from .visual import (
    NUM_REGIONS,
    FeatureFormatError,
    PremiseFeatures,
    prepare_features,
    read_feature_file,
    write_feature_file,
)

LABELS = ("entailment", "neutral", "contradiction")
LABEL_INDEX = {name: i for i, name in enumerate(LABELS)}


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass
class Example:
    id: str
    hypothesis: str
    label: int
    features: PremiseFeatures
    feature_file: str = ""


@dataclass
class Dataset:
    examples: list[Example] = field(default_factory=list)
    source: str = ""

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def class_histogram(self) -> list[int]:
        counts = [0] * len(LABELS)
        for ex in self.examples:
            counts[ex.label] += 1
        return counts

    def find(self, example_id: str) -> Example:
        for ex in self.examples:
            if ex.id == example_id:
                return ex
        raise KeyError(f"no example with id {example_id!r} in {self.source or 'dataset'}")


def read_manifest(path) -> list[dict]:
    """Parse and validate a JSON-lines manifest without touching feature files."""
    entries = []
    seen = set()
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError:
        raise DatasetError(f"{path}: manifest is not valid UTF-8") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(entry, dict):
            raise DatasetError(f"{path}:{lineno}: entry must be an object")
        for key in ("id", "feature_file", "hypothesis", "label"):
            if not isinstance(entry.get(key), str):
                raise DatasetError(f"{path}:{lineno}: missing or non-string field {key!r}")
        if entry["label"] not in LABEL_INDEX:
            raise DatasetError(f"{path}:{lineno}: unknown label {entry['label']!r}")
        if entry["id"] in seen:
            raise DatasetError(f"{path}:{lineno}: duplicate id {entry['id']!r}")
        seen.add(entry["id"])
        entries.append(entry)
    return entries


def write_manifest(path, entries: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({k: e[k] for k in ("id", "feature_file", "hypothesis", "label")}) + "\n")


def load_dataset(path) -> Dataset:
    """Load a manifest and every feature file it references.

    Feature paths are resolved relative to the manifest's directory. An empty
    manifest loads with a warning; training on it fails later.
    """
    path = Path(path)
    entries = read_manifest(path)
    if not entries:
        warnings.warn(f"{path}: manifest has no entries", stacklevel=2)
    examples = []
    for e in entries:
        fpath = path.parent / e["feature_file"]
        if not fpath.is_file():
            raise DatasetError(f"{path}: feature file {e['feature_file']!r} for {e['id']!r} not found")
        try:
            feats = read_feature_file(fpath)
        except FeatureFormatError as exc:
            raise DatasetError(str(exc)) from None
        examples.append(Example(e["id"], e["hypothesis"], LABEL_INDEX[e["label"]], feats, e["feature_file"]))
    return Dataset(examples, str(path))


@dataclass(frozen=True)
class ToyConfig:
    per_class: int = 100
    d_p: int = 32
    d_h: int = 16
    noise: float = 0.1
    vocab_size: int = 256
    m: int = NUM_REGIONS
    seed: int = 12345
    concepts: int = 4
    signal: float = 3.0
    concept_rows: tuple = (3, 6)
    tokens: tuple = (3, 8)
    kind: str = "grid"
    random_labels: bool = False

    def __post_init__(self):
        if self.per_class < 1 or self.noise < 0:
            raise ValueError("per_class must be positive and noise non-negative")
        if not 2 <= self.concepts <= self.d_h or self.d_h > self.d_p:
            raise ValueError("need 2 <= concepts <= d_h <= d_p")
        if self.vocab_size < 2 * self.concepts:
            raise ValueError("vocab_size must give every concept at least one word per sign")
        if self.kind not in ("grid", "roi"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        side = math.isqrt(self.m)
        if self.kind == "grid" and side * side != self.m:
            raise ValueError("grid toy data needs a square region count")
        if not 1 <= self.concept_rows[0] <= self.concept_rows[1] <= self.m:
            raise ValueError("invalid concept_rows range")
        if not 1 <= self.tokens[0] <= self.tokens[1]:
            raise ValueError("invalid token count range")


@dataclass
class ToyDataset:
    """Paths written by the generator plus the hidden geometry the oracle needs."""

    root: Path
    manifests: dict
    embeddings: Path
    lift: np.ndarray
    concepts: np.ndarray
    signal: float


def _word(concept: int, sign: str, t: int) -> str:
    return f"c{concept}{sign}{t}"


def generate_toy_dataset(cfg: ToyConfig, out_dir) -> ToyDataset:
    """Write a balanced, separable entailment dataset to ``out_dir``.

    Every example has a concept ``c`` (a unit direction scaled by
    ``cfg.signal``). Several premise rows hold ``c`` (lifted into premise
    space) plus noise, the rest are pure noise. The hypothesis uses words
    embedded near ``c`` (entailment), near ``-c`` (contradiction) or near
    another, orthogonal concept (neutral).
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    # orthonormal concepts in embedding space, orthonormal lift into premise space
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.d_h, cfg.d_h)))
    concepts = basis[:, : cfg.concepts].T * cfg.signal
    lift, _ = np.linalg.qr(rng.standard_normal((cfg.d_p, cfg.d_h)))

    per_sign = cfg.vocab_size // (2 * cfg.concepts)
    vocab, vectors = {}, []
    for c in range(cfg.concepts):
        for sign, direction in (("p", 1.0), ("n", -1.0)):
            for t in range(per_sign):
                vocab[_word(c, sign, t)] = len(vectors)
                vectors.append(direction * concepts[c] + cfg.noise * rng.standard_normal(cfg.d_h))
    table = EmbeddingTable(vocab, np.asarray(vectors, dtype=np.float32))
    emb_path = out / "embeddings.txt"
    write_embeddings(emb_path, table)

    total = cfg.per_class * len(LABELS)
    labels = np.repeat(np.arange(len(LABELS)), cfg.per_class)
    rng.shuffle(labels)
    side = math.isqrt(cfg.m)
    records = []
    for i, label in enumerate(labels):
        a = int(rng.integers(cfg.concepts))
        rows = cfg.noise * rng.standard_normal((cfg.m, cfg.d_p))
        k = int(rng.integers(cfg.concept_rows[0], cfg.concept_rows[1] + 1))
        where = rng.choice(cfg.m, size=k, replace=False)
        rows[where] += lift @ concepts[a]
        n = int(rng.integers(cfg.tokens[0], cfg.tokens[1] + 1))
        if label == LABEL_INDEX["neutral"]:
            b = int((a + rng.integers(1, cfg.concepts)) % cfg.concepts)
            signs = rng.choice(["p", "n"], size=n)
            words = [_word(b, s, int(rng.integers(per_sign))) for s in signs]
        else:
            sign = "p" if label == LABEL_INDEX["entailment"] else "n"
            words = [_word(a, sign, int(rng.integers(per_sign))) for _ in range(n)]
        ex_id = f"toy-{i:05d}"
        rows = rows.astype(np.float32)
        if cfg.kind == "grid":
            feats = PremiseFeatures("grid", rows.reshape(side, side, cfg.d_p))
        else:
            scores = rng.uniform(0.05, 1.0, size=cfg.m).astype(np.float32)
            boxes = _roi_boxes(rng, cfg.m)
            feats = PremiseFeatures("roi", rows, scores, boxes)
        rel = f"features/{ex_id}.avef"
        write_feature_file(out / rel, feats)
        records.append({"id": ex_id, "feature_file": rel, "hypothesis": " ".join(words),
                        "label": LABELS[label]})

    if cfg.random_labels:
        shuffled = np.repeat(np.arange(len(LABELS)), cfg.per_class)
        rng.shuffle(shuffled)
        for rec, lab in zip(records, shuffled):
            rec["label"] = LABELS[lab]

    n_train = round(cfg.per_class * 0.8)
    n_val = round(cfg.per_class * 0.1)
    splits = {"train": [], "val": [], "test": []}
    for c in LABELS:
        members = [r for r in records if r["label"] == c]
        splits["train"] += members[:n_train]
        splits["val"] += members[n_train:n_train + n_val]
        splits["test"] += members[n_train + n_val:]
    manifests = {}
    for name, entries in splits.items():
        entries.sort(key=lambda r: r["id"])
        manifests[name] = out / f"{name}.jsonl"
        write_manifest(manifests[name], entries)
    assert sum(len(v) for v in splits.values()) == total
    return ToyDataset(out, manifests, emb_path, lift, concepts, cfg.signal)


def _roi_boxes(rng: np.random.Generator, k: int, size: int = 240) -> np.ndarray:
    x1 = rng.uniform(0, size * 0.75, size=k)
    y1 = rng.uniform(0, size * 0.75, size=k)
    w = rng.uniform(size * 0.1, size * 0.25, size=k)
    h = rng.uniform(size * 0.1, size * 0.25, size=k)
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1).astype(np.float32)


def concept_oracle(example: Example, table: EmbeddingTable, toy: ToyDataset, threshold: float = 0.5) -> int:
    """Label from the generator's geometry: strongest per-row mean alignment, thresholded."""
    signal = toy.signal
    rows = prepare_features(example.features).astype(np.float64) @ toy.lift
    vecs = np.array([table.vectors[table.vocab[t]] for t in tokenize(example.hypothesis)
                     if t in table.vocab], dtype=np.float64)
    if len(vecs) == 0:
        return LABEL_INDEX["neutral"]
    scores = (rows @ vecs.T).mean(axis=1) / signal ** 2
    s = scores[np.argmax(np.abs(scores))]
    if s > threshold:
        return LABEL_INDEX["entailment"]
    if s < -threshold:
        return LABEL_INDEX["contradiction"]
    return LABEL_INDEX["neutral"]


def toy_config_dict(cfg: ToyConfig) -> dict:
    out = asdict(cfg)
    out["concept_rows"] = list(cfg.concept_rows)
    out["tokens"] = list(cfg.tokens)
    return out

