"""On-disk frozen-embedding datasets (MMEB-v1) and synthetic generators.

Directory layout:

    manifest.json        format_version, dataset_id, emb_dim, class_names,
                         prompt_template, per-split counts, sha256 checksums
    text.f32             P x C float32, little-endian, row-major
    <split>.images.f32   N x C float32, little-endian, row-major
    <split>.labels.u32   N uint32 class indices, little-endian

Rows are stored unit-L2-normalized (the frozen-encoder convention) in
32-bit floats and promoted to float64 in memory. Loading validates, in
order: blob row width, row count, checksum, finiteness, normalization
(tolerance 1e-4), label range.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumMismatchError,
    ConfigError,
    CountMismatchError,
    DataError,
    NonFiniteError,
    NotNormalizedError,
    ShapeError,
    StoreFormatError,
)

FORMAT_VERSION = 1
DEFAULT_PROMPT_TEMPLATE = "a photo of a {}."
_NORM_TOLERANCE = 1e-4


@dataclass
class SplitData:
    images: np.ndarray  # (N, C) float64
    labels: np.ndarray  # (N,) int64

    @property
    def count(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class EmbeddingStore:
    dataset_id: str
    emb_dim: int
    class_names: list[str]
    prompt_template: str
    text_embs: np.ndarray  # (P, C) float64
    splits: dict[str, SplitData] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def text_for_classes(self, class_ids) -> np.ndarray:
        return self.text_embs[np.asarray(class_ids, dtype=np.int64)].copy()

    def images(self, split: str, indices=None) -> np.ndarray:
        data = self._split(split).images
        return data.copy() if indices is None else data[np.asarray(indices, dtype=np.int64)].copy()

    def labels(self, split: str, indices=None) -> np.ndarray:
        data = self._split(split).labels
        return data.copy() if indices is None else data[np.asarray(indices, dtype=np.int64)].copy()

    def class_indices(self, split: str, class_id: int) -> np.ndarray:
        return np.flatnonzero(self._split(split).labels == class_id)

    def _split(self, split: str) -> SplitData:
        if split not in self.splits:
            raise DataError(f"store {self.dataset_id!r} has no split {split!r}")
        return self.splits[split]

    def validate(self) -> None:
        if self.text_embs.shape != (self.n_classes, self.emb_dim):
            raise ShapeError(
                f"text embeddings shape {self.text_embs.shape} does not match "
                f"{self.n_classes} classes x dim {self.emb_dim}"
            )
        _check_rows(self.text_embs, "text embeddings")
        for name, split in self.splits.items():
            if split.images.shape != (split.count, self.emb_dim):
                raise ShapeError(
                    f"{name} images shape {split.images.shape} inconsistent with dim {self.emb_dim}"
                )
            _check_rows(split.images, f"{name} images")
            if split.count and (split.labels.min() < 0 or split.labels.max() >= self.n_classes):
                raise DataError(f"{name} labels fall outside [0, {self.n_classes})")


def _check_rows(rows: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise NonFiniteError(f"{what} contain non-finite values")
    if rows.shape[0] == 0:
        return
    norms = np.linalg.norm(rows, axis=1)
    off = np.abs(norms - 1.0)
    if np.any(off > _NORM_TOLERANCE):
        raise NotNormalizedError(
            f"{what}: row norm deviates from 1 by {off.max():.3e} (tolerance {_NORM_TOLERANCE:g})"
        )


def _sha256(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def save_store(store: EmbeddingStore, path) -> None:
    """Write the store; see the module docstring for the byte layout."""
    store.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs: dict[str, bytes] = {"text.f32": store.text_embs.astype("<f4").tobytes(order="C")}
    for name, split in store.splits.items():
        blobs[f"{name}.images.f32"] = split.images.astype("<f4").tobytes(order="C")
        blobs[f"{name}.labels.u32"] = split.labels.astype("<u4").tobytes(order="C")
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_id": store.dataset_id,
        "emb_dim": store.emb_dim,
        "prompt_template": store.prompt_template,
        "class_names": store.class_names,
        "splits": {name: {"count": split.count} for name, split in store.splits.items()},
        "checksums": {name: _sha256(raw) for name, raw in blobs.items()},
    }
    for name, raw in blobs.items():
        (path / name).write_bytes(raw)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _read_blob(path: Path, name: str) -> bytes:
    blob_path = path / name
    if not blob_path.exists():
        raise StoreFormatError(f"missing blob {name}")
    return blob_path.read_bytes()


def _rows_from_blob(raw: bytes, name: str, width: int, expected_rows: int) -> np.ndarray:
    row_bytes = 4 * width
    if len(raw) % row_bytes:
        raise ShapeError(
            f"{name}: {len(raw)} bytes is not a whole number of {width}-wide float32 rows"
        )
    rows = len(raw) // row_bytes
    if rows != expected_rows:
        raise CountMismatchError(f"{name}: holds {rows} rows, manifest declares {expected_rows}")
    return np.frombuffer(raw, dtype="<f4").reshape(rows, width).astype(np.float64)


def load_store(path) -> EmbeddingStore:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise StoreFormatError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise StoreFormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    emb_dim = int(manifest["emb_dim"])
    class_names = list(manifest["class_names"])
    checksums = manifest["checksums"]

    def checked(name: str, raw: bytes) -> bytes:
        actual = _sha256(raw)
        if checksums.get(name) != actual:
            raise ChecksumMismatchError(
                f"{name}: checksum {actual} does not match manifest {checksums.get(name)!r}"
            )
        return raw

    raw_text = _read_blob(path, "text.f32")
    text = _rows_from_blob(raw_text, "text.f32", emb_dim, len(class_names))
    checked("text.f32", raw_text)

    splits: dict[str, SplitData] = {}
    for name, meta in manifest["splits"].items():
        count = int(meta["count"])
        raw_images = _read_blob(path, f"{name}.images.f32")
        images = _rows_from_blob(raw_images, f"{name}.images.f32", emb_dim, count)
        checked(f"{name}.images.f32", raw_images)
        raw_labels = _read_blob(path, f"{name}.labels.u32")
        if len(raw_labels) != 4 * count:
            raise CountMismatchError(
                f"{name}.labels.u32: holds {len(raw_labels) // 4} labels, manifest declares {count}"
            )
        checked(f"{name}.labels.u32", raw_labels)
        labels = np.frombuffer(raw_labels, dtype="<u4").astype(np.int64)
        splits[name] = SplitData(images=images, labels=labels)

    store = EmbeddingStore(
        dataset_id=manifest["dataset_id"],
        emb_dim=emb_dim,
        class_names=class_names,
        prompt_template=manifest.get("prompt_template", DEFAULT_PROMPT_TEMPLATE),
        text_embs=text,
        splits=splits,
    )
    store.validate()
    return store


def _normalize_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def generate_synthetic(
    n_classes: int,
    per_class: int,
    emb_dim: int,
    separation: float,
    seed: int,
    test_per_class: int | None = None,
    prompt_offset: float = 0.0,
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE,
) -> EmbeddingStore:
    """Deterministic synthetic store around unit-sphere class prototypes.

    Text embedding = prototype; each image = normalize(prototype +
    gaussian / separation), drawn fresh per split so train and test are
    disjoint. separation = 0 degenerates to pure noise (chance level);
    larger separation pulls images onto their prototypes.

    With prompt_offset > 0 the text embeddings become normalize(
    prototype + prompt_offset * gaussian) instead of the prototypes
    themselves. Offset prompts are what make training worthwhile: with
    exact prototypes the cosine rule is already the Bayes classifier
    for this data, so no adapter could beat it out of sample.
    """
    if separation < 0:
        raise ConfigError(f"separation must be >= 0, got {separation}")
    if prompt_offset < 0:
        raise ConfigError(f"prompt_offset must be >= 0, got {prompt_offset}")
    if n_classes < 1 or per_class < 1 or emb_dim < 2:
        raise ConfigError("need n_classes >= 1, per_class >= 1, emb_dim >= 2")
    test_per_class = per_class if test_per_class is None else test_per_class
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    prototypes = _normalize_rows(rng.standard_normal((n_classes, emb_dim)))
    if prompt_offset > 0:
        text_rows = _normalize_rows(
            prototypes + prompt_offset * rng.standard_normal((n_classes, emb_dim))
        )
    else:
        text_rows = prototypes

    def draw_split(count_per_class: int) -> SplitData:
        images, labels = [], []
        for c in range(n_classes):
            noise = rng.standard_normal((count_per_class, emb_dim))
            if separation == 0:
                raw = noise
            else:
                raw = prototypes[c] + noise / separation
            images.append(_normalize_rows(raw))
            labels.append(np.full(count_per_class, c, dtype=np.int64))
        return SplitData(images=np.concatenate(images), labels=np.concatenate(labels))

    offset_tag = f"-off{prompt_offset:g}" if prompt_offset > 0 else ""
    store = EmbeddingStore(
        dataset_id=(
            f"synthetic-c{n_classes}-k{per_class}-d{emb_dim}-sep{separation:g}{offset_tag}-seed{seed}"
        ),
        emb_dim=emb_dim,
        class_names=[f"class_{c:03d}" for c in range(n_classes)],
        prompt_template=prompt_template,
        text_embs=text_rows,
        splits={"train": draw_split(per_class), "test": draw_split(test_per_class)},
    )
    store.validate()
    return store


def gaussian_perturbation(shape, sigma: float, seed: int) -> np.ndarray:
    """The exact noise tensor add_gaussian_noise applies before renormalizing."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13]))
    return sigma * rng.standard_normal(shape)


def add_gaussian_noise(
    store: EmbeddingStore, sigma: float, seed: int, splits=("train",)
) -> EmbeddingStore:
    """Perturb image embeddings with isotropic Gaussian noise, then renormalize.

    Text embeddings are never touched. sigma = 0 returns the data
    unchanged (no renormalization round-off is introduced).
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be >= 0, got {sigma}")
    new_splits: dict[str, SplitData] = {}
    for name, split in store.splits.items():
        if name in splits and sigma > 0 and split.count:
            noisy = split.images + gaussian_perturbation(split.images.shape, sigma, seed)
            new_splits[name] = SplitData(images=_normalize_rows(noisy), labels=split.labels.copy())
        else:
            new_splits[name] = SplitData(images=split.images.copy(), labels=split.labels.copy())
    noisy_store = EmbeddingStore(
        dataset_id=f"{store.dataset_id}+embnoise-sigma{sigma:g}-seed{seed}",
        emb_dim=store.emb_dim,
        class_names=list(store.class_names),
        prompt_template=store.prompt_template,
        text_embs=store.text_embs.copy(),
        splits=new_splits,
    )
    noisy_store.validate()
    return noisy_store
