"""MMEB-v1 writer.

Layout (all integers and floats little-endian):

    manifest.json        format_version 1, dataset_id, emb_dim,
                         prompt_template, class_names, per-split counts,
                         sha256 checksums of every blob
    text.f32             P x C float32 rows, one per class prompt
    <split>.images.f32   N x C float32 rows
    <split>.labels.u32   N uint32 class indices

Every embedding row is stored unit-L2-normalized. This module is
self-contained on purpose: the training side owns its own reader, and
the byte format is the only thing the two share.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def normalize_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def write_store(
    path,
    dataset_id: str,
    prompt_template: str,
    class_names: list[str],
    text_embs: np.ndarray,
    splits: dict[str, tuple[np.ndarray, np.ndarray]],
) -> None:
    """Write normalized embeddings; ``splits`` maps name -> (images, labels)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    emb_dim = int(text_embs.shape[1])
    blobs: dict[str, bytes] = {
        "text.f32": normalize_rows(text_embs).astype("<f4").tobytes(order="C")
    }
    counts = {}
    for name, (images, labels) in splits.items():
        if images.shape[1] != emb_dim:
            raise ValueError(f"{name} images are {images.shape[1]}-wide, text is {emb_dim}-wide")
        blobs[f"{name}.images.f32"] = normalize_rows(images).astype("<f4").tobytes(order="C")
        blobs[f"{name}.labels.u32"] = np.asarray(labels).astype("<u4").tobytes(order="C")
        counts[name] = {"count": int(len(labels))}
    manifest = {
        "format_version": FORMAT_VERSION,
        "dataset_id": dataset_id,
        "emb_dim": emb_dim,
        "prompt_template": prompt_template,
        "class_names": list(class_names),
        "splits": counts,
        "checksums": {
            name: "sha256:" + hashlib.sha256(raw).hexdigest() for name, raw in blobs.items()
        },
    }
    for name, raw in blobs.items():
        (path / name).write_bytes(raw)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_back(path) -> dict:
    """Re-read an exported directory from its bytes (used for the reference report)."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    emb_dim = manifest["emb_dim"]
    out = {
        "manifest": manifest,
        "text": np.frombuffer((path / "text.f32").read_bytes(), dtype="<f4")
        .reshape(-1, emb_dim)
        .astype(np.float64),
        "splits": {},
    }
    for name in manifest["splits"]:
        images = (
            np.frombuffer((path / f"{name}.images.f32").read_bytes(), dtype="<f4")
            .reshape(-1, emb_dim)
            .astype(np.float64)
        )
        labels = np.frombuffer((path / f"{name}.labels.u32").read_bytes(), dtype="<u4").astype(
            np.int64
        )
        out["splits"][name] = (images, labels)
    return out
