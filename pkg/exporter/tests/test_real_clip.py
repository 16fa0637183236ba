"""Real-backbone, real-data export checks.

These need the pretrained checkpoint in the local cache and the CIFAR-10
archive on disk; both are skipped cleanly when absent so the stub suite
stays the gate in minimal environments.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from clip_exporter.export import ExportSpec, SetupError, export


def _backbone_available() -> bool:
    try:
        from clip_exporter.backbones import resolve_backbone

        resolve_backbone("openai/clip-vit-base-patch32")
        return True
    except Exception:
        return False


def _cifar_available() -> bool:
    try:
        from clip_exporter.datasets import Cifar10Dataset

        Cifar10Dataset(root="data", download=False)
        return True
    except Exception:
        return False


requires_real = pytest.mark.skipif(
    not (_backbone_available() and _cifar_available()),
    reason="pretrained backbone or CIFAR-10 data not available locally",
)


@requires_real
def test_cifar10_export_smoke(tmp_path):
    spec = ExportSpec(
        dataset="cifar10", out=str(tmp_path / "cifar"), limit_per_split=256, batch_size=64
    )
    reference = export(spec)
    manifest = json.loads((tmp_path / "cifar" / "manifest.json").read_text())
    assert manifest["emb_dim"] == 512
    assert len(manifest["class_names"]) == 10
    accuracy = reference["zero_shot"]["test"]["accuracy"]
    assert accuracy is not None and accuracy > 0.5  # far above the 10% chance level


@requires_real
def test_cifar10_export_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        spec = ExportSpec(
            dataset="cifar10", out=str(tmp_path / name), limit_per_split=64, batch_size=32
        )
        export(spec)
        outs.append(tmp_path / name)
    for blob in ("text.f32", "train.images.f32", "test.images.f32"):
        assert (outs[0] / blob).read_bytes() == (outs[1] / blob).read_bytes()
