import hashlib
import json
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from clip_exporter.export import ExportSpec, SetupError, export, zero_shot_reference
from clip_exporter.format import read_back


class StubEncoder:
    """Deterministic encoder: every input hashes to a unit vector."""

    def __init__(self, dim=32):
        self.dim = dim

    def _vector(self, payload: bytes) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.dim)
        return v / np.linalg.norm(v)

    def encode_texts(self, prompts):
        return np.stack([self._vector(p.encode()) for p in prompts])

    def encode_images(self, images):
        return np.stack([self._vector(np.round(img, 9).tobytes()) for img in images])


class StubDataset:
    """Four classes of tiny random images, deterministic per split."""

    class_names = ["ant", "bee", "cat", "dog"]

    def split(self, name):
        rng = np.random.default_rng({"train": 1, "test": 2}[name])
        images = rng.random((20, 4, 4, 3))
        labels = np.arange(20, dtype=np.int64) % 4
        return images, labels


def run_export(tmp_path, name="store", **overrides) -> Path:
    out = tmp_path / name
    spec = ExportSpec(dataset="stub", out=str(out), **overrides)
    export(spec, encoder=StubEncoder(), dataset=StubDataset())
    return out


def dir_bytes(path: Path) -> dict:
    # export_spec.json records the invocation (including the out path),
    # so it is excluded from byte-determinism comparisons
    return {
        f.name: f.read_bytes()
        for f in sorted(path.iterdir())
        if f.name != "export_spec.json"
    }


def test_export_writes_valid_store(tmp_path):
    out = run_export(tmp_path)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    assert manifest["emb_dim"] == 32
    assert manifest["class_names"] == ["ant", "bee", "cat", "dog"]
    assert manifest["prompt_template"] == "a photo of a {}."
    assert manifest["splits"] == {"train": {"count": 20}, "test": {"count": 20}}
    for name, declared in manifest["checksums"].items():
        actual = "sha256:" + hashlib.sha256((out / name).read_bytes()).hexdigest()
        assert declared == actual, name


def test_exported_rows_are_unit_norm_after_f32_rounding(tmp_path):
    out = run_export(tmp_path)
    data = read_back(out)
    assert np.abs(np.linalg.norm(data["text"], axis=1) - 1.0).max() <= 1e-4
    for images, _ in data["splits"].values():
        assert np.abs(np.linalg.norm(images, axis=1) - 1.0).max() <= 1e-4


def test_export_is_deterministic(tmp_path):
    a = run_export(tmp_path, "a", seed=4)
    b = run_export(tmp_path, "b", seed=4)
    assert dir_bytes(a) == dir_bytes(b)


def test_sigma_zero_is_byte_identical_to_no_noise_flag(tmp_path):
    plain = run_export(tmp_path, "plain", seed=9)
    zero = run_export(tmp_path, "zero", noise_sigma=0.0, seed=9)
    assert dir_bytes(plain) == dir_bytes(zero)


def test_pixel_noise_changes_only_the_noised_split(tmp_path):
    plain = run_export(tmp_path, "plain")
    noisy = run_export(tmp_path, "noisy", noise_sigma=0.05, seed=9)
    assert (plain / "text.f32").read_bytes() == (noisy / "text.f32").read_bytes()
    assert (plain / "test.images.f32").read_bytes() == (noisy / "test.images.f32").read_bytes()
    assert (plain / "train.images.f32").read_bytes() != (noisy / "train.images.f32").read_bytes()
    assert "pixelnoise" in json.loads((noisy / "manifest.json").read_text())["dataset_id"]


def test_reference_report_matches_recomputation_from_bytes(tmp_path):
    out = run_export(tmp_path)
    reference = json.loads((out / "reference.json").read_text())
    recomputed = zero_shot_reference(out)
    assert reference["zero_shot"] == json.loads(json.dumps(recomputed))
    for split in ("train", "test"):
        entry = reference["zero_shot"][split]
        assert entry["n_total"] == 20
        assert 0 <= entry["n_correct"] <= 20
        assert entry["accuracy"] == entry["n_correct"] / entry["n_total"]


def test_template_is_recorded_and_used(tmp_path):
    out = run_export(tmp_path, "t", prompt_template="a painting of a {}.")
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["prompt_template"] == "a painting of a {}."
    # a different template changes the text embeddings
    other = run_export(tmp_path, "u")
    assert (out / "text.f32").read_bytes() != (other / "text.f32").read_bytes()


def test_limit_per_split(tmp_path):
    out = run_export(tmp_path, "lim", limit_per_split=8)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["splits"]["train"]["count"] == 8


def test_missing_dataset_is_setup_error(tmp_path):
    with pytest.raises(SetupError):
        export(ExportSpec(dataset="no-such-dataset", out=str(tmp_path / "x")), encoder=StubEncoder())


# ---------------------------------------------------------------------------
# cross-check through the consumer's external interface (CLI + bytes only)

MMADAPTER = shutil.which("mmadapter")


@pytest.mark.skipif(MMADAPTER is None, reason="consumer CLI not installed")
def test_consumer_validates_and_reproduces_reference_exactly(tmp_path):
    out = run_export(tmp_path)
    check = subprocess.run(
        [MMADAPTER, "validate-store", "--store", str(out)], capture_output=True, text=True
    )
    assert check.returncode == 0, check.stderr

    runs = tmp_path / "runs"
    result = subprocess.run(
        [MMADAPTER, "eval", "--store", str(out), "--adapter", "none", "--out", str(runs)],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0, result.stderr
    (run_dir,) = [p for p in runs.iterdir() if p.is_dir()]
    rows = (run_dir / "predictions" / "all.csv").read_text().splitlines()[1:]
    n_correct = sum(int(line.rsplit(",", 1)[1]) for line in rows)
    reference = json.loads((out / "reference.json").read_text())["zero_shot"]["test"]
    assert n_correct == reference["n_correct"]
    assert len(rows) == reference["n_total"]
