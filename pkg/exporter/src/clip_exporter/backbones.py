"""Frozen dual-encoder backbones.

An encoder exposes encode_texts(list[str]) -> (P, D) and
encode_images(images (B, H, W, 3) in [0, 1]) -> (B, D), both float
arrays. CLIPBackbone wraps a pretrained checkpoint via transformers;
imports are lazy and failures surface as SetupMissing so callers can
report a clean setup error.
"""

from __future__ import annotations

import numpy as np

from .datasets import SetupMissing

DEFAULT_BACKBONE = "openai/clip-vit-base-patch32"  # 512-wide joint space


class CLIPBackbone:
    def __init__(self, name: str = DEFAULT_BACKBONE, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise SetupMissing(f"torch/transformers not installed: {exc}") from exc
        try:
            self.model = CLIPModel.from_pretrained(name)
            self.processor = CLIPProcessor.from_pretrained(name)
        except Exception as exc:  # hub errors vary; all mean "not available here"
            raise SetupMissing(f"pretrained backbone {name!r} not available: {exc}") from exc
        self.name = name
        self.device = device
        self.model.eval().to(device)
        self._torch = torch

    def encode_texts(self, prompts: list[str]) -> np.ndarray:
        torch = self._torch
        inputs = self.processor(text=prompts, return_tensors="pt", padding=True).to(self.device)
        with torch.no_grad():
            features = self.model.get_text_features(**inputs)
        return features.cpu().numpy().astype(np.float64)

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        torch = self._torch
        # processor expects uint8-style arrays or PIL images
        batch = [np.clip(img * 255.0, 0, 255).astype(np.uint8) for img in images]
        inputs = self.processor(images=batch, return_tensors="pt").to(self.device)
        with torch.no_grad():
            features = self.model.get_image_features(**inputs)
        return features.cpu().numpy().astype(np.float64)


def resolve_backbone(name: str, device: str = "cpu") -> CLIPBackbone:
    return CLIPBackbone(name, device=device)
