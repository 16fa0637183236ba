"""Adapter architectures over frozen text/image embeddings.

Every adapter maps (P class-prompt embeddings, B image embeddings) to a
(B, P) logit matrix of scaled cosine similarities. The cross-modal
adapter concatenates the prompts and one image into a single sequence
and runs masked multi-head attention whose mask permits attention only
*across* modalities: each prompt token may look at the image token, the
image token may look at every prompt token, and nothing else (the
diagonal included) is reachable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    MASK_NEG_INF,
    Parameter,
    Tensor,
    add,
    broadcast_to,
    concatenate,
    ensure_tensor,
    gelu,
    l2_normalize,
    layer_norm,
    matmul,
    narrow,
    relu,
    reshape,
    scale,
    softmax,
    transpose,
)

ADAPTER_KINDS = ("identity_clip", "clip_adapter", "mma")
ATTENTION_VARIANTS = ("mha", "transformer_block")
UPDOWN_VARIANTS = ("linear", "mlp")


@dataclass(frozen=True)
class MMAConfig:
    """Architecture hyperparameters shared by all adapter kinds.

    ``lambda_blend`` weights the *original* embedding in the residual
    blend; 1.0 reproduces zero-shot behaviour exactly. Per-modality
    overrides default to the shared value.
    """

    emb_dim: int = 512
    down_factor: int = 4
    mid_factor: int = 16
    heads: int = 4
    lambda_blend: float = 0.2
    lambda_text: float | None = None
    lambda_image: float | None = None
    adapt_text: bool = True
    variant_attention: str = "mha"
    variant_updown: str = "linear"
    logit_scale: float = 100.0

    @property
    def effective_lambda_text(self) -> float:
        return self.lambda_blend if self.lambda_text is None else self.lambda_text

    @property
    def effective_lambda_image(self) -> float:
        return self.lambda_blend if self.lambda_image is None else self.lambda_image

    def validate(self) -> None:
        if self.emb_dim <= 0:
            raise ConfigError(f"emb_dim must be positive, got {self.emb_dim}")
        if self.emb_dim % self.down_factor:
            raise ConfigError(
                f"emb_dim {self.emb_dim} is not divisible by down_factor {self.down_factor}"
            )
        if self.emb_dim % self.mid_factor:
            raise ConfigError(
                f"emb_dim {self.emb_dim} is not divisible by mid_factor {self.mid_factor}"
            )
        if (self.emb_dim // self.down_factor) % self.heads:
            raise ConfigError(
                f"attention width {self.emb_dim // self.down_factor} is not divisible by "
                f"{self.heads} heads"
            )
        for name, lam in (
            ("lambda_blend", self.lambda_blend),
            ("lambda_text", self.effective_lambda_text),
            ("lambda_image", self.effective_lambda_image),
        ):
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {lam}")
        if self.variant_attention not in ATTENTION_VARIANTS:
            raise ConfigError(f"unknown variant_attention {self.variant_attention!r}")
        if self.variant_updown not in UPDOWN_VARIANTS:
            raise ConfigError(f"unknown variant_updown {self.variant_updown!r}")
        if self.logit_scale <= 0:
            raise ConfigError(f"logit_scale must be positive, got {self.logit_scale}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class AttentionMask:
    """Additive T x T mask with T = prompts + images; 0 keeps, -inf blocks."""

    prompts: int
    images: int
    matrix: np.ndarray

    @property
    def total(self) -> int:
        return self.prompts + self.images


def make_mask(num_prompts: int, num_images: int = 1) -> AttentionMask:
    """Cross-modal attention mask: prompts see only images and vice versa.

    The diagonal is blocked too, so no token attends to itself. Exactly
    2 * num_prompts * num_images positions are open.
    """
    if num_prompts < 1 or num_images < 1:
        raise ConfigError(f"mask needs at least one prompt and one image, got ({num_prompts}, {num_images})")
    total = num_prompts + num_images
    m = np.full((total, total), MASK_NEG_INF, dtype=np.float64)
    m[:num_prompts, num_prompts:] = 0.0
    m[num_prompts:, :num_prompts] = 0.0
    return AttentionMask(num_prompts, num_images, m)


def build_input_sequence(text_embs, image_embs) -> Tensor:
    """Stack prompts and image into one (P+1, B, C) sequence.

    The P text embeddings are broadcast identically across the batch
    axis; position P carries each batch element's own image embedding.
    """
    text = ensure_tensor(text_embs)
    images = ensure_tensor(image_embs)
    if text.ndim != 2 or images.ndim != 2:
        raise ShapeError(
            f"expected 2-d text (P, C) and images (B, C), got {text.shape} and {images.shape}"
        )
    if text.shape[1] != images.shape[1]:
        raise ShapeError(
            f"embedding dims differ: text {text.shape} vs images {images.shape}"
        )
    if text.shape[0] < 1 or images.shape[0] < 1:
        raise ShapeError("need at least one prompt and one image")
    p, c = text.shape
    b = images.shape[0]
    text_rows = broadcast_to(reshape(text, (p, 1, c)), (p, b, c))
    image_row = reshape(images, (1, b, c))
    return concatenate([text_rows, image_row], axis=0)


class Linear:
    """Dense layer over the last axis, Glorot-uniform weight, zero bias."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        limit = math.sqrt(6.0 / (in_dim + out_dim))
        self.weight = Parameter(f"{name}.weight", rng.uniform(-limit, limit, (in_dim, out_dim)))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight.tensor), self.bias.tensor)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class MaskedMultiHeadAttention:
    """Multi-head attention with an additive mask applied before softmax."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, name: str):
        if dim % heads:
            raise ConfigError(f"attention width {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, f"{name}.q")
        self.k = Linear(dim, dim, rng, f"{name}.k")
        self.v = Linear(dim, dim, rng, f"{name}.v")
        self.out = Linear(dim, dim, rng, f"{name}.out")

    def parameters(self) -> list[Parameter]:
        return [p for lin in (self.q, self.k, self.v, self.out) for p in lin.parameters()]

    def _attend(self, x: Tensor, mask: AttentionMask) -> tuple[Tensor, Tensor]:
        t, b, d = x.shape
        if d != self.dim:
            raise ShapeError(f"attention expects width {self.dim}, got sequence of width {d}")
        if mask.matrix.shape != (t, t):
            raise ShapeError(f"mask shape {mask.matrix.shape} does not match sequence length {t}")
        xb = transpose(x, (1, 0, 2))  # (B, T, d)

        def split_heads(v: Tensor) -> Tensor:
            return transpose(reshape(v, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

        q = split_heads(self.q(xb))
        k = split_heads(self.k(xb))
        v = split_heads(self.v(xb))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        probs = softmax(add(scores, Tensor(mask.matrix)), axis=-1)  # (B, H, T, T)
        context = matmul(probs, v)
        merged = reshape(transpose(context, (0, 2, 1, 3)), (b, t, d))
        return transpose(self.out(merged), (1, 0, 2)), probs

    def __call__(self, x: Tensor, mask: AttentionMask) -> Tensor:
        return self._attend(x, mask)[0]

    def attention_probs(self, x: Tensor, mask: AttentionMask) -> np.ndarray:
        """Post-softmax attention weights, shape (B, heads, T, T)."""
        return self._attend(x, mask)[1].data


class TransformerBlock:
    """Post-norm encoder block: masked attention and a width-4 feed-forward,
    each wrapped in residual + layer norm."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, name: str):
        self.attn = MaskedMultiHeadAttention(dim, heads, rng, f"{name}.attn")
        self.ln1_gamma = Parameter(f"{name}.ln1.gamma", np.ones(dim))
        self.ln1_beta = Parameter(f"{name}.ln1.beta", np.zeros(dim))
        self.ff1 = Linear(dim, 4 * dim, rng, f"{name}.ff1")
        self.ff2 = Linear(4 * dim, dim, rng, f"{name}.ff2")
        self.ln2_gamma = Parameter(f"{name}.ln2.gamma", np.ones(dim))
        self.ln2_beta = Parameter(f"{name}.ln2.beta", np.zeros(dim))

    def parameters(self) -> list[Parameter]:
        return (
            self.attn.parameters()
            + [self.ln1_gamma, self.ln1_beta]
            + self.ff1.parameters()
            + self.ff2.parameters()
            + [self.ln2_gamma, self.ln2_beta]
        )

    def __call__(self, x: Tensor, mask: AttentionMask) -> Tensor:
        h = layer_norm(add(x, self.attn(x, mask)), self.ln1_gamma.tensor, self.ln1_beta.tensor)
        ff = self.ff2(gelu(self.ff1(h)))
        return layer_norm(add(h, ff), self.ln2_gamma.tensor, self.ln2_beta.tensor)


def blend_and_logits(
    text_embs,
    image_embs,
    adapted_text: Tensor | None,
    adapted_image: Tensor | None,
    config: MMAConfig,
) -> Tensor:
    """Residual-blend originals with adapted embeddings and take cosine logits.

    Both sides are L2-normalized, blended as lam * original +
    (1 - lam) * adapted, and the cosine itself renormalizes, so logits
    are insensitive to the overall blend scale. With adapt_text off the
    text side bypasses the blend entirely and keeps the raw prompts.
    Passing None for an adapted side means "no adaptation" for it.
    """
    text = ensure_tensor(text_embs)
    images = ensure_tensor(image_embs)
    p, c = text.shape
    b = images.shape[0]
    lam_t = config.effective_lambda_text
    lam_i = config.effective_lambda_image

    text_base = broadcast_to(reshape(l2_normalize(text, axis=-1), (p, 1, c)), (p, b, c))
    if adapted_text is not None and config.adapt_text:
        adapted = l2_normalize(adapted_text, axis=-1)
        if adapted.ndim == 2:  # per-class adaptation without a batch axis
            adapted = broadcast_to(reshape(adapted, (p, 1, c)), (p, b, c))
        text_blend = add(scale(text_base, lam_t), scale(adapted, 1.0 - lam_t))
    else:
        text_blend = text_base

    image_base = l2_normalize(images, axis=-1)
    if adapted_image is not None:
        image_blend = add(
            scale(image_base, lam_i),
            scale(l2_normalize(adapted_image, axis=-1), 1.0 - lam_i),
        )
    else:
        image_blend = image_base

    text_final = l2_normalize(text_blend, axis=-1)
    image_final = broadcast_to(reshape(l2_normalize(image_blend, axis=-1), (1, b, c)), (p, b, c))
    sims = (text_final * image_final).sum(axis=-1)  # (P, B)
    return scale(transpose(sims, (1, 0)), config.logit_scale)


class IdentityClip:
    """Zero-shot classifier: cosine between the frozen embeddings, no parameters."""

    kind = "identity_clip"

    def __init__(self, config: MMAConfig, seed: int = 0):
        config.validate()
        self.config = config

    def parameters(self) -> list[Parameter]:
        return []

    def logits(self, text_embs, image_embs) -> Tensor:
        return blend_and_logits(text_embs, image_embs, None, None, self.config)


class ClipAdapter:
    """Per-modality bottleneck adapter: C -> C/r -> C with ReLU, blended residually.

    The two modalities get independent weights and never exchange
    information before the final cosine.
    """

    kind = "clip_adapter"

    def __init__(self, config: MMAConfig, seed: int):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        c = config.emb_dim
        hidden = c // config.down_factor
        self.text_down = Linear(c, hidden, rng, "clip_adapter.text.down")
        self.text_up = Linear(hidden, c, rng, "clip_adapter.text.up")
        self.image_down = Linear(c, hidden, rng, "clip_adapter.image.down")
        self.image_up = Linear(hidden, c, rng, "clip_adapter.image.up")

    def parameters(self) -> list[Parameter]:
        return [
            p
            for lin in (self.text_down, self.text_up, self.image_down, self.image_up)
            for p in lin.parameters()
        ]

    def adapted(self, x, tower: str) -> Tensor:
        x = ensure_tensor(x)
        if tower == "text":
            return self.text_up(relu(self.text_down(x)))
        return self.image_up(relu(self.image_down(x)))

    def logits(self, text_embs, image_embs) -> Tensor:
        adapted_text = self.adapted(text_embs, "text")
        adapted_image = self.adapted(image_embs, "image")
        return blend_and_logits(text_embs, image_embs, adapted_text, adapted_image, self.config)


class MultiModalAdapter:
    """Joint adapter: downsample, cross-modal masked attention, upsample.

    Pipeline per batch element: the (P+1)-token sequence is projected
    C -> C/down_factor, mixed by masked attention (or a full encoder
    block), then expanded C/down -> C/mid -> C with a GELU between the
    two upsampling layers. The output splits back into adapted text
    (per batch element) and adapted image rows.
    """

    kind = "mma"

    def __init__(self, config: MMAConfig, seed: int):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        c = config.emb_dim
        attn_dim = c // config.down_factor
        mid_dim = c // config.mid_factor
        if config.variant_updown == "linear":
            self.down = [Linear(c, attn_dim, rng, "mma.down")]
        else:  # 2-layer bottleneck with GELU between
            self.down = [
                Linear(c, attn_dim, rng, "mma.down1"),
                Linear(attn_dim, attn_dim, rng, "mma.down2"),
            ]
        if config.variant_attention == "mha":
            self.mixer = MaskedMultiHeadAttention(attn_dim, config.heads, rng, "mma.attn")
        else:
            self.mixer = TransformerBlock(attn_dim, config.heads, rng, "mma.block")
        self.up1 = Linear(attn_dim, mid_dim, rng, "mma.up1")
        self.up2 = Linear(mid_dim, c, rng, "mma.up2")

    def parameters(self) -> list[Parameter]:
        params = [p for lin in self.down for p in lin.parameters()]
        params += self.mixer.parameters()
        params += self.up1.parameters() + self.up2.parameters()
        return params

    def _downsample(self, seq: Tensor) -> Tensor:
        if len(self.down) == 1:
            return self.down[0](seq)
        return self.down[1](gelu(self.down[0](seq)))

    def forward_adapted(self, text_embs, image_embs) -> tuple[Tensor, Tensor]:
        """Adapted (text, image) embeddings, shapes (P, B, C) and (B, C)."""
        text = ensure_tensor(text_embs)
        images = ensure_tensor(image_embs)
        seq = build_input_sequence(text, images)
        p = text.shape[0]
        b, c = images.shape
        mask = make_mask(p, 1)
        h = self._downsample(seq)
        h = self.mixer(h, mask)
        out = self.up2(gelu(self.up1(h)))
        adapted_text = narrow(out, 0, 0, p)
        adapted_image = reshape(narrow(out, 0, p, 1), (b, c))
        return adapted_text, adapted_image

    def logits(self, text_embs, image_embs) -> Tensor:
        adapted_text, adapted_image = self.forward_adapted(text_embs, image_embs)
        return blend_and_logits(text_embs, image_embs, adapted_text, adapted_image, self.config)

    def attention_probs(self, text_embs, image_embs) -> np.ndarray:
        """Attention weights of the mixing layer, shape (B, heads, T, T)."""
        text = ensure_tensor(text_embs)
        images = ensure_tensor(image_embs)
        seq = build_input_sequence(text, images)
        mask = make_mask(text.shape[0], 1)
        attn = self.mixer if isinstance(self.mixer, MaskedMultiHeadAttention) else self.mixer.attn
        return attn.attention_probs(self._downsample(seq), mask)


AdapterModel = IdentityClip | ClipAdapter | MultiModalAdapter


def build_adapter(kind: str, config: MMAConfig, seed: int) -> AdapterModel:
    if kind == "identity_clip":
        return IdentityClip(config, seed)
    if kind == "clip_adapter":
        return ClipAdapter(config, seed)
    if kind == "mma":
        return MultiModalAdapter(config, seed)
    raise ConfigError(f"unknown adapter kind {kind!r}; expected one of {ADAPTER_KINDS}")


def parameter_count(model: AdapterModel) -> int:
    """Total trainable scalars.

    Closed forms with d = C/down_factor, m = C/mid_factor, all layers
    biased:
      identity_clip:  0
      clip_adapter:   2 * [(C*d + d) + (d*C + C)]
      mma (mha, linear): (C*d + d) + 4*(d*d + d) + (d*m + m) + (m*C + C)
    The mlp downsampler adds (d*d + d); the transformer block adds the
    feed-forward 8*d*d + 5*d and 4*d of layer-norm affines.
    """
    return sum(p.tensor.data.size for p in model.parameters())


def parameter_names(model: AdapterModel) -> list[str]:
    return [p.name for p in model.parameters()]


# ---------------------------------------------------------------------------
# checkpoints: human-readable manifest + little-endian float64 blobs


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(model: AdapterModel, path) -> None:
    """Write manifest.json plus params.f64 (concatenated, manifest order)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "kind": model.kind,
        "config": model.config.to_dict(),
        "parameters": [
            {"name": p.name, "shape": list(p.tensor.shape)} for p in model.parameters()
        ],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    blob = b"".join(p.tensor.data.astype("<f8").tobytes(order="C") for p in model.parameters())
    (path / "params.f64").write_bytes(blob)


def load_checkpoint(path, seed: int = 0) -> AdapterModel:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = MMAConfig(**manifest["config"])
    model = build_adapter(manifest["kind"], config, seed)
    params = model.parameters()
    declared = manifest["parameters"]
    if [p.name for p in params] != [d["name"] for d in declared]:
        raise ConfigError("checkpoint manifest parameters do not match the rebuilt model")
    raw = (path / "params.f64").read_bytes()
    expected = sum(int(np.prod(d["shape"])) for d in declared) * 8
    if len(raw) != expected:
        raise ShapeError(
            f"checkpoint blob holds {len(raw)} bytes, manifest implies {expected}"
        )
    offset = 0
    for p, d in zip(params, declared):
        shape = tuple(d["shape"])
        n = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        p.tensor.data = values.astype(np.float64).copy()
        offset += n * 8
    return model
