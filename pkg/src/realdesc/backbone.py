"""Thin adapter over a pretrained contrastive vision-text model.

Wraps a Hugging Face CLIP checkpoint and exposes the handful of surfaces the
rest of the toolkit needs: image/text embeddings, patch-level feature maps,
preprocessing read from checkpoint metadata, and per-layer trainability
control. Inference calls are read-only and safe to share across workers;
training mutates the handle and needs exclusive access.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import torch

from .errors import IntegrityError, RegistryError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

MODEL_CACHE_ENV = "REALDESC_MODEL_CACHE"
MAX_TEXT_TOKENS = 77

# Metadata for checkpoints the toolkit is routinely run against. Loading is
# not limited to these; the table lets callers validate dimensions and lets
# the CLI print useful hints without touching the network.
KNOWN_CHECKPOINTS = {
    "openai/clip-vit-base-patch32": {"embed_dim": 512, "patch_size": 32, "image_size": 224, "vision_width": 768},
    "openai/clip-vit-base-patch16": {"embed_dim": 512, "patch_size": 16, "image_size": 224, "vision_width": 768},
    "openai/clip-vit-large-patch14": {"embed_dim": 768, "patch_size": 14, "image_size": 224, "vision_width": 1024},
}


@dataclass(frozen=True)
class FreezePolicy:
    """Which parameter groups receive gradients during training.

    ``image_trainable_layers`` is ``"none"``, ``"all"``, or an int meaning
    the last-k vision blocks. ``extras_trainable`` covers the multi-res
    additions (projection + extra layer + alpha), which live outside the
    backbone and are applied by the trainer.
    """

    text_encoder_trainable: bool = False
    image_trainable_layers: Union[str, int] = "none"
    extras_trainable: bool = False

    def validate(self, n_vision_layers: int) -> None:
        sel = self.image_trainable_layers
        if isinstance(sel, bool):
            raise ValidationError("image_trainable_layers must be 'none', 'all', or an int, not a bool")
        if isinstance(sel, int):
            if sel < 1:
                raise ValidationError(f"last_k selector must be >= 1, got {sel}")
            if sel > n_vision_layers:
                raise ValidationError(f"last_k({sel}) exceeds the {n_vision_layers} vision layers available")
        elif sel not in ("none", "all"):
            raise ValidationError(f"unknown image layer selector {sel!r}")
        nothing_trainable = (
            not self.text_encoder_trainable and sel == "none" and not self.extras_trainable
        )
        if nothing_trainable:
            raise ValidationError("freeze policy leaves no parameter group trainable")


@dataclass
class BackboneHandle:
    """A loaded checkpoint plus the metadata needed to use it correctly."""

    identifier: str
    model: "torch.nn.Module"
    tokenizer: object
    image_processor: object
    embed_dim: int
    patch_size: int
    image_size: int
    vision_width: int
    n_vision_layers: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_patches(self) -> int:
        """Token count P = 1 + (side / patch)^2, CLS included."""
        return 1 + (self.image_size // self.patch_size) ** 2

    # ---------------------------------------------------------------- text

    def tokenize(self, text: str) -> list[int]:
        """Token ids with begin/end sentinels, untruncated."""
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("encode_text requires a non-empty string")
        return self.tokenizer(text, add_special_tokens=True, truncation=False)["input_ids"]

    def truncate_tokens(self, ids: list[int]) -> list[int]:
        """Clamp to the 77-token budget, keeping the end sentinel."""
        if len(ids) <= MAX_TEXT_TOKENS:
            return list(ids)
        eos = self.tokenizer.eos_token_id
        return list(ids[: MAX_TEXT_TOKENS - 1]) + [eos]

    @torch.no_grad()
    def encode_tokens(self, ids: list[int]) -> torch.Tensor:
        """Embed one already-tokenized sequence (no truncation applied)."""
        if len(ids) > MAX_TEXT_TOKENS:
            raise ValidationError(f"token sequence of length {len(ids)} exceeds the {MAX_TEXT_TOKENS} cap")
        was_training = self.model.training
        self.model.eval()
        try:
            input_ids = torch.tensor([ids], dtype=torch.long)
            out = self.model.text_model(input_ids=input_ids)
            emb = self.model.text_projection(out.pooler_output)
            return emb[0]
        finally:
            if was_training:
                self.model.train()

    def encode_text(self, text: Union[str, list[str]]) -> torch.Tensor:
        """Embed text into the shared space; over-long inputs are truncated."""
        if isinstance(text, list):
            return torch.stack([self.encode_text(t) for t in text])
        ids = self.tokenize(text)
        if len(ids) > MAX_TEXT_TOKENS:
            logger.warning(
                "truncating text of %d tokens to the %d-token budget: %r",
                len(ids), MAX_TEXT_TOKENS, text[:60] + ("..." if len(text) > 60 else ""),
            )
            ids = self.truncate_tokens(ids)
        return self.encode_tokens(ids)

    # --------------------------------------------------------------- image

    def preprocess(self, image) -> torch.Tensor:
        """PIL image (or HWC array) -> normalized [3, S, S] tensor per checkpoint metadata."""
        out = self.image_processor(images=image, return_tensors="pt")
        return out["pixel_values"][0]

    def preprocess_at(self, image, side: int) -> torch.Tensor:
        """Preprocess with the checkpoint's normalization at a non-native side.

        Used by the multi-resolution path, which slices an s*base image into
        base-sized tiles before encoding.
        """
        out = self.image_processor(
            images=image, return_tensors="pt",
            size={"shortest_edge": side}, crop_size={"height": side, "width": side})
        return out["pixel_values"][0]

    def _check_resolution(self, pixels: torch.Tensor) -> None:
        h, w = int(pixels.shape[-2]), int(pixels.shape[-1])
        if h != w:
            raise ShapeError(f"expected a square image, got {h}x{w}")
        if h != self.image_size:
            raise ShapeError(f"expected side {self.image_size}, got {h} (slice or resize upstream)")

    @torch.no_grad()
    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        """Embed preprocessed pixels; accepts [3,S,S] or a [B,3,S,S] batch."""
        single = pixels.dim() == 3
        batch = pixels.unsqueeze(0) if single else pixels
        self._check_resolution(batch)
        was_training = self.model.training
        self.model.eval()
        try:
            out = self.model.vision_model(pixel_values=batch)
            emb = self.model.visual_projection(out.pooler_output)
            return emb[0] if single else emb
        finally:
            if was_training:
                self.model.train()

    @torch.no_grad()
    def patch_features(self, pixels: torch.Tensor) -> torch.Tensor:
        """Per-token feature map [P, width] (or [B, P, width]); row 0 is CLS.

        Returns the last transformer layer's hidden states before pooling and
        before the output projection, as recorded in metadata under
        ``patch_feature_space``.
        """
        single = pixels.dim() == 3
        batch = pixels.unsqueeze(0) if single else pixels
        self._check_resolution(batch)
        was_training = self.model.training
        self.model.eval()
        try:
            out = self.model.vision_model(pixel_values=batch)
            feats = out.last_hidden_state
            return feats[0] if single else feats
        finally:
            if was_training:
                self.model.train()

    def project_cls(self, cls_token: torch.Tensor) -> torch.Tensor:
        """Map a raw CLS hidden state through the backbone's own CLS head."""
        pooled = self.model.vision_model.post_layernorm(cls_token)
        return self.model.visual_projection(pooled)

    # Gradient-transparent forwards for training loops. The encode_* methods
    # above are inference surfaces and run under no_grad.

    def forward_image(self, pixels: torch.Tensor) -> torch.Tensor:
        """[B,3,S,S] -> [B,e_d] with gradients flowing."""
        self._check_resolution(pixels)
        out = self.model.vision_model(pixel_values=pixels)
        return self.model.visual_projection(out.pooler_output)

    def forward_patches(self, pixels: torch.Tensor) -> torch.Tensor:
        """[B,3,S,S] -> [B,P,width] with gradients flowing."""
        self._check_resolution(pixels)
        return self.model.vision_model(pixel_values=pixels).last_hidden_state

    def forward_text_batch(self, texts: list[str]) -> torch.Tensor:
        """Tokenize, truncate to the cap, pad, and embed with gradients."""
        enc = self.tokenizer(
            texts, padding=True, truncation=True, max_length=MAX_TEXT_TOKENS, return_tensors="pt")
        out = self.model.text_model(input_ids=enc["input_ids"], attention_mask=enc["attention_mask"])
        return self.model.text_projection(out.pooler_output)

    # ------------------------------------------------------------ training

    def vision_layers(self) -> list[torch.nn.Module]:
        return list(self.model.vision_model.encoder.layers)

    def apply_freeze_policy(self, policy: FreezePolicy) -> dict[str, int]:
        """Set requires_grad per the policy; returns trainable counts per group."""
        policy.validate(self.n_vision_layers)
        for p in self.model.parameters():
            p.requires_grad_(False)

        report = {"text_encoder": 0, "vision_layers": 0, "logit_scale": 0}
        if policy.text_encoder_trainable:
            for mod in (self.model.text_model, self.model.text_projection):
                for p in mod.parameters():
                    p.requires_grad_(True)
                    report["text_encoder"] += p.numel()
            # The temperature trains with the contrastive objective whenever
            # the text side does, matching the pre-training recipe.
            self.model.logit_scale.requires_grad_(True)
            report["logit_scale"] = self.model.logit_scale.numel()

        sel = policy.image_trainable_layers
        layers = self.vision_layers()
        chosen: list[torch.nn.Module] = []
        if sel == "all":
            chosen = layers
        elif isinstance(sel, int):
            chosen = layers[-sel:]
        for layer in chosen:
            for p in layer.parameters():
                p.requires_grad_(True)
                report["vision_layers"] += p.numel()

        report["extras_requested"] = int(policy.extras_trainable)
        logger.info("freeze policy applied to %s: %s", self.identifier, report)
        return report

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for p in self.model.parameters() if p.requires_grad]


def _model_cache_dir() -> str | None:
    return os.environ.get(MODEL_CACHE_ENV) or None


def load_checkpoint(identifier: str, cache_dir: str | None = None) -> BackboneHandle:
    """Load a CLIP checkpoint by registry name or local path, in eval mode.

    Remote identifiers are cached under ``REALDESC_MODEL_CACHE`` (or the
    explicit ``cache_dir``). Raises RegistryError for unresolvable names and
    IntegrityError for checkpoints that exist but fail to load.
    """
    from transformers import AutoImageProcessor, AutoTokenizer, CLIPModel

    cache_dir = cache_dir or _model_cache_dir()
    is_local = Path(identifier).is_dir()
    if not is_local and "/" not in identifier:
        raise RegistryError(f"unknown checkpoint identifier {identifier!r}: not a local directory "
                            f"and not a <org>/<name> registry id")
    kwargs = {} if is_local else {"cache_dir": cache_dir}
    try:
        model = CLIPModel.from_pretrained(identifier, **kwargs)
        tokenizer = AutoTokenizer.from_pretrained(identifier, **kwargs)
        image_processor = AutoImageProcessor.from_pretrained(identifier, **kwargs)
    except (OSError, EnvironmentError, ValueError) as exc:
        if is_local:
            raise IntegrityError(f"checkpoint at {identifier!r} is incomplete or corrupted: {exc}") from exc
        raise RegistryError(f"could not resolve checkpoint {identifier!r} from the registry "
                            f"(cache_dir={cache_dir}): {exc}") from exc
    except Exception as exc:  # safetensors and friends raise library-specific errors
        raise IntegrityError(f"failed to load weights for {identifier!r}: {exc}") from exc

    model.eval()
    vcfg = model.config.vision_config
    handle = BackboneHandle(
        identifier=identifier,
        model=model,
        tokenizer=tokenizer,
        image_processor=image_processor,
        embed_dim=model.config.projection_dim,
        patch_size=vcfg.patch_size,
        image_size=vcfg.image_size,
        vision_width=vcfg.hidden_size,
        n_vision_layers=vcfg.num_hidden_layers,
        metadata={
            "patch_feature_space": "pre_projection_hidden",
            "preprocessing": getattr(image_processor, "to_dict", dict)(),
            "text_token_cap": MAX_TEXT_TOKENS,
        },
    )
    known = KNOWN_CHECKPOINTS.get(identifier)
    if known and known["embed_dim"] != handle.embed_dim:
        raise IntegrityError(
            f"{identifier}: expected embed_dim {known['embed_dim']}, loaded {handle.embed_dim}")
    logger.info("loaded %s: e_d=%d patch=%d side=%d width=%d layers=%d",
                identifier, handle.embed_dim, handle.patch_size, handle.image_size,
                handle.vision_width, handle.n_vision_layers)
    return handle
