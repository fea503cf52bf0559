"""Multi-resolution encoder: slice, encode, fuse, refine, blend.

A high-resolution image (side = scale * base_side) is cut into a scale x
scale grid of base-resolution tiles. Each tile runs through the frozen
vision encoder; patch tokens (CLS excluded) are averaged index-wise across
tiles, concatenated with the base image's own patch tokens, projected back
to the token width, and passed through one extra trainable transformer
layer. The refined CLS token, mapped through the backbone's own CLS head,
is blended with the plain embedding:

    out = (1 - alpha) * base + alpha * enriched

At init the projection passes the original tokens through untouched and
alpha is small, so the whole module starts as a near-no-op.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .backbone import BackboneHandle
from .errors import ShapeError, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MultiResConfig:
    base_side: int = 224
    scale: int = 2  # input side = scale * base_side; slice count = scale**2
    alpha_init: float = 0.01
    alpha_lr: float = 1e-4
    spatial_remap: bool = False  # pool slice patches onto the global grid instead of index-wise averaging

    def __post_init__(self):
        if self.scale < 2:
            raise ValidationError(f"scale must be >= 2, got {self.scale}")
        if not (0.0 <= self.alpha_init <= 1.0):
            raise ValidationError(f"alpha_init must lie in [0, 1], got {self.alpha_init}")

    @property
    def n_slices(self) -> int:
        return self.scale ** 2

    @property
    def input_side(self) -> int:
        return self.scale * self.base_side


def slice_image(img: torch.Tensor, cfg: MultiResConfig) -> list[torch.Tensor]:
    """Cut [3, s*base, s*base] pixels into s*s base-sized tiles, row-major."""
    if img.dim() != 3:
        raise ShapeError(f"expected a [3, H, W] tensor, got {tuple(img.shape)}")
    side = img.shape[-1]
    if img.shape[-2] != side:
        raise ShapeError(f"expected a square image, got {tuple(img.shape)}")
    if side % cfg.base_side != 0 or side // cfg.base_side != cfg.scale:
        raise ShapeError(
            f"side {side} is not scale({cfg.scale}) x base_side({cfg.base_side})")
    b = cfg.base_side
    return [
        img[:, r * b:(r + 1) * b, c * b:(c + 1) * b]
        for r in range(cfg.scale)
        for c in range(cfg.scale)
    ]


def reassemble_slices(slices: list[torch.Tensor], scale: int) -> torch.Tensor:
    """Inverse of slice_image for the same row-major order."""
    rows = [torch.cat(slices[r * scale:(r + 1) * scale], dim=-1) for r in range(scale)]
    return torch.cat(rows, dim=-2)


def average_slice_patches(maps: list[torch.Tensor]) -> torch.Tensor:
    """Index-wise mean of slice patch maps with CLS rows dropped: [(P-1), w]."""
    if not maps:
        raise ShapeError("no slice maps given")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ShapeError(f"slice map shapes differ: {tuple(m.shape)} vs {tuple(shape)}")
    stacked = torch.stack([m[1:] for m in maps])
    return stacked.mean(dim=0)


def remap_slice_patches(maps: list[torch.Tensor], scale: int) -> torch.Tensor:
    """Spatial variant: lay slice grids onto the global grid, then pool back.

    Slice i's g x g patch grid occupies one tile of the (s*g) x (s*g) global
    grid; average-pooling each s x s block returns a g x g grid aligned with
    the base image's patches. Output is [(P-1), w].
    """
    first = maps[0]
    n_patches = first.shape[0] - 1
    g = int(round(n_patches ** 0.5))
    if g * g != n_patches:
        raise ShapeError(f"patch count {n_patches} is not a square grid")
    if len(maps) != scale * scale:
        raise ShapeError(f"expected {scale * scale} slice maps, got {len(maps)}")
    w = first.shape[1]
    grid = torch.empty(scale * g, scale * g, w, dtype=first.dtype, device=first.device)
    for idx, m in enumerate(maps):
        r, c = divmod(idx, scale)
        grid[r * g:(r + 1) * g, c * g:(c + 1) * g] = m[1:].reshape(g, g, w)
    pooled = grid.reshape(g, scale, g, scale, w).permute(0, 2, 1, 3, 4).mean(dim=(2, 3))
    return pooled.reshape(g * g, w)


@dataclass
class FusedFeatureMap:
    """Projected tokens [P, w] plus where they came from."""

    tokens: torch.Tensor
    provenance: dict = field(default_factory=dict)


class ExtraLayerState(nn.Module):
    """Learnable additions: 2w->w projection, one ViT layer, blend weight."""

    def __init__(self, projection: nn.Linear, vit_layer: nn.Module, alpha_init: float,
                 position_embedding: torch.Tensor, scale: int, backbone_id: str,
                 add_position_embeddings: bool = False):
        super().__init__()
        self.projection = projection
        self.vit_layer = vit_layer
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))
        self.register_buffer("position_embedding", position_embedding.detach().clone())
        self.add_position_embeddings = add_position_embeddings
        self.scale = scale
        self.backbone_id = backbone_id
        self.step = 0
        self._cls_head = ()  # (post_layernorm, visual_projection); plain tuple keeps them out of our parameters

    def attach_cls_head(self, handle: BackboneHandle) -> None:
        self._cls_head = (handle.model.vision_model.post_layernorm, handle.model.visual_projection)

    def cls_head(self):
        if not self._cls_head:
            raise ValidationError("extra layer state is not attached to a backbone; call attach_cls_head")
        return self._cls_head

    def clamp_alpha(self) -> None:
        with torch.no_grad():
            self.alpha.clamp_(0.0, 1.0)

    def extras_parameters(self, include_alpha: bool = True):
        params = list(self.projection.parameters()) + list(self.vit_layer.parameters())
        if include_alpha:
            params.append(self.alpha)
        return params


def init_extra_layer(handle: BackboneHandle, cfg: MultiResConfig) -> ExtraLayerState:
    """Copy the final vision block and set the projection to pass-through.

    The projection's first block (the slice average) starts at zero and the
    second (the original tokens) at identity with zero bias, so the fused map
    initially equals the base patch map and, with the copied layer, the
    enriched CLS reproduces the base path up to the second application of the
    final block.
    """
    layers = handle.vision_layers()
    if not layers:
        raise ValidationError(f"{handle.identifier}: no vision blocks to copy for the extra layer")
    w = handle.vision_width
    vit_layer = copy.deepcopy(layers[-1])
    projection = nn.Linear(2 * w, w, bias=True)
    with torch.no_grad():
        projection.weight.zero_()
        projection.weight[:, w:] = torch.eye(w)
        projection.bias.zero_()
    pos = handle.model.vision_model.embeddings.position_embedding.weight
    state = ExtraLayerState(
        projection=projection, vit_layer=vit_layer, alpha_init=cfg.alpha_init,
        position_embedding=pos, scale=cfg.scale, backbone_id=handle.identifier)
    state.attach_cls_head(handle)
    return state


def concat_and_project(avg: torch.Tensor, origin: torch.Tensor, state: ExtraLayerState) -> FusedFeatureMap:
    """Pair averaged slice tokens with base tokens and project to width w.

    Patch position j >= 1 uses [avg_j ; origin_j]. The slice average has no
    CLS row, so the CLS position pairs the origin CLS with itself, keeping
    the projection uniform over all P positions.
    """
    if origin.dim() != 2 or avg.dim() != 2:
        raise ShapeError("expected 2-D token maps")
    p, w = origin.shape
    if avg.shape != (p - 1, w):
        raise ShapeError(f"avg map {tuple(avg.shape)} does not pair with origin {tuple(origin.shape)}")
    cls_pair = torch.cat([origin[0], origin[0]], dim=-1).unsqueeze(0)
    patch_pairs = torch.cat([avg, origin[1:]], dim=-1)
    fused = state.projection(torch.cat([cls_pair, patch_pairs], dim=0))
    return FusedFeatureMap(tokens=fused, provenance={"p": p, "width": w})


def extra_layer_forward(fused: FusedFeatureMap, state: ExtraLayerState) -> torch.Tensor:
    """Run the extra transformer layer and return the refined CLS embedding.

    The CLS token goes through the backbone's own post-layernorm and output
    projection so alpha blends like with like.
    """
    tokens = fused.tokens
    if tokens.dim() != 2:
        raise ShapeError(f"expected [P, w] tokens, got {tuple(tokens.shape)}")
    if state.add_position_embeddings:
        tokens = tokens + state.position_embedding[: tokens.shape[0]]
    out = state.vit_layer(tokens.unsqueeze(0), None)
    hidden = out[0] if isinstance(out, tuple) else out
    post_layernorm, visual_projection = state.cls_head()
    return visual_projection(post_layernorm(hidden[0, 0]))


def blend(base: torch.Tensor, enriched: torch.Tensor, alpha) -> torch.Tensor:
    """Convex combination (1 - alpha) * base + alpha * enriched."""
    if base.shape != enriched.shape:
        raise ShapeError(f"blend shapes differ: {tuple(base.shape)} vs {tuple(enriched.shape)}")
    return (1.0 - alpha) * base + alpha * enriched


def encode_multires(handle: BackboneHandle, state: ExtraLayerState, image, cfg: MultiResConfig,
                    *, alpha=None, grad: bool = False) -> torch.Tensor:
    """Full multi-resolution embedding of one image.

    ``image`` is a PIL image or a preprocessed [3, s*base, s*base] tensor.
    The base path sees the image downscaled to base_side; the enriched path
    sees the tiles. ``alpha=None`` reads the learnable weight from the state.
    """
    with torch.set_grad_enabled(grad):
        if isinstance(image, torch.Tensor):
            high = image
            if high.shape[-1] != cfg.input_side:
                raise ShapeError(f"expected side {cfg.input_side}, got {tuple(high.shape)}")
            base_px = torch.nn.functional.interpolate(
                high.unsqueeze(0), size=(cfg.base_side, cfg.base_side),
                mode="bicubic", align_corners=False, antialias=True)[0]
        else:
            high = handle.preprocess_at(image, cfg.input_side)
            base_px = handle.preprocess(image)

        slices = slice_image(high, cfg)
        slice_maps = handle.forward_patches(torch.stack(slices)) if grad else handle.patch_features(torch.stack(slices))
        maps = [slice_maps[i] for i in range(slice_maps.shape[0])]
        if cfg.spatial_remap:
            avg = remap_slice_patches(maps, cfg.scale)
        else:
            avg = average_slice_patches(maps)

        origin = handle.forward_patches(base_px.unsqueeze(0))[0] if grad else handle.patch_features(base_px)
        fused = concat_and_project(avg, origin, state)
        enriched = extra_layer_forward(fused, state)

        base = handle.forward_image(base_px.unsqueeze(0))[0] if grad else handle.encode_image(base_px)
        a = state.alpha if alpha is None else alpha
        return blend(base, enriched, a)


def save_extra_layer(state: ExtraLayerState, path: str | Path) -> Path:
    """Single binary checkpoint plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state.state_dict(), path)
    sidecar = {
        "backbone_id": state.backbone_id,
        "scale": state.scale,
        "alpha": float(state.alpha.detach()),
        "step": state.step,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return path


def load_extra_layer(path: str | Path, handle: BackboneHandle, cfg: MultiResConfig) -> ExtraLayerState:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    state = init_extra_layer(handle, cfg)
    state.load_state_dict(torch.load(path, weights_only=True))
    if sidecar_path.exists():
        sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
        state.step = int(sidecar.get("step", 0))
        if sidecar.get("backbone_id") not in (None, handle.identifier):
            logger.warning("extra layer was trained against %r but loaded onto %r",
                           sidecar.get("backbone_id"), handle.identifier)
    return state


def pretrain_extras(state: ExtraLayerState, handle: BackboneHandle, caption_corpus,
                    schedule, *, cfg: MultiResConfig | None = None,
                    out_dir: str | Path | None = None, log_every: int = 10) -> dict:
    """Contrastive warm-up of the extras on (image, caption) pairs.

    Everything in the backbone stays frozen; only the projection, the extra
    layer, and alpha get gradients (alpha at its own learning rate). Returns
    the loss curve and writes a checkpoint when out_dir is given.
    """
    from .training import contrastive_loss, make_optimizer

    cfg = cfg or MultiResConfig(base_side=handle.image_size, alpha_init=float(state.alpha.detach()))
    pairs = list(caption_corpus)
    if not pairs:
        raise ValidationError("caption corpus is empty")

    for p in handle.model.parameters():
        p.requires_grad_(False)
    for p in state.extras_parameters():
        p.requires_grad_(True)

    groups = [
        {"params": state.extras_parameters(include_alpha=False), "lr": schedule.lr},
        {"params": [state.alpha], "lr": cfg.alpha_lr},
    ]
    optimizer = make_optimizer(groups, schedule)
    gen = torch.Generator().manual_seed(schedule.seed)
    # CLIP stores log(1/T); recover the softmax temperature from the checkpoint.
    temperature = float(1.0 / torch.exp(handle.model.logit_scale.detach()))

    losses: list[float] = []
    for step in range(schedule.total_steps):
        idx = torch.randint(0, len(pairs), (schedule.batch_size,), generator=gen)
        batch = [pairs[i] for i in idx.tolist()]
        img_embs = torch.stack([
            encode_multires(handle, state, img, cfg, grad=True) for img, _ in batch
        ])
        with torch.no_grad():
            txt_embs = handle.encode_text([caption for _, caption in batch])
        img_embs = torch.nn.functional.normalize(img_embs, dim=-1)
        txt_embs = torch.nn.functional.normalize(txt_embs, dim=-1)
        loss = contrastive_loss(img_embs, txt_embs, temperature)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        state.clamp_alpha()
        state.step += 1
        losses.append(float(loss.detach()))
        if step % log_every == 0:
            logger.info("pretrain_extras step %d loss %.4f alpha %.4f", step, losses[-1], float(state.alpha))
        if not torch.isfinite(loss):
            raise ValidationError(f"pretraining diverged at step {step} (loss={losses[-1]})")

    result = {"losses": losses, "alpha": float(state.alpha.detach()), "steps": schedule.total_steps}
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = save_extra_layer(state, out_dir / "extras.pt")
        (out_dir / "pretrain_metrics.json").write_text(json.dumps(result) + "\n", encoding="utf-8")
        result["checkpoint"] = str(ckpt)
    return result
