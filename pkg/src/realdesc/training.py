"""Attribute-description fine-tuning: corpus curation, unique-class batching,
the symmetric contrastive objective, and the optimization loop.

Batches never repeat a class, so the contrastive loss sees no false
negatives from duplicated captions or images. One epoch samples every class
once per round, one random pair per class.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .backbone import BackboneHandle, FreezePolicy
from .descriptions import DescriptionFile
from .errors import CurationError, ShapeError, TrainingDivergence, ValidationError

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "adamw")
LR_GRID = (1e-5, 5e-6, 1e-6)  # the sweep the reference experiments ran
MAX_LOGIT_SCALE = math.log(100.0)


@dataclass(frozen=True)
class ScheduleSpec:
    lr: float = 1e-5
    optimizer: str = "adamw"
    weight_decay: float = 0.1
    batch_size: int = 64
    warmup_steps: int = 10_000
    total_steps: int = 100_000
    decay: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.decay not in ("cosine", "none"):
            raise ValidationError(f"decay must be 'cosine' or 'none', got {self.decay!r}")
        if self.warmup_steps > self.total_steps:
            raise ValidationError(
                f"warmup_steps ({self.warmup_steps}) exceeds total_steps ({self.total_steps})")
        if self.batch_size < 2:
            raise ValidationError("contrastive training needs batch_size >= 2")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("lr", "optimizer", "weight_decay", "batch_size", "warmup_steps",
                 "total_steps", "decay", "seed")}


def make_optimizer(param_groups, schedule: ScheduleSpec) -> torch.optim.Optimizer:
    if schedule.optimizer == "adam":
        return torch.optim.Adam(param_groups, lr=schedule.lr)
    return torch.optim.AdamW(param_groups, lr=schedule.lr, weight_decay=schedule.weight_decay)


def make_lr_scheduler(optimizer, schedule: ScheduleSpec):
    """Linear warmup then cosine annealing to zero (or flat after warmup)."""

    def factor(step: int) -> float:
        if schedule.warmup_steps > 0 and step < schedule.warmup_steps:
            return (step + 1) / schedule.warmup_steps
        if schedule.decay == "none" or schedule.total_steps <= schedule.warmup_steps:
            return 1.0
        progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


# ------------------------------------------------------------------ curation

@dataclass(frozen=True)
class CurationSpec:
    n_classes: int
    k_images: int = 50
    n_sentences: int = 10
    excluded_classes: frozenset = frozenset()
    include_classes: Optional[tuple] = None  # explicit class list overrides sampling
    style: str = "oxford"
    name_free: bool = True
    seed: int = 0

    @property
    def pairs_per_class(self) -> int:
        return self.k_images * self.n_sentences


@dataclass
class TrainingPair:
    image_ref: str
    text: str
    class_id: int
    class_name: str

    def to_dict(self) -> dict:
        return {"image_ref": self.image_ref, "text": self.text,
                "class_id": self.class_id, "class_name": self.class_name}


@dataclass
class Manifest:
    pairs: list[TrainingPair]
    classes: list[str]
    distribution: dict[str, int] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for pair in self.pairs:
                fh.write(json.dumps(pair.to_dict(), ensure_ascii=False) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Manifest":
        pairs = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    pairs.append(TrainingPair(**json.loads(line)))
        classes_by_id: dict[int, str] = {}
        for p in pairs:
            classes_by_id[p.class_id] = p.class_name
        classes = [classes_by_id[i] for i in sorted(classes_by_id)]
        return cls(pairs=pairs, classes=classes)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for pair in self.pairs:
            h.update(json.dumps(pair.to_dict(), sort_keys=True).encode("utf-8"))
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self.pairs)


def curate(spec: CurationSpec, descriptions: DescriptionFile, images) -> Manifest:
    """Build the image-text pair manifest for fine-tuning.

    ``images`` exposes ``classes`` and ``images_for(name) -> list[ref]``.
    Explicitly included classes that overlap the exclusion set raise a
    CurationError; during automatic sampling, excluded classes are dropped
    from the pool. Classes with fewer than k images contribute everything
    they have, with a warning. Deterministic under spec.seed.
    """
    excluded = {c.lower() for c in spec.excluded_classes}
    available = [c for c in images.classes if c in descriptions.classes]
    missing_desc = [c for c in images.classes if c not in descriptions.classes]
    if missing_desc:
        logger.warning("%d image classes lack descriptions and are skipped (e.g. %r)",
                       len(missing_desc), missing_desc[0])

    if spec.include_classes is not None:
        offenders = [c for c in spec.include_classes if c.lower() in excluded]
        if offenders:
            raise CurationError(f"requested classes overlap the benchmark exclusion list: {offenders}")
        unknown = [c for c in spec.include_classes if c not in available]
        if unknown:
            raise CurationError(f"requested classes lack images or descriptions: {unknown[:5]}")
        selected = list(spec.include_classes)[: spec.n_classes]
    else:
        pool = [c for c in available if c.lower() not in excluded]
        dropped = len(available) - len(pool)
        if dropped:
            logger.info("dropped %d excluded benchmark classes from the curation pool", dropped)
        if spec.n_classes > len(pool):
            raise CurationError(f"asked for {spec.n_classes} classes but only {len(pool)} are eligible")
        rng = np.random.default_rng(spec.seed)
        order = rng.permutation(len(pool))
        selected = [pool[i] for i in order[: spec.n_classes]]

    rng = np.random.default_rng(spec.seed + 1)
    pairs: list[TrainingPair] = []
    distribution: dict[str, int] = {}
    for class_id, name in enumerate(selected):
        refs = list(images.images_for(name))
        if len(refs) < spec.k_images:
            logger.warning("%r has %d images (< %d); taking all", name, len(refs), spec.k_images)
            chosen_refs = refs
        else:
            idx = rng.choice(len(refs), size=spec.k_images, replace=False)
            chosen_refs = [refs[i] for i in sorted(idx)]
        sentences = descriptions.sentences_for(name, name_free=spec.name_free)
        if len(sentences) < spec.n_sentences:
            logger.warning("%r has %d sentences (< %d); taking all", name, len(sentences), spec.n_sentences)
            chosen_sentences = sentences
        else:
            chosen_sentences = sentences[: spec.n_sentences]
        for ref in chosen_refs:
            for text in chosen_sentences:
                pairs.append(TrainingPair(image_ref=ref, text=text, class_id=class_id, class_name=name))
        placeholder = descriptions.classes[name].placeholder
        distribution[placeholder] = distribution.get(placeholder, 0) + 1

    return Manifest(
        pairs=pairs, classes=selected, distribution=distribution,
        meta={"n_classes": len(selected), "k_images": spec.k_images,
              "n_sentences": spec.n_sentences, "seed": spec.seed,
              "name_free": spec.name_free, "style": spec.style},
    )


# ------------------------------------------------------------------ batching

def unique_class_batches(manifest: Manifest, batch_size: int, seed: int,
                         rounds: Optional[int] = None) -> Iterator[list[TrainingPair]]:
    """Stream batches whose pairs all come from distinct classes.

    Each round permutes the classes, draws one random pair per class, and
    chunks the permutation into full batches (an incomplete tail is dropped;
    fresh permutations keep long-run class frequencies uniform). One round
    is one epoch. ``rounds=None`` streams forever.
    """
    by_class: dict[int, list[TrainingPair]] = {}
    for pair in manifest.pairs:
        by_class.setdefault(pair.class_id, []).append(pair)
    class_ids = sorted(by_class)
    if batch_size > len(class_ids):
        raise ValidationError(
            f"batch_size {batch_size} exceeds the {len(class_ids)} classes in the manifest")

    rng = np.random.default_rng(seed)
    round_idx = 0
    while rounds is None or round_idx < rounds:
        order = rng.permutation(class_ids)
        for start in range(0, len(order) - batch_size + 1, batch_size):
            batch = []
            for cid in order[start:start + batch_size]:
                pool = by_class[cid]
                batch.append(pool[int(rng.integers(len(pool)))])
            yield batch
        round_idx += 1


# ---------------------------------------------------------------------- loss

def contrastive_loss(image_embeds: torch.Tensor, text_embeds: torch.Tensor, temperature) -> torch.Tensor:
    """Symmetric cross-entropy over the pairwise similarity matrix.

    Row i of both matrices is the same pair and rows are L2-normalized.
    Logits are similarities divided by the temperature; the loss averages the
    image->text and text->image directions and is ln(n) when all
    similarities coincide.
    """
    if image_embeds.ndim != 2 or text_embeds.ndim != 2 or image_embeds.shape != text_embeds.shape:
        raise ShapeError(
            f"paired embeddings must share [n, d]: {tuple(image_embeds.shape)} vs {tuple(text_embeds.shape)}")
    n = image_embeds.shape[0]
    if n < 2:
        raise ValidationError("contrastive loss is undefined for a single pair")
    logits = (image_embeds @ text_embeds.T) / temperature
    targets = torch.arange(n, device=logits.device)
    loss_i2t = torch.nn.functional.cross_entropy(logits, targets)
    loss_t2i = torch.nn.functional.cross_entropy(logits.T, targets)
    return 0.5 * (loss_i2t + loss_t2i)


# ------------------------------------------------------------------ training

def finetune(handle: BackboneHandle, extras, manifest: Manifest, schedule: ScheduleSpec,
             freeze: FreezePolicy, *, image_loader, out_dir: str | Path,
             multires_cfg=None, log_every: int = 10, checkpoint_every: Optional[int] = None) -> dict:
    """Contrastive fine-tuning under a freeze policy; persists a run directory.

    ``image_loader(ref)`` resolves manifest refs to PIL images. When
    ``extras`` (an ExtraLayerState) is given, images go through the
    multi-resolution encoder and alpha trains at its own learning rate.
    Writes config.json, manifest.jsonl, metrics.csv and checkpoints/; aborts
    with a diagnostic snapshot if the loss goes non-finite.
    """
    from .multires import MultiResConfig, encode_multires, save_extra_layer

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(schedule.seed)

    freeze_report = handle.apply_freeze_policy(freeze)
    param_groups = [{"params": handle.trainable_parameters(), "lr": schedule.lr}]
    cfg = multires_cfg
    if extras is not None:
        cfg = cfg or MultiResConfig(base_side=handle.image_size)
        extras.attach_cls_head(handle)
        for p in extras.extras_parameters():
            p.requires_grad_(freeze.extras_trainable)
        if freeze.extras_trainable:
            param_groups.append({"params": extras.extras_parameters(include_alpha=False), "lr": schedule.lr})
            param_groups.append({"params": [extras.alpha], "lr": cfg.alpha_lr})
    param_groups = [g for g in param_groups if g["params"]]
    if not param_groups:
        raise ValidationError("freeze policy left nothing to optimize")
    optimizer = make_optimizer(param_groups, schedule)
    lr_scheduler = make_lr_scheduler(optimizer, schedule)

    config_snapshot = {
        "checkpoint": handle.identifier,
        "schedule": schedule.to_dict(),
        "freeze": {"text_encoder_trainable": freeze.text_encoder_trainable,
                   "image_trainable_layers": freeze.image_trainable_layers,
                   "extras_trainable": freeze.extras_trainable},
        "freeze_report": freeze_report,
        "multires": None if cfg is None else {
            "base_side": cfg.base_side, "scale": cfg.scale,
            "alpha_init": cfg.alpha_init, "alpha_lr": cfg.alpha_lr},
        "manifest_hash": manifest.content_hash(),
        "n_pairs": len(manifest),
    }
    (out_dir / "config.json").write_text(json.dumps(config_snapshot, indent=2) + "\n", encoding="utf-8")
    manifest.save(out_dir / "manifest.jsonl")

    batches = unique_class_batches(manifest, schedule.batch_size, schedule.seed)
    losses: list[float] = []
    metrics_path = out_dir / "metrics.csv"
    with metrics_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "alpha"])

        handle.model.train()
        for step in range(schedule.total_steps):
            batch = next(batches)
            texts = [p.text for p in batch]
            if extras is not None:
                img_embs = torch.stack([
                    encode_multires(handle, extras, image_loader(p.image_ref), cfg, grad=True)
                    for p in batch
                ])
            else:
                pixels = torch.stack([handle.preprocess(image_loader(p.image_ref)) for p in batch])
                img_embs = handle.forward_image(pixels)
            txt_embs = handle.forward_text_batch(texts)
            img_embs = torch.nn.functional.normalize(img_embs, dim=-1)
            txt_embs = torch.nn.functional.normalize(txt_embs, dim=-1)
            temperature = 1.0 / handle.model.logit_scale.exp()
            loss = contrastive_loss(img_embs, txt_embs, temperature)

            if not torch.isfinite(loss):
                diag = out_dir / f"diagnostic_step_{step}"
                diag.mkdir(parents=True, exist_ok=True)
                (diag / "batch.json").write_text(
                    json.dumps([p.to_dict() for p in batch], indent=2), encoding="utf-8")
                torch.save(handle.model.state_dict(), diag / "model_state.pt")
                raise TrainingDivergence(f"non-finite loss at step {step}; snapshot in {diag}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            lr_scheduler.step()
            with torch.no_grad():
                handle.model.logit_scale.clamp_(max=MAX_LOGIT_SCALE)
            if extras is not None and freeze.extras_trainable:
                extras.clamp_alpha()
                extras.step += 1

            losses.append(float(loss.detach()))
            alpha_val = float(extras.alpha.detach()) if extras is not None else ""
            writer.writerow([step, f"{losses[-1]:.6f}", f"{lr_scheduler.get_last_lr()[0]:.8g}", alpha_val])
            if step % log_every == 0:
                logger.info("step %d loss %.4f", step, losses[-1])
            if checkpoint_every and (step + 1) % checkpoint_every == 0:
                ckpt_dir = out_dir / "checkpoints" / f"step_{step + 1}"
                handle.model.save_pretrained(ckpt_dir)

    handle.model.eval()
    final_dir = out_dir / "checkpoints" / "final"
    handle.model.save_pretrained(final_dir)
    if hasattr(handle.tokenizer, "save_pretrained"):
        handle.tokenizer.save_pretrained(final_dir)
    if hasattr(handle.image_processor, "save_pretrained"):
        handle.image_processor.save_pretrained(final_dir)
    if extras is not None:
        save_extra_layer(extras, out_dir / "checkpoints" / "extras.pt")

    return {
        "out_dir": str(out_dir),
        "losses": losses,
        "steps": schedule.total_steps,
        "final_checkpoint": str(final_dir),
        "config": config_snapshot,
    }


def smoothed(losses: list[float], window: int = 50) -> list[float]:
    """Moving average used for loss-decrease checks."""
    if not losses:
        return []
    out = []
    acc = 0.0
    for i, v in enumerate(losses):
        acc += v
        if i >= window:
            acc -= losses[i - window]
        out.append(acc / min(i + 1, window))
    return out
