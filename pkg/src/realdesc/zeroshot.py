"""Prototype construction and cosine-argmax classification.

A class prototype is the mean text embedding of its description sentences.
Three evaluation modes select which sentences feed the prototype: the bare
"a photo of a {class}." template (only_name), sentences that mention the
class name (with_name), or their name-free counterparts (no_name).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneHandle
from .cache import EmbeddingCache, content_key
from .descriptions import DescriptionFile
from .errors import DataError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

EVAL_MODES = ("only_name", "with_name", "no_name")
ONLY_NAME_TEMPLATE = "a photo of a {}."


def check_mode(mode: str) -> str:
    if mode not in EVAL_MODES:
        raise ValidationError(f"unknown eval mode {mode!r}; expected one of {EVAL_MODES}")
    return mode


@dataclass
class PrototypeIndex:
    """Per-class mean text embeddings, rows L2-normalized."""

    classes: list[str]
    prototypes: np.ndarray  # [n_classes, e_d]
    mode: str
    k_per_class: dict[str, int]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] != len(self.classes):
            raise ShapeError(f"prototypes {self.prototypes.shape} do not match {len(self.classes)} classes")
        if not np.isfinite(self.prototypes).all():
            raise ValidationError("prototype matrix contains non-finite entries")

    @property
    def embed_dim(self) -> int:
        return self.prototypes.shape[1]

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        if path.suffix != ".npz":
            path = path.with_suffix(".npz")
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            path,
            prototypes=self.prototypes,
            classes=np.array(self.classes, dtype=object),
            mode=np.array(self.mode),
            k_per_class=np.array(json.dumps(self.k_per_class)),
            meta=np.array(json.dumps(self.meta)),
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeIndex":
        blob = np.load(path, allow_pickle=True)
        return cls(
            classes=[str(c) for c in blob["classes"]],
            prototypes=np.asarray(blob["prototypes"], dtype=np.float32),
            mode=str(blob["mode"]),
            k_per_class=json.loads(str(blob["k_per_class"])),
            meta=json.loads(str(blob["meta"])),
        )


def _normalize_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    return mat / norms


def mode_sentences(file: DescriptionFile, class_name: str, mode: str) -> list[str]:
    if mode == "only_name":
        return [ONLY_NAME_TEMPLATE.format(class_name)]
    return file.sentences_for(class_name, name_free=(mode == "no_name"))


def build_prototypes(file: DescriptionFile, mode: str, handle: BackboneHandle, *,
                     normalize_before_mean: bool = True,
                     cache_dir: str | Path | None = None) -> PrototypeIndex:
    """Embed each class's mode-appropriate sentences and average them.

    Sentence embeddings are L2-normalized before averaging by default
    (prompt-ensembling practice; set normalize_before_mean=False for the raw
    mean). The final row is always normalized, which leaves cosine argmax
    unchanged. When cache_dir is set the index is persisted keyed by
    (file hash, mode, checkpoint, normalization flag).
    """
    check_mode(mode)
    cache_path = None
    if cache_dir is not None:
        key = content_key(file.content_hash(), mode, handle.identifier, str(normalize_before_mean))
        cache_path = Path(cache_dir) / f"prototypes_{key[:16]}.npz"
        if cache_path.exists():
            logger.info("prototype index cache hit: %s", cache_path)
            return PrototypeIndex.load(cache_path)

    rows = []
    k_per_class: dict[str, int] = {}
    for name in file.class_names:
        sentences = mode_sentences(file, name, mode)
        if not sentences:
            raise ValidationError(f"class {name!r} has no sentences for mode {mode!r}")
        embs = handle.encode_text(sentences)  # [k, e_d]
        embs = embs.detach().cpu().numpy().astype(np.float32)
        if normalize_before_mean:
            embs = _normalize_rows(embs)
        rows.append(embs.mean(axis=0))
        k_per_class[name] = len(sentences)

    prototypes = _normalize_rows(np.stack(rows))
    index = PrototypeIndex(
        classes=file.class_names, prototypes=prototypes, mode=mode, k_per_class=k_per_class,
        meta={
            "checkpoint": handle.identifier,
            "description_hash": file.content_hash(),
            "normalize_before_mean": normalize_before_mean,
            "style": file.style,
        },
    )
    if cache_path is not None:
        index.save(cache_path)
        logger.info("prototype index cached: %s", cache_path)
    return index


def classify(img_embedding, index: PrototypeIndex) -> tuple[str, np.ndarray]:
    """Cosine-argmax prediction; ties break to the lowest class index."""
    emb = np.asarray(
        img_embedding.detach().cpu().numpy() if isinstance(img_embedding, torch.Tensor) else img_embedding,
        dtype=np.float32,
    )
    if emb.ndim != 1 or emb.shape[0] != index.embed_dim:
        raise ShapeError(f"embedding shape {emb.shape} does not match index dim {index.embed_dim}")
    emb = emb / max(float(np.linalg.norm(emb)), 1e-12)
    scores = index.prototypes @ emb
    pred = int(np.argmax(scores))  # first maximum -> lowest class index on ties
    return index.classes[pred], scores


@dataclass
class ClassificationReport:
    top1: float
    top5: float
    per_class_accuracy: dict[str, float]
    confusion_topline: list[dict]
    n_images: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.top1 <= self.top5 <= 1.0):
            raise ValidationError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    def to_dict(self) -> dict:
        return {
            "top1": self.top1, "top5": self.top5, "n_images": self.n_images,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion_topline": self.confusion_topline, "meta": self.meta,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path


def embed_image_batch(handle: BackboneHandle, images: list, cache: EmbeddingCache | None = None) -> np.ndarray:
    """Preprocess (if needed) and embed a list of PIL images or pixel tensors."""
    pixel_list = []
    for img in images:
        px = img if isinstance(img, torch.Tensor) else handle.preprocess(img)
        pixel_list.append(px)
    batch = torch.stack(pixel_list)
    if cache is not None:
        out = np.empty((len(pixel_list), handle.embed_dim), dtype=np.float32)
        misses, miss_rows = [], []
        for i, px in enumerate(pixel_list):
            key = content_key(handle.identifier, "image", px.numpy().tobytes())
            hit = cache.get(key)
            if hit is None:
                misses.append(key)
                miss_rows.append(i)
            else:
                out[i] = hit
        if miss_rows:
            embs = handle.encode_image(batch[miss_rows]).detach().cpu().numpy().astype(np.float32)
            for key, row, emb in zip(misses, miss_rows, embs):
                cache.put(key, emb)
                out[row] = emb
        return out
    return handle.encode_image(batch).detach().cpu().numpy().astype(np.float32)


def evaluate_dataset(dataset, index: PrototypeIndex, handle: BackboneHandle, *,
                     batch_size: int = 64, cache: EmbeddingCache | None = None,
                     encode_fn=None) -> ClassificationReport:
    """Top-1/top-5 over a labeled image source whose labels live in the index.

    ``encode_fn(images) -> [n, e_d]`` overrides the stock embedding path (the
    multi-resolution encoder plugs in here).
    """
    dataset_classes = list(dataset.classes)
    unknown = [c for c in dataset_classes if c not in index.classes]
    if unknown:
        raise DataError(f"{len(unknown)} dataset labels missing from the index: {unknown[:5]}")
    row_of = {name: i for i, name in enumerate(index.classes)}
    label_to_row = np.array([row_of[c] for c in dataset_classes])

    n_images = 0
    top1_hits = 0
    top5_hits = 0
    k5 = min(5, len(index.classes))
    per_class_total: dict[str, int] = {}
    per_class_hit: dict[str, int] = {}
    confusion: dict[tuple[str, str], int] = {}

    batch_imgs: list = []
    batch_labels: list[int] = []

    def flush():
        nonlocal n_images, top1_hits, top5_hits
        if not batch_imgs:
            return
        if encode_fn is not None:
            embs = np.asarray(encode_fn(batch_imgs), dtype=np.float32)
        else:
            embs = embed_image_batch(handle, batch_imgs, cache)
        embs = _normalize_rows(embs)
        scores = embs @ index.prototypes.T  # [b, n_classes]
        top_idx = np.argsort(-scores, axis=1, kind="stable")[:, :k5]
        for row, label in enumerate(batch_labels):
            true_row = label_to_row[label]
            true_name = dataset_classes[label]
            pred_row = int(top_idx[row, 0])
            n_images += 1
            per_class_total[true_name] = per_class_total.get(true_name, 0) + 1
            if pred_row == true_row:
                top1_hits += 1
                per_class_hit[true_name] = per_class_hit.get(true_name, 0) + 1
            else:
                pair = (true_name, index.classes[pred_row])
                confusion[pair] = confusion.get(pair, 0) + 1
            if true_row in top_idx[row]:
                top5_hits += 1
        batch_imgs.clear()
        batch_labels.clear()

    for img, label in dataset:
        batch_imgs.append(img)
        batch_labels.append(int(label))
        if len(batch_imgs) >= batch_size:
            flush()
    flush()

    if n_images == 0:
        raise DataError("dataset yielded no images")

    per_class = {
        name: per_class_hit.get(name, 0) / total for name, total in sorted(per_class_total.items())
    }
    topline = [
        {"true": t, "pred": p, "count": c}
        for (t, p), c in sorted(confusion.items(), key=lambda kv: -kv[1])[:10]
    ]
    return ClassificationReport(
        top1=top1_hits / n_images, top5=top5_hits / n_images,
        per_class_accuracy=per_class, confusion_topline=topline, n_images=n_images,
        meta={"mode": index.mode, "checkpoint": handle.identifier, "n_classes": len(index.classes)},
    )


@dataclass
class GapReport:
    only_name: float
    with_name: float
    no_name: float
    n_images: int
    meta: dict = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.with_name - self.no_name

    def to_dict(self) -> dict:
        return {"only_name": self.only_name, "with_name": self.with_name,
                "no_name": self.no_name, "gap": self.gap, "n_images": self.n_images, "meta": self.meta}


def compare_modes(dataset, file: DescriptionFile, handle: BackboneHandle, *,
                  batch_size: int = 64, cache: EmbeddingCache | None = None) -> GapReport:
    """Accuracy in all three modes plus the with-name minus no-name gap."""
    results = {}
    n_images = 0
    for mode in EVAL_MODES:
        index = build_prototypes(file, mode, handle)
        report = evaluate_dataset(dataset, index, handle, batch_size=batch_size, cache=cache)
        results[mode] = report.top1
        n_images = report.n_images
    return GapReport(
        only_name=results["only_name"], with_name=results["with_name"], no_name=results["no_name"],
        n_images=n_images, meta={"checkpoint": handle.identifier, "style": file.style},
    )
