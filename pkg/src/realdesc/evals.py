"""Part-attribute evaluation protocols.

Two probes of attribute understanding:

* the PACO protocol scores attribute values of object parts against the
  full value vocabulary of each attribute type ("The rim of the bowl has
  black color"), either filtering multi-valued records or scoring top-k
  over their decomposed values;
* the contrastive probe pits one validated positive sentence against five
  minimally contrasting negatives (chance = 1/6).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .errors import DataError, ValidationError

logger = logging.getLogger(__name__)

ATTRIBUTE_TYPES = ("material", "color", "pattern_marking", "reflectance")

# Surface phrasing per attribute type; "pattern_marking" renders as "pattern"
# for fluency. Versioned with the package assets.
ATTRIBUTE_TYPE_PHRASES = {
    "material": "material",
    "color": "color",
    "pattern_marking": "pattern",
    "reflectance": "reflectance",
}

PACO_PROTOCOLS = ("filter_multival", "topk_decompose")

# Minimum part-mask area (pixels) for a record to count; parts only a few
# pixels wide carry no usable appearance signal.
MIN_PART_AREA = 32 * 32

PROBE_KINDS = ("color", "shape", "size")
PROBE_VALUE_VOCAB = {
    "color": ("red", "green", "blue", "yellow", "orange", "purple", "brown", "black", "white", "gray"),
    "shape": ("rounded", "pointed", "curved", "straight", "hooked", "forked", "flat", "slender"),
    "size": ("tiny", "small", "medium-sized", "large", "huge", "elongated"),
}


class ImageTextScorer(Protocol):
    """similarities(image, sentences) -> one score per sentence."""

    def __call__(self, image, sentences: Sequence[str]) -> Sequence[float]: ...


def build_clip_scorer(handle, image_loader: Optional[Callable] = None) -> ImageTextScorer:
    """Cosine-similarity scorer over a backbone handle.

    ``image`` may be a PIL image, a preprocessed tensor, or (when
    image_loader is given) any ref the loader resolves.
    """
    import torch

    def scorer(image, sentences: Sequence[str]) -> np.ndarray:
        if image_loader is not None and isinstance(image, str):
            image = image_loader(image)
        pixels = image if isinstance(image, torch.Tensor) else handle.preprocess(image)
        img = handle.encode_image(pixels)
        txt = handle.encode_text(list(sentences))
        img = img / img.norm()
        txt = txt / txt.norm(dim=-1, keepdim=True)
        return (txt @ img).detach().cpu().numpy()

    return scorer


# ---------------------------------------------------------------------- PACO

@dataclass
class PacoRecord:
    image_ref: str
    object_name: str
    part: str
    attribute_type: str
    positive_values: tuple
    candidate_values: tuple

    def __post_init__(self):
        if self.attribute_type not in ATTRIBUTE_TYPES:
            raise ValidationError(
                f"attribute_type {self.attribute_type!r} not in {ATTRIBUTE_TYPES}")
        self.positive_values = tuple(self.positive_values)
        self.candidate_values = tuple(self.candidate_values)
        if not self.positive_values:
            raise ValidationError("a record needs at least one positive value")
        missing = [v for v in self.positive_values if v not in self.candidate_values]
        if missing:
            raise ValidationError(f"positives outside the candidate vocabulary: {missing}")

    @property
    def k(self) -> int:
        return len(self.positive_values)

    def to_dict(self) -> dict:
        return {"image_ref": self.image_ref, "object": self.object_name, "part": self.part,
                "attribute_type": self.attribute_type,
                "positive_values": list(self.positive_values),
                "candidate_values": list(self.candidate_values)}

    @classmethod
    def from_dict(cls, d: dict) -> "PacoRecord":
        return cls(image_ref=d["image_ref"], object_name=d["object"], part=d["part"],
                   attribute_type=d["attribute_type"],
                   positive_values=tuple(d["positive_values"]),
                   candidate_values=tuple(d["candidate_values"]))


def save_paco_records(records: Sequence[PacoRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    return path


def load_paco_records(path: str | Path) -> list[PacoRecord]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(PacoRecord.from_dict(json.loads(line)))
    return records


def paco_prompt(record: PacoRecord, value: str) -> str:
    """Render one candidate sentence, e.g. "The rim of the bowl has black color"."""
    if value not in record.candidate_values:
        raise ValidationError(
            f"value {value!r} is not in the {record.attribute_type} vocabulary for this record")
    phrase = ATTRIBUTE_TYPE_PHRASES[record.attribute_type]
    return f"The {record.part} of the {record.object_name} has {value} {phrase}"


def paco_predict(image, record: PacoRecord, scorer: ImageTextScorer) -> list[str]:
    """Top-k candidate values by similarity, k = number of positives.

    Ties break toward the earlier value in the record's vocabulary order.
    """
    sentences = [paco_prompt(record, v) for v in record.candidate_values]
    scores = np.asarray(scorer(image, sentences), dtype=np.float64)
    if scores.shape != (len(record.candidate_values),):
        raise ValidationError(f"scorer returned {scores.shape}, expected one score per candidate")
    k = min(record.k, len(record.candidate_values))
    top = np.argsort(-scores, kind="stable")[:k]
    return [record.candidate_values[i] for i in top]


@dataclass
class PacoReport:
    protocol: str
    overall: float
    per_type: dict[str, float]
    n_records: int
    n_skipped: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "overall": self.overall, "per_type": self.per_type,
                "n_records": self.n_records, "n_skipped": self.n_skipped, "meta": self.meta}

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["protocol", "attribute_type", "accuracy", "n_records"])
            for t, acc in self.per_type.items():
                writer.writerow([self.protocol, t, f"{acc:.4f}", self.meta.get("n_per_type", {}).get(t, "")])
            writer.writerow([self.protocol, "overall", f"{self.overall:.4f}", self.n_records])
        return path


def paco_evaluate(records: Sequence[PacoRecord], scorer: ImageTextScorer,
                  protocol: str = "filter_multival") -> PacoReport:
    """Mean accuracy over (image, part, attribute_type) instances.

    filter_multival drops records with several positives and scores exact
    top-1 match; topk_decompose keeps them and scores set precision of the
    top-k prediction against the positives. On k=1 records the two coincide.
    """
    if protocol not in PACO_PROTOCOLS:
        raise ValidationError(f"protocol must be one of {PACO_PROTOCOLS}, got {protocol!r}")
    records = list(records)
    if not records:
        raise ValidationError("no PACO records to evaluate")

    scores_by_type: dict[str, list[float]] = {}
    n_skipped = 0
    for record in records:
        if protocol == "filter_multival" and record.k > 1:
            n_skipped += 1
            continue
        predicted = paco_predict(record.image_ref, record, scorer)
        if protocol == "filter_multival":
            value = 1.0 if predicted[0] == record.positive_values[0] else 0.0
        else:
            hits = len(set(predicted) & set(record.positive_values))
            value = hits / record.k
        scores_by_type.setdefault(record.attribute_type, []).append(value)

    if not scores_by_type:
        raise ValidationError("all records were filtered out; nothing to score")
    all_scores = [v for vs in scores_by_type.values() for v in vs]
    per_type = {t: float(np.mean(vs)) for t, vs in sorted(scores_by_type.items())}
    return PacoReport(
        protocol=protocol, overall=float(np.mean(all_scores)), per_type=per_type,
        n_records=len(all_scores), n_skipped=n_skipped,
        meta={"n_per_type": {t: len(vs) for t, vs in sorted(scores_by_type.items())}},
    )


def load_paco_annotations(path: str | Path, *, min_part_area: int = MIN_PART_AREA) -> list[PacoRecord]:
    """Ingest the dataset's standard JSON into per-instance records.

    Expects LVIS-style keys: images (id, file_name), categories (id, name;
    part categories named "object:part" or carrying a supercategory),
    attributes (id, name, optionally type or a "type:value" name), and
    annotations (image_id, category_id, attribute_ids, area). Multi-valued
    positives like "blue, green" decompose into separate positive values;
    parts below min_part_area are dropped.
    """
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("images", "annotations", "categories", "attributes"):
        if key not in payload:
            raise DataError(f"PACO json missing {key!r}")

    images = {img["id"]: img.get("file_name", str(img["id"])) for img in payload["images"]}

    def split_category(cat: dict) -> tuple[str, str]:
        name = cat["name"]
        if ":" in name:
            obj, part = name.split(":", 1)
            return obj.strip("() "), part.strip("() ")
        return cat.get("supercategory", "object"), name

    categories = {c["id"]: split_category(c) for c in payload["categories"]}

    def split_attribute(attr: dict) -> tuple[str, str] | None:
        name = attr["name"]
        atype = attr.get("type")
        if atype is None and ":" in name:
            atype, name = name.split(":", 1)
        if atype is None:
            return None
        atype = atype.strip().replace("-", "_")
        if atype not in ATTRIBUTE_TYPES:
            return None
        return atype, name.strip()

    attr_by_id: dict[int, tuple[str, str]] = {}
    vocab_by_type: dict[str, list[str]] = {t: [] for t in ATTRIBUTE_TYPES}
    for attr in payload["attributes"]:
        parsed = split_attribute(attr)
        if parsed is None:
            continue
        atype, raw = parsed
        attr_by_id[attr["id"]] = (atype, raw)
        for piece in (p.strip() for p in raw.split(",")):
            if piece and piece not in vocab_by_type[atype]:
                vocab_by_type[atype].append(piece)

    records: list[PacoRecord] = []
    dropped_small = 0
    for ann in payload["annotations"]:
        if ann.get("area", min_part_area) < min_part_area:
            dropped_small += 1
            continue
        cat = categories.get(ann["category_id"])
        if cat is None or ann["category_id"] not in categories:
            continue
        obj, part = cat
        by_type: dict[str, list[str]] = {}
        for aid in ann.get("attribute_ids", []):
            if aid in attr_by_id:
                atype, raw = attr_by_id[aid]
                for piece in (p.strip() for p in raw.split(",")):
                    if piece:
                        by_type.setdefault(atype, []).append(piece)
        for atype, positives in by_type.items():
            uniq = tuple(dict.fromkeys(positives))
            records.append(PacoRecord(
                image_ref=str(images.get(ann["image_id"], ann["image_id"])),
                object_name=obj, part=part, attribute_type=atype,
                positive_values=uniq, candidate_values=tuple(vocab_by_type[atype])))
    if dropped_small:
        logger.info("dropped %d annotations with part area below %d px", dropped_small, min_part_area)
    return records


# --------------------------------------------------------------------- probe

@dataclass
class ProbeRecord:
    class_name: str
    element: str
    attribute_kind: str
    positive: str
    negatives: tuple
    image_refs: tuple = ()

    def __post_init__(self):
        if self.attribute_kind not in PROBE_KINDS:
            raise ValidationError(f"attribute_kind {self.attribute_kind!r} not in {PROBE_KINDS}")
        self.negatives = tuple(self.negatives)
        self.image_refs = tuple(self.image_refs)
        if len(self.negatives) != 5:
            raise ValidationError(
                f"{self.class_name}/{self.element}: need exactly 5 negatives, got {len(self.negatives)}")
        if self.positive in self.negatives:
            raise ValidationError(f"{self.class_name}/{self.element}: positive duplicated in negatives")

    @property
    def candidates(self) -> tuple:
        return (self.positive,) + self.negatives

    def to_dict(self) -> dict:
        return {"class_name": self.class_name, "element": self.element,
                "attribute_kind": self.attribute_kind, "positive": self.positive,
                "negatives": list(self.negatives), "image_refs": list(self.image_refs)}

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeRecord":
        return cls(class_name=d["class_name"], element=d["element"],
                   attribute_kind=d["attribute_kind"], positive=d["positive"],
                   negatives=tuple(d["negatives"]), image_refs=tuple(d.get("image_refs", ())))


def save_probe_records(records: Sequence[ProbeRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    return path


def load_probe_records(path: str | Path) -> list[ProbeRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(ProbeRecord.from_dict(json.loads(line)))
    return out


@dataclass
class ProbeReport:
    rows: list[dict]  # {kind, element, accuracy, n_images}
    per_kind_average: dict[str, float]
    overall: float
    n_images: int

    def to_dict(self) -> dict:
        return {"rows": self.rows, "per_kind_average": self.per_kind_average,
                "overall": self.overall, "n_images": self.n_images}

    def save_csv(self, path: str | Path) -> Path:
        """Type/Element/Accuracy rows with per-type Average lines."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["type", "element", "accuracy", "n_images"])
            for kind in sorted({r["kind"] for r in self.rows}):
                kind_rows = [r for r in self.rows if r["kind"] == kind]
                for r in kind_rows:
                    writer.writerow([kind, r["element"], f"{r['accuracy']:.4f}", r["n_images"]])
                writer.writerow([kind, "Average", f"{self.per_kind_average[kind]:.4f}",
                                 sum(r["n_images"] for r in kind_rows)])
        return path


def probe_evaluate(records: Sequence[ProbeRecord], scorer: ImageTextScorer) -> ProbeReport:
    """Accuracy of picking the positive out of six candidates, per (kind, element).

    The positive counts as recognized only when it scores strictly highest;
    ties are failures.
    """
    records = list(records)
    if not records:
        raise ValidationError("no probe records to evaluate")
    by_cell: dict[tuple[str, str], list[float]] = {}
    n_images = 0
    for record in records:
        refs = record.image_refs or (record.class_name,)
        for ref in refs:
            scores = np.asarray(scorer(ref, list(record.candidates)), dtype=np.float64)
            if scores.shape != (6,):
                raise ValidationError(f"scorer returned {scores.shape}, expected 6 scores")
            recognized = bool(scores[0] > np.max(scores[1:]))
            by_cell.setdefault((record.attribute_kind, record.element), []).append(float(recognized))
            n_images += 1

    rows = [
        {"kind": kind, "element": element, "accuracy": float(np.mean(vals)), "n_images": len(vals)}
        for (kind, element), vals in sorted(by_cell.items())
    ]
    per_kind: dict[str, float] = {}
    for kind in sorted({k for k, _ in by_cell}):
        cell_accs = [np.mean(vals) for (k, _), vals in by_cell.items() if k == kind]
        per_kind[kind] = float(np.mean(cell_accs))
    overall = float(np.mean([r["accuracy"] for r in rows]))
    return ProbeReport(rows=rows, per_kind_average=per_kind, overall=overall, n_images=n_images)


class AttributeProposer(Protocol):
    """Suggests (element, kind, value) attribute candidates for a class."""

    def propose_attributes(self, class_name: str) -> list[dict]: ...


class AttributeValidator(Protocol):
    def validate(self, class_name: str, element: str, kind: str, value: str) -> bool: ...


def generate_probe_records(classes: Sequence[str], provider: AttributeProposer,
                           validator: AttributeValidator, *,
                           placeholders: dict[str, str] | str = "object",
                           image_refs: Optional[dict[str, Sequence[str]]] = None,
                           seed: int = 0,
                           audit_log: Optional[str | Path] = None) -> list[ProbeRecord]:
    """Build validated positive/negative sextuples for each class.

    Positives that fail validation drop the record with a warning. Negatives
    are five distinct same-kind values different from the positive, drawn
    deterministically from the kind vocabulary; duplicates regenerate until
    exactly five remain.
    """
    rng = np.random.default_rng(seed)
    audit_path = Path(audit_log) if audit_log else None
    if audit_path:
        audit_path.parent.mkdir(parents=True, exist_ok=True)

    def log(event: dict) -> None:
        if audit_path:
            with audit_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, ensure_ascii=False) + "\n")

    def placeholder_for(name: str) -> str:
        if isinstance(placeholders, str):
            return placeholders
        return placeholders.get(name, "object")

    records: list[ProbeRecord] = []
    for name in classes:
        proposals = provider.propose_attributes(name)
        log({"class": name, "proposals": proposals})
        kept = 0
        for prop in proposals:
            element, kind, value = prop["element"], prop["kind"], prop["value"]
            if kind not in PROBE_KINDS:
                logger.warning("%r: skipping unknown attribute kind %r", name, kind)
                continue
            if not validator.validate(name, element, kind, value):
                logger.warning("%r: positive %s/%s=%r failed validation; record dropped",
                               name, element, kind, value)
                log({"class": name, "dropped": prop})
                continue
            ph = placeholder_for(name)
            template = "A {ph} with {value} {element}"
            positive = template.format(ph=ph, value=value, element=element)
            pool = [v for v in PROBE_VALUE_VOCAB[kind] if v != value]
            order = rng.permutation(len(pool))
            negatives: list[str] = []
            for i in order:
                cand = template.format(ph=ph, value=pool[int(i)], element=element)
                if cand != positive and cand not in negatives:
                    negatives.append(cand)
                if len(negatives) == 5:
                    break
            if len(negatives) < 5:
                logger.warning("%r: could not build 5 distinct negatives for %s/%s", name, element, kind)
                continue
            refs = tuple((image_refs or {}).get(name, ()))
            records.append(ProbeRecord(
                class_name=name, element=element, attribute_kind=kind,
                positive=positive, negatives=tuple(negatives), image_refs=refs))
            kept += 1
        if kept == 0:
            logger.warning("%r: no validated attributes; zero records emitted", name)
    return records
