"""Per-class description sets and their on-disk JSON format.

Wire format (UTF-8 JSON):

    {
      "metadata": {"dataset": str, "style": str, "generator": str, "timestamp": str},
      "classes": {
        "<class name>": {
          "placeholder": str,
          "sentences": [str, ...],
          "name_free_sentences": [str, ...]   # empty until filtering
        }
      }
    }
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import ValidationError

STYLES = ("oxford", "columbia")


def check_style(style: str) -> str:
    if style not in STYLES:
        raise ValidationError(f"unknown description style {style!r}; expected one of {STYLES}")
    return style


@dataclass
class ClassDescriptions:
    """Sentences describing one class, plus their name-free counterparts."""

    class_name: str
    placeholder: str
    style: str
    sentences: list[str]
    name_free_sentences: list[str] = field(default_factory=list)

    def __post_init__(self):
        check_style(self.style)
        if not self.class_name:
            raise ValidationError("class_name must be non-empty")
        if not self.placeholder:
            raise ValidationError(f"{self.class_name}: placeholder must be non-empty")
        if len(self.sentences) < 1:
            raise ValidationError(f"{self.class_name}: need at least one sentence")
        if self.name_free_sentences and len(self.name_free_sentences) != len(self.sentences):
            raise ValidationError(
                f"{self.class_name}: {len(self.name_free_sentences)} name-free sentences "
                f"for {len(self.sentences)} sentences")

    @property
    def filtered(self) -> bool:
        return len(self.name_free_sentences) == len(self.sentences)


@dataclass
class DescriptionFile:
    """An ordered class -> descriptions mapping with provenance metadata."""

    metadata: dict
    classes: dict[str, ClassDescriptions]

    @property
    def style(self) -> str:
        return self.metadata.get("style", "oxford")

    @property
    def class_names(self) -> list[str]:
        return list(self.classes.keys())

    def sentences_for(self, class_name: str, *, name_free: bool) -> list[str]:
        cd = self.classes[class_name]
        if name_free:
            if not cd.filtered:
                raise ValidationError(f"{class_name}: name-free sentences not populated; run strip_names first")
            return cd.name_free_sentences
        return cd.sentences

    def to_dict(self) -> dict:
        return {
            "metadata": dict(self.metadata),
            "classes": {
                name: {
                    "placeholder": cd.placeholder,
                    "sentences": list(cd.sentences),
                    "name_free_sentences": list(cd.name_free_sentences),
                }
                for name, cd in self.classes.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DescriptionFile":
        metadata = dict(payload.get("metadata", {}))
        style = check_style(metadata.get("style", "oxford"))
        classes = {}
        for name, entry in payload.get("classes", {}).items():
            classes[name] = ClassDescriptions(
                class_name=name,
                placeholder=entry["placeholder"],
                style=style,
                sentences=list(entry["sentences"]),
                name_free_sentences=list(entry.get("name_free_sentences", [])),
            )
        return cls(metadata=metadata, classes=classes)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DescriptionFile":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(payload)

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self.classes)
