"""Description generators: a remote LLM client and an offline fixture provider.

Both expose the same surface: ``describe_class(class_name, placeholder,
style, k) -> list[str]``. Raw prompts and responses are appended to a
JSON-lines audit log when one is configured.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Protocol

import httpx

from ..errors import GenerationError, ValidationError
from .store import ClassDescriptions, DescriptionFile, check_style

logger = logging.getLogger(__name__)

LLM_ENDPOINT_ENV = "REALDESC_LLM_ENDPOINT"
LLM_KEY_ENV = "REALDESC_LLM_KEY"


class TextGenerator(Protocol):
    def describe_class(self, class_name: str, placeholder: str, style: str, k: int) -> list[str]: ...


def load_prompt_template(style: str) -> str:
    check_style(style)
    ref = resources.files("realdesc.assets.prompts").joinpath(f"{style}.txt")
    return ref.read_text(encoding="utf-8")


def render_prompt(style: str, class_name: str, placeholder: str, k: int) -> str:
    return load_prompt_template(style).format(class_name=class_name, placeholder=placeholder, k=k)


class _AuditLog:
    def __init__(self, path: Optional[str | Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, **event) -> None:
        if not self.path:
            return
        event.setdefault("ts", time.time())
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(event, ensure_ascii=False) + "\n")


def _contains_name(sentence: str, class_name: str) -> bool:
    from .filtering import _span_pattern
    return bool(_span_pattern(class_name).search(sentence))


def _parse_sentences(text: str) -> list[str]:
    """One sentence per line; tolerate numbering and bullet prefixes."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        line = line.lstrip("-*• ").strip()
        head = line.split(".", 1)
        if head[0].isdigit() and len(head) == 2:
            line = head[1].strip()
        if line:
            out.append(line)
    return out


# ------------------------------------------------------------------ fixtures

_GENERIC_POOL = {
    "color": ["a mottled brown and gray coloration", "a pale cream coloration",
              "a dark charcoal coloration", "a warm reddish-brown coloration",
              "a muted olive coloration", "a two-tone light and dark coloration"],
    "texture": ["a smooth, even surface texture", "a coarse, rough surface texture",
                "a soft, fine surface texture", "a glossy, reflective surface"],
    "shape": ["a compact, rounded overall shape", "an elongated, slender outline",
              "a stocky, broad-bodied build", "a tapered, streamlined profile"],
    "detail": ["fine banding along its edges", "small pale spots scattered over it",
               "a darker shading toward the base", "lighter tips on its extremities"],
}

_COLUMBIA_TEMPLATES = (
    "A {name} has {attr}.",
    "The {name} shows {attr}.",
    "A {name} is recognizable by {attr}.",
    "The {name} features {attr}.",
)

_OXFORD_TEMPLATES = (
    "The {name} is a {placeholder} with {a1}, and it also shows {a2}.",
    "Seen as a whole, the {name} combines {a1} with {a2}.",
    "A typical {name} displays {a1}; close up, the {name} also has {a2}.",
    "The {name} is a {placeholder} whose look is defined by {a1} together with {a2}.",
)


class FixtureProvider:
    """Deterministic offline provider backed by a per-class attribute table.

    ``attributes`` maps class name -> list of short visual attribute phrases.
    Classes missing from the table get generic phrases chosen by a stable
    hash of the class name, so runs are reproducible without any service.
    """

    name = "fixtures"

    def __init__(self, attributes: Optional[dict[str, list[str]]] = None,
                 audit_log: Optional[str | Path] = None):
        self.attributes = dict(attributes or {})
        self.audit = _AuditLog(audit_log)

    def _phrases(self, class_name: str) -> list[str]:
        phrases = self.attributes.get(class_name)
        if phrases:
            return list(phrases)
        digest = int.from_bytes(hashlib.sha256(class_name.encode("utf-8")).digest()[:8], "big")
        picked = []
        for i, (kind, pool) in enumerate(sorted(_GENERIC_POOL.items())):
            picked.append(pool[(digest >> (8 * i)) % len(pool)])
        return picked

    def describe_class(self, class_name: str, placeholder: str, style: str, k: int) -> list[str]:
        check_style(style)
        phrases = self._phrases(class_name)
        sentences = []
        if style == "columbia":
            for i in range(k):
                attr = phrases[i % len(phrases)]
                tpl = _COLUMBIA_TEMPLATES[(i // len(phrases)) % len(_COLUMBIA_TEMPLATES)]
                sentences.append(tpl.format(name=class_name, attr=attr))
        else:
            for i in range(k):
                a1 = phrases[i % len(phrases)]
                a2 = phrases[(i + 1) % len(phrases)]
                tpl = _OXFORD_TEMPLATES[i % len(_OXFORD_TEMPLATES)]
                sentences.append(tpl.format(name=class_name, placeholder=placeholder, a1=a1, a2=a2))
        self.audit.record(provider=self.name, class_name=class_name, style=style, k=k,
                          prompt=render_prompt(style, class_name, placeholder, k),
                          response="\n".join(sentences))
        return sentences


# -------------------------------------------------------------------- remote

class RemoteLLMProvider:
    """OpenAI-style chat-completions client for description generation.

    Endpoint and key come from REALDESC_LLM_ENDPOINT / REALDESC_LLM_KEY
    unless passed explicitly. Retries with backoff; failures surface as
    GenerationError so callers can checkpoint partial progress.
    """

    name = "remote-llm"

    def __init__(self, endpoint: Optional[str] = None, api_key: Optional[str] = None,
                 model: str = "gpt-4", max_retries: int = 3, timeout: float = 60.0,
                 audit_log: Optional[str | Path] = None, transport: Optional[httpx.BaseTransport] = None):
        self.endpoint = endpoint or os.environ.get(LLM_ENDPOINT_ENV)
        self.api_key = api_key or os.environ.get(LLM_KEY_ENV)
        if not self.endpoint or not self.api_key:
            raise ValidationError(
                f"remote LLM provider needs an endpoint and key; set {LLM_ENDPOINT_ENV} and {LLM_KEY_ENV} "
                "or pass --provider fixtures for offline generation")
        self.model = model
        self.max_retries = max_retries
        self.audit = _AuditLog(audit_log)
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _complete(self, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.7,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_exc: Exception | None = None
        for attempt in range(1, self.max_retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=payload, headers=headers)
                resp.raise_for_status()
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
                self.audit.record(provider=self.name, prompt=prompt, response=text, attempt=attempt)
                return text
            except (httpx.HTTPError, KeyError, ValueError) as exc:
                last_exc = exc
                logger.warning("LLM request failed (attempt %d/%d): %s", attempt, self.max_retries, exc)
                time.sleep(min(2.0 ** attempt, 8.0) * 0.01 if attempt < self.max_retries else 0)
        raise GenerationError(f"LLM request failed after {self.max_retries} attempts: {last_exc}")

    def describe_class(self, class_name: str, placeholder: str, style: str, k: int) -> list[str]:
        prompt = render_prompt(style, class_name, placeholder, k)
        return _parse_sentences(self._complete(prompt))


# ----------------------------------------------------------------- pipeline

def generate_descriptions(classes: Iterable[str], style: str, k: int, provider: TextGenerator,
                          placeholders: dict[str, str] | str = "object",
                          dataset: str = "custom",
                          checkpoint_path: Optional[str | Path] = None) -> DescriptionFile:
    """Generate k sentences per class, each mentioning the class name.

    ``placeholders`` is a per-class map or a single super-category used for
    every class. Classes yielding fewer than k usable sentences (a usable
    sentence mentions the class name) are padded by re-query and logged. On
    provider failure the partial file is checkpointed before the error
    propagates.
    """
    check_style(style)
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")

    def placeholder_for(name: str) -> str:
        if isinstance(placeholders, str):
            return placeholders
        return placeholders.get(name, "object")

    out = DescriptionFile(
        metadata={
            "dataset": dataset,
            "style": style,
            "generator": getattr(provider, "name", type(provider).__name__),
            "k": k,
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        },
        classes={},
    )
    try:
        for name in classes:
            ph = placeholder_for(name)
            usable: list[str] = []
            for attempt in range(3):
                for s in provider.describe_class(name, ph, style, k):
                    if _contains_name(s, name) and s not in usable:
                        usable.append(s)
                if len(usable) >= k:
                    break
                logger.warning("%r produced %d/%d usable sentences; re-querying", name, len(usable), k)
            if not usable:
                raise GenerationError(f"no usable sentences for class {name!r}")
            if len(usable) < k:
                logger.warning("%r: padding %d usable sentences to k=%d by repetition", name, len(usable), k)
                base = list(usable)
                while len(usable) < k:
                    usable.append(base[(len(usable) - len(base)) % len(base)])
            out.classes[name] = ClassDescriptions(
                class_name=name, placeholder=ph, style=style, sentences=usable[:k])
    except GenerationError:
        if checkpoint_path is not None and out.classes:
            out.metadata["partial"] = True
            out.save(checkpoint_path)
            logger.error("generation failed; %d classes checkpointed to %s", len(out.classes), checkpoint_path)
        raise
    return out
