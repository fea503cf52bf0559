"""Class-name removal: variant enumeration, replacement, and certification.

The deterministic replacement pass always runs, even when an LLM rewriter is
configured, so certification never depends on a remote service. Matching is
case-insensitive with alphanumeric boundaries ("cardinal" never fires inside
"cardinality") and treats space/hyphen/underscore between name words as
interchangeable.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Protocol

from ..errors import ValidationError
from .store import DescriptionFile

logger = logging.getLogger(__name__)

_SEPARATORS = ("-", "_", " ")
_SIBILANT_ENDINGS = ("s", "x", "z", "ch", "sh")


class SentenceRewriter(Protocol):
    """Optional LLM pass that replaces name mentions with the placeholder."""

    def rewrite(self, class_name: str, sentence: str, placeholder: str) -> str: ...


def _split_words(name: str) -> list[str]:
    return [w for w in re.split(r"[\s_\-]+", name.strip()) if w]


def _pluralize(span: str) -> list[str]:
    last = _split_words(span)[-1].lower()
    forms = [span + "s"]
    if last.endswith(_SIBILANT_ENDINGS):
        forms.append(span + "es")
    return forms


def base_name_variants(class_name: str) -> list[str]:
    """All spellings of a class name the filter must catch.

    Covers case variants, separator swaps, naive plurals, every contiguous
    multi-word sub-span, and the final head word (fine-grained names leak
    identity through the species word alone). Deduplicated, insertion order.
    """
    words = _split_words(class_name)
    if not words:
        return []

    spans: list[list[str]] = []
    n = len(words)
    for length in range(n, 1, -1):
        for start in range(0, n - length + 1):
            spans.append(words[start:start + length])
    spans.append([words[-1]])
    if n == 1:
        spans = [[words[0]]]

    out: list[str] = []
    seen: set[str] = set()

    def add(form: str) -> None:
        if form and form not in seen:
            seen.add(form)
            out.append(form)

    add(class_name.strip())
    for span in spans:
        for sep in _SEPARATORS:
            base = sep.join(span)
            for styled in (base, base.lower(), base.title()):
                add(styled)
                for plural in _pluralize(styled):
                    add(plural)
    return out


def _span_pattern(variant: str) -> re.Pattern:
    """Compile a whole-word, separator-flexible pattern for one variant."""
    words = _split_words(variant)
    body = r"[\s_\-]+".join(re.escape(w) for w in words)
    return re.compile(rf"(?<![A-Za-z0-9]){body}(?![A-Za-z0-9])", re.IGNORECASE)


def _match_patterns(class_name: str, skip_placeholder: str | None = None) -> list[re.Pattern]:
    """One pattern per distinct word-span (case and separators are folded).

    ``skip_placeholder`` drops variants identical to the placeholder itself:
    for a class like "passion flower" filtered to placeholder "flower", the
    surviving word is by design and carries no identity.
    """
    skip: set[str] = set()
    if skip_placeholder:
        ph = " ".join(_split_words(skip_placeholder)).lower()
        skip = {ph} | {p.lower() for p in _pluralize(ph)}
    seen: set[str] = set()
    patterns = []
    for variant in base_name_variants(class_name):
        key = " ".join(_split_words(variant)).lower()
        if key in seen or key in skip:
            continue
        seen.add(key)
        patterns.append(_span_pattern(variant))
    # Longest spans first so "rhinoceros auklet" wins over "auklet".
    patterns.sort(key=lambda p: -len(p.pattern))
    return patterns


def _collapse_placeholders(text: str, placeholder: str) -> str:
    ph = re.escape(placeholder)
    text = re.sub(rf"(?<![A-Za-z0-9])(?:{ph})(?:\s+{ph})+(?![A-Za-z0-9])", placeholder, text, flags=re.IGNORECASE)
    text = re.sub(r"[ \t]{2,}", " ", text)
    text = re.sub(r"\s+([.,;:!?])", r"\1", text)
    return text.strip()


def filter_name(class_name: str, description: str, placeholder: str,
                rewriter: Optional[SentenceRewriter] = None) -> str:
    """Replace every occurrence of the class name with the placeholder.

    Optional first pass asks a rewriter (LLM) to do the substitution; the
    deterministic variant-replacement pass then runs unconditionally and is
    authoritative. Plural variants map to the bare placeholder and adjacent
    duplicate placeholders are collapsed.
    """
    if not placeholder:
        raise ValidationError("placeholder must be non-empty")
    text = description
    if rewriter is not None:
        try:
            text = rewriter.rewrite(class_name, text, placeholder)
        except Exception as exc:
            logger.warning("rewriter failed for %r (%s); deterministic pass still applies", class_name, exc)
            text = description
    for pattern in _match_patterns(class_name):
        text = pattern.sub(placeholder, text)
    return _collapse_placeholders(text, placeholder)


def strip_names(file: DescriptionFile, rewriter: Optional[SentenceRewriter] = None) -> DescriptionFile:
    """Populate name_free_sentences for every class, in place."""
    for cd in file.classes.values():
        cd.name_free_sentences = [
            filter_name(cd.class_name, s, cd.placeholder, rewriter) for s in cd.sentences
        ]
    file.metadata["name_free"] = True
    return file


@dataclass
class VerificationReport:
    """Residual name hits found in name-free sentences."""

    residuals: list[dict] = field(default_factory=list)
    cross_class_hits: list[dict] = field(default_factory=list)
    n_classes: int = 0
    n_sentences: int = 0

    @property
    def certified(self) -> bool:
        return not self.residuals

    def summary(self) -> str:
        status = "CERTIFIED name-free" if self.certified else f"{len(self.residuals)} residual hit(s)"
        extra = f", {len(self.cross_class_hits)} cross-class mention(s) (informational)" if self.cross_class_hits else ""
        return f"{self.n_classes} classes / {self.n_sentences} sentences: {status}{extra}"


def verify_name_free(file: DescriptionFile) -> VerificationReport:
    """Scan every name-free sentence for residual class-name variants.

    An empty residual list certifies the file. Sentences mentioning a
    *different* class's name are flagged informationally and do not fail
    certification.
    """
    unfiltered = [name for name, cd in file.classes.items() if not cd.filtered]
    if unfiltered:
        raise ValidationError(
            f"{len(unfiltered)} classes lack name-free sentences (e.g. {unfiltered[0]!r}); run strip_names first")

    report = VerificationReport(n_classes=len(file.classes))
    own_patterns = {
        name: _match_patterns(name, skip_placeholder=cd.placeholder)
        for name, cd in file.classes.items()
    }
    full_name_patterns = {name: _span_pattern(name) for name in file.classes}

    for name, cd in file.classes.items():
        for idx, sentence in enumerate(cd.name_free_sentences):
            report.n_sentences += 1
            for pattern in own_patterns[name]:
                hit = pattern.search(sentence)
                if hit:
                    report.residuals.append(
                        {"class": name, "sentence_index": idx, "sentence": sentence, "variant": hit.group(0)})
            for other, pattern in full_name_patterns.items():
                if other == name or len(_split_words(other)) < 2 and other.lower() == cd.placeholder.lower():
                    continue
                if pattern.search(sentence):
                    report.cross_class_hits.append(
                        {"class": name, "sentence_index": idx, "mentions": other})
    return report
