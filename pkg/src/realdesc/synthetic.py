"""Desk-scale synthetic assets: a tiny local CLIP checkpoint and an attribute
world of rendered figures with matching sentences.

The attribute world gives every class a visual identity (foreground color,
surface pattern, shape, background color) plus a made-up two-word name that
carries no attribute information. Images are rendered deterministically, so
zero-shot and fine-tuning behavior can be exercised end to end without any
downloads. The tiny checkpoint is a real CLIP architecture saved through the
standard checkpoint format and loads through the normal registry path.
"""

from __future__ import annotations

import itertools
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

COLOR_RGB = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 220, 40),
    "purple": (150, 40, 200),
    "orange": (240, 140, 30),
    "pink": (245, 120, 180),
    "brown": (130, 80, 40),
    "black": (25, 25, 25),
    "white": (240, 240, 240),
    "gray": (128, 128, 128),
    "cyan": (40, 210, 210),
}

PATTERNS = ("solid", "striped", "spotted", "checkered")
SHAPES = ("circle", "square", "triangle", "diamond", "cross", "ring")

_SYLLABLES = ("ba", "re", "mo", "ka", "lu", "ti", "zor", "nel", "vi", "dra",
              "fen", "gu", "pol", "sha", "wim", "yor", "qui", "tam", "os", "je")

_COLUMBIA_TEMPLATES = (
    "A {name} is drawn as a {shape}.",
    "The {name} has a {fg} body.",
    "A {name} shows a {pattern} surface.",
    "The {name} sits on a {bg} background.",
    "The {name} has a {fg} {shape} outline.",
    "A {name} looks {pattern} overall.",
)

_OXFORD_TEMPLATES = (
    "The {name} is a figure with a {fg} {shape} body and a {pattern} surface, set on a {bg} background.",
    "Seen as a whole, the {name} is a {pattern} {fg} {shape}, and the {name} stands on a {bg} field.",
    "A typical {name} is {fg} in color, shaped like a {shape}, with a {pattern} texture on a {bg} background.",
)

GENERAL_WORDS = (
    "a an the photo of with and on in is are has have it its this that looks like small large "
    "dog cat bird flower car food pet figure object body surface outline background shape color "
    "wings tail head bill beak stout long short coat fur feathers petals leaves drawn shows sits "
    "stands overall typical seen whole set field texture kind part attribute"
).split()


def _make_names(n: int, rng: np.random.Generator) -> list[str]:
    names: list[str] = []
    seen = set()
    while len(names) < n:
        w1 = "".join(rng.choice(_SYLLABLES, size=2))
        w2 = "".join(rng.choice(_SYLLABLES, size=2))
        name = f"{w1.capitalize()} {w2}"
        if name not in seen:
            seen.add(name)
            names.append(name)
    return names


class AttributeWorld:
    """Deterministic classes with rendered images and attribute sentences."""

    placeholder = "figure"

    def __init__(self, n_classes: int = 70, seed: int = 0, image_side: int = 64):
        self.seed = seed
        self.image_side = image_side
        rng = np.random.default_rng(seed)
        colors = list(COLOR_RGB)
        combos = [c for c in itertools.product(colors, PATTERNS, SHAPES, colors) if c[0] != c[3]]
        rng.shuffle(combos)
        if n_classes > len(combos):
            raise ValueError(f"at most {len(combos)} distinct classes available")
        self.classes = _make_names(n_classes, rng)
        self._attrs = {
            name: {"fg": c[0], "pattern": c[1], "shape": c[2], "bg": c[3]}
            for name, c in zip(self.classes, combos)
        }

    def attributes(self, name: str) -> dict:
        return dict(self._attrs[name])

    # ------------------------------------------------------------- rendering

    def render(self, name: str, index: int = 0, side: int | None = None) -> Image.Image:
        side = side or self.image_side
        a = self._attrs[name]
        digest = zlib.crc32(f"{self.seed}|{name}|{index}".encode("utf-8"))
        rng = np.random.default_rng(digest)
        img = np.zeros((side, side, 3), dtype=np.float32)
        bg = np.array(COLOR_RGB[a["bg"]], dtype=np.float32) * 0.45
        fg = np.array(COLOR_RGB[a["fg"]], dtype=np.float32)
        img[:] = bg

        cx = side / 2 + rng.uniform(-0.08, 0.08) * side
        cy = side / 2 + rng.uniform(-0.08, 0.08) * side
        r = side * rng.uniform(0.30, 0.38)
        yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
        dx, dy = xx - cx, yy - cy

        shape = a["shape"]
        if shape == "circle":
            mask = dx * dx + dy * dy <= r * r
        elif shape == "ring":
            d2 = dx * dx + dy * dy
            mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
        elif shape == "square":
            mask = (np.abs(dx) <= r * 0.9) & (np.abs(dy) <= r * 0.9)
        elif shape == "diamond":
            mask = (np.abs(dx) + np.abs(dy)) <= r * 1.2
        elif shape == "triangle":
            mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) * 0.6)
        elif shape == "cross":
            mask = ((np.abs(dx) <= r * 0.3) & (np.abs(dy) <= r)) | ((np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r))
        else:  # pragma: no cover
            raise ValueError(shape)

        dark = fg * 0.35
        pattern = a["pattern"]
        period = max(2, side // 8)
        if pattern == "solid":
            tex = np.broadcast_to(fg, img.shape).copy()
        elif pattern == "striped":
            bands = ((yy // period).astype(int) % 2) == 0
            tex = np.where(bands[..., None], fg, dark)
        elif pattern == "spotted":
            dots = ((xx % period < period / 2.5) & (yy % period < period / 2.5))
            tex = np.where(dots[..., None], dark, fg)
        else:  # checkered
            checks = (((xx // period).astype(int) + (yy // period).astype(int)) % 2) == 0
            tex = np.where(checks[..., None], fg, dark)

        img[mask] = tex[mask]
        img += rng.normal(0, 5.0, img.shape)
        return Image.fromarray(np.clip(img, 0, 255).astype(np.uint8), mode="RGB")

    # ----------------------------------------------------------- description

    def sentences(self, name: str, style: str, k: int) -> list[str]:
        a = self._attrs[name]
        templates = _COLUMBIA_TEMPLATES if style == "columbia" else _OXFORD_TEMPLATES
        return [templates[i % len(templates)].format(name=name, **a) for i in range(k)]

    def description_file(self, classes: list[str] | None = None, style: str = "columbia",
                         k: int = 6, name_free: bool = True):
        from .descriptions import ClassDescriptions, DescriptionFile, strip_names

        classes = classes if classes is not None else self.classes
        file = DescriptionFile(
            metadata={"dataset": "attribute-world", "style": style, "generator": "synthetic", "k": k},
            classes={
                name: ClassDescriptions(
                    class_name=name, placeholder=self.placeholder, style=style,
                    sentences=self.sentences(name, style, k))
                for name in classes
            },
        )
        return strip_names(file) if name_free else file

    # ---------------------------------------------------------------- images

    def image_ref(self, name: str, index: int) -> str:
        return f"synth://{name}/{index}"

    def load_ref(self, ref: str, side: int | None = None) -> Image.Image:
        if not ref.startswith("synth://"):
            raise ValueError(f"not a synthetic image ref: {ref}")
        name, idx = ref[len("synth://"):].rsplit("/", 1)
        return self.render(name, int(idx), side=side)

    def image_source(self, classes: list[str] | None = None, n_per_class: int = 5,
                     index_offset: int = 0, side: int | None = None) -> "SyntheticImageSource":
        classes = classes if classes is not None else self.classes
        return SyntheticImageSource(self, classes, n_per_class, index_offset, side)

    # ------------------------------------------------------------- tokenizer

    def corpus_text(self) -> list[str]:
        lines = [" ".join(GENERAL_WORDS)]
        lines.append(" ".join(COLOR_RGB))
        lines.append(" ".join(PATTERNS))
        lines.append(" ".join(SHAPES))
        for name in self.classes:
            for style in ("columbia", "oxford"):
                lines.extend(self.sentences(name, style, 6))
        return lines


class SyntheticImageSource:
    """Labeled image source over attribute-world renders."""

    def __init__(self, world: AttributeWorld, classes: list[str], n_per_class: int,
                 index_offset: int = 0, side: int | None = None):
        self.world = world
        self.classes = list(classes)
        self.n_per_class = n_per_class
        self.index_offset = index_offset
        self.side = side

    def __len__(self) -> int:
        return len(self.classes) * self.n_per_class

    def __iter__(self):
        for label, name in enumerate(self.classes):
            for i in range(self.n_per_class):
                yield self.world.render(name, self.index_offset + i, side=self.side), label

    def images_for(self, name: str) -> list[str]:
        return [self.world.image_ref(name, self.index_offset + i) for i in range(self.n_per_class)]


def build_tiny_checkpoint(out_dir: str | Path, *, seed: int = 0, image_size: int = 32,
                          patch_size: int = 8, vision_width: int = 64, vision_layers: int = 4,
                          heads: int = 4, embed_dim: int = 32, text_width: int = 64,
                          text_layers: int = 4, corpus: list[str] | None = None) -> Path:
    """Create a small randomly initialized CLIP checkpoint on disk.

    The checkpoint carries its own tokenizer (word-level, trained on the
    attribute-world corpus) and image processor, so it loads exactly like a
    published checkpoint.
    """
    import torch
    from tokenizers import Tokenizer, models, normalizers, pre_tokenizers, processors, trainers
    from transformers import (CLIPConfig, CLIPImageProcessor, CLIPModel, CLIPTextConfig,
                              CLIPVisionConfig, PreTrainedTokenizerFast)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    corpus = corpus if corpus is not None else AttributeWorld(n_classes=70, seed=seed).corpus_text()
    tok = Tokenizer(models.WordLevel(unk_token="<unk>"))
    tok.normalizer = normalizers.Lowercase()
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    trainer = trainers.WordLevelTrainer(
        special_tokens=["<unk>", "<|startoftext|>", "<|endoftext|>"], vocab_size=8000)
    tok.train_from_iterator(corpus, trainer)
    bos = tok.token_to_id("<|startoftext|>")
    eos = tok.token_to_id("<|endoftext|>")
    tok.post_processor = processors.TemplateProcessing(
        single="<|startoftext|> $A <|endoftext|>",
        special_tokens=[("<|startoftext|>", bos), ("<|endoftext|>", eos)])
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok, unk_token="<unk>", bos_token="<|startoftext|>",
        eos_token="<|endoftext|>", pad_token="<|endoftext|>", model_max_length=77)

    torch.manual_seed(seed)
    vision_cfg = CLIPVisionConfig(
        hidden_size=vision_width, intermediate_size=vision_width * 2,
        num_hidden_layers=vision_layers, num_attention_heads=heads,
        image_size=image_size, patch_size=patch_size, projection_dim=embed_dim)
    text_cfg = CLIPTextConfig(
        hidden_size=text_width, intermediate_size=text_width * 2,
        num_hidden_layers=text_layers, num_attention_heads=heads,
        max_position_embeddings=77, vocab_size=tokenizer.vocab_size,
        projection_dim=embed_dim, bos_token_id=bos, eos_token_id=eos, pad_token_id=eos)
    config = CLIPConfig(vision_config=vision_cfg.to_dict(), text_config=text_cfg.to_dict(),
                        projection_dim=embed_dim)
    model = CLIPModel(config)
    model.eval()

    processor = CLIPImageProcessor(
        do_resize=True, size={"shortest_edge": image_size},
        do_center_crop=True, crop_size={"height": image_size, "width": image_size},
        do_normalize=True,
        image_mean=[0.48145466, 0.4578275, 0.40821073],
        image_std=[0.26862954, 0.26130258, 0.27577711])

    model.save_pretrained(out_dir)
    tokenizer.save_pretrained(out_dir)
    processor.save_pretrained(out_dir)
    return out_dir
