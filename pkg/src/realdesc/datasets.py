"""Benchmark ingestion for the six fine-grained datasets plus generic folders.

Each adapter yields (PIL image, label_index) lazily over the requested split
and exposes ``classes`` in canonical order. Class lists, per-class
super-category placeholders, and attribute tables ship as versioned assets;
when a dataset provides its own class metadata the adapter cross-checks it
against the asset list and prefers the dataset on disagreement (with a
warning), so label alignment never silently drifts.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from PIL import Image

from .errors import DataError, ValidationError

logger = logging.getLogger(__name__)

BENCHMARKS = {
    "cub": 200,
    "flowers102": 102,
    "cars196": 196,
    "food101": 101,
    "dogs120": 120,
    "oxfordpets": 37,
}


def check_benchmark(name: str) -> str:
    if name not in BENCHMARKS:
        raise ValidationError(
            f"unknown dataset {name!r}; valid names: {', '.join(sorted(BENCHMARKS))}")
    return name


def _normalize(name: str) -> str:
    return re.sub(r"[\s_\-]+", " ", name).strip().lower()


def benchmark_asset(name: str) -> dict:
    check_benchmark(name)
    ref = resources.files("realdesc.assets.benchmarks").joinpath(f"{name}.json")
    payload = json.loads(ref.read_text(encoding="utf-8"))
    n = len(payload["classes"])
    if n != BENCHMARKS[name]:
        raise DataError(f"asset for {name} lists {n} classes, expected {BENCHMARKS[name]}")
    return payload


def class_list(name: str) -> list[str]:
    return [entry["name"] for entry in benchmark_asset(name)["classes"]]


def supercategory_map(name: str) -> dict[str, str]:
    payload = benchmark_asset(name)
    default = payload.get("placeholder", "object")
    return {e["name"]: e.get("placeholder", default) for e in payload["classes"]}


def attribute_table(name: str) -> dict[str, list[str]]:
    """Per-class visual attribute phrases for the offline fixture provider."""
    return {e["name"]: list(e.get("attributes", [])) for e in benchmark_asset(name)["classes"]}


def all_benchmark_class_names() -> set[str]:
    """Union of the six class lists; the fine-tuning exclusion set."""
    names: set[str] = set()
    for bench in BENCHMARKS:
        names.update(class_list(bench))
    return names


@dataclass
class BenchmarkSpec:
    name: str
    root: Path
    split: str = "test"
    class_list: list[str] = field(default_factory=list)
    supercategory_map: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        check_benchmark(self.name)
        if self.split != "test":
            raise ValidationError("only the official test split is supported")
        if not self.class_list:
            self.class_list = class_list(self.name)
        if not self.supercategory_map:
            self.supercategory_map = supercategory_map(self.name)
        if len(self.class_list) != BENCHMARKS[self.name]:
            raise DataError(
                f"{self.name}: {len(self.class_list)} classes, expected {BENCHMARKS[self.name]}")


class _LazyImageSource:
    """Shared iteration over (path, label) pairs resolved lazily to PIL."""

    def __init__(self, classes: list[str], items: list[tuple[Path, int]]):
        self.classes = classes
        self.items = items

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        for path, label in self.items:
            with Image.open(path) as img:
                yield img.convert("RGB"), label

    def images_for(self, name: str) -> list[str]:
        label = self.classes.index(name)
        return [str(p) for p, lbl in self.items if lbl == label]


def load_image(ref: str) -> Image.Image:
    with Image.open(ref) as img:
        return img.convert("RGB")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} not found at {path}")
    return path


def _reconcile_classes(dataset_names: list[str], asset_names: list[str], bench: str) -> list[str]:
    """Prefer canonical asset spellings; fall back to dataset names on mismatch."""
    by_norm = {_normalize(n): n for n in asset_names}
    out = []
    misses = 0
    for raw in dataset_names:
        canonical = by_norm.get(_normalize(raw))
        if canonical is None:
            misses += 1
            out.append(raw)
        else:
            out.append(canonical)
    if misses:
        logger.warning("%s: %d dataset class names not in the shipped list; using dataset spellings",
                       bench, misses)
    return out


# ------------------------------------------------------------- per-benchmark

def _load_oxfordpets(root: Path) -> _LazyImageSource:
    ann = _require(root / "annotations" / "test.txt", "OxfordPets test annotations")
    images_dir = _require(root / "images", "OxfordPets images directory")
    entries = []
    breeds: list[str] = []
    seen: dict[str, int] = {}
    for line in ann.read_text().splitlines():
        parts = line.strip().split()
        if not parts or parts[0].startswith("#"):
            continue
        image_id = parts[0]
        breed_raw = re.sub(r"_\d+$", "", image_id)
        breed = _normalize(breed_raw)
        if breed not in seen:
            seen[breed] = len(breeds)
            breeds.append(breed_raw.replace("_", " "))
        entries.append((images_dir / f"{image_id}.jpg", seen[breed]))
    classes = _reconcile_classes(breeds, class_list("oxfordpets"), "oxfordpets")
    return _LazyImageSource(classes, entries)


def _load_cub(root: Path) -> _LazyImageSource:
    images_txt = _require(root / "images.txt", "CUB images.txt")
    labels_txt = _require(root / "image_class_labels.txt", "CUB image_class_labels.txt")
    classes_txt = _require(root / "classes.txt", "CUB classes.txt")
    split_txt = _require(root / "train_test_split.txt", "CUB train_test_split.txt")

    raw_classes = []
    for line in classes_txt.read_text().splitlines():
        _, name = line.strip().split(maxsplit=1)
        name = re.sub(r"^\d+\.", "", name).replace("_", " ")
        raw_classes.append(name)
    classes = _reconcile_classes(raw_classes, class_list("cub"), "cub")

    paths = {}
    for line in images_txt.read_text().splitlines():
        idx, rel = line.strip().split(maxsplit=1)
        paths[idx] = root / "images" / rel
    labels = {}
    for line in labels_txt.read_text().splitlines():
        idx, cls = line.strip().split()
        labels[idx] = int(cls) - 1
    is_test = {}
    for line in split_txt.read_text().splitlines():
        idx, flag = line.strip().split()
        is_test[idx] = flag == "0"  # 1 marks training images
    entries = [(paths[i], labels[i]) for i in paths if is_test.get(i)]
    return _LazyImageSource(classes, entries)


def _load_food101(root: Path) -> _LazyImageSource:
    test_txt = _require(root / "meta" / "test.txt", "Food101 meta/test.txt")
    classes_txt = root / "meta" / "classes.txt"
    if classes_txt.exists():
        raw = [c.replace("_", " ") for c in classes_txt.read_text().split()]
    else:
        raw = class_list("food101")
    classes = _reconcile_classes(raw, class_list("food101"), "food101")
    index = {_normalize(c): i for i, c in enumerate(classes)}
    entries = []
    for line in test_txt.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        cls_raw, _, _ = line.partition("/")
        label = index[_normalize(cls_raw)]
        entries.append((root / "images" / f"{line}.jpg", label))
    return _LazyImageSource(classes, entries)


def _load_flowers102(root: Path) -> _LazyImageSource:
    from scipy.io import loadmat

    labels_mat = _require(root / "imagelabels.mat", "Flowers102 imagelabels.mat")
    setid_mat = _require(root / "setid.mat", "Flowers102 setid.mat")
    jpg_dir = _require(root / "jpg", "Flowers102 jpg directory")
    labels = loadmat(labels_mat)["labels"].ravel()
    test_ids = loadmat(setid_mat)["tstid"].ravel()
    classes = class_list("flowers102")  # the dataset ships no class names
    entries = [
        (jpg_dir / f"image_{int(i):05d}.jpg", int(labels[int(i) - 1]) - 1) for i in test_ids
    ]
    return _LazyImageSource(classes, entries)


def _load_cars196(root: Path) -> _LazyImageSource:
    from scipy.io import loadmat

    annos = root / "cars_test_annos_withlabels.mat"
    if not annos.exists():
        annos = _require(root / "devkit" / "cars_test_annos_withlabels.mat",
                         "Cars196 test annotations with labels")
    meta = root / "devkit" / "cars_meta.mat"
    if meta.exists():
        raw = [str(c[0]) for c in loadmat(meta)["class_names"].ravel()]
        classes = _reconcile_classes(raw, class_list("cars196"), "cars196")
    else:
        classes = class_list("cars196")
    images_dir = _require(root / "cars_test", "Cars196 test images directory")
    entries = []
    for ann in loadmat(annos)["annotations"].ravel():
        fname = str(ann["fname"][0])
        label = int(ann["class"].ravel()[0]) - 1
        entries.append((images_dir / fname, label))
    return _LazyImageSource(classes, entries)


def _load_dogs120(root: Path) -> _LazyImageSource:
    from scipy.io import loadmat

    images_dir = _require(root / "Images", "Stanford Dogs Images directory")
    test_mat = _require(root / "test_list.mat", "Stanford Dogs test_list.mat")
    blob = loadmat(test_mat)
    files = [str(f[0][0]) for f in blob["file_list"]]
    labels = blob["labels"].ravel().astype(int) - 1

    raw_classes: list[str] = [""] * (int(labels.max()) + 1)
    for f, lbl in zip(files, labels):
        folder = f.split("/")[0]
        name = folder.split("-", 1)[1].replace("_", " ") if "-" in folder else folder
        raw_classes[lbl] = name
    classes = _reconcile_classes(raw_classes, class_list("dogs120"), "dogs120")
    entries = [(images_dir / f, int(lbl)) for f, lbl in zip(files, labels)]
    return _LazyImageSource(classes, entries)


class ImageFolderSource(_LazyImageSource):
    """Generic adapter: one subdirectory per class, images inside."""

    def __init__(self, root: str | Path):
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"image folder {root} does not exist")
        class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
        if not class_dirs:
            raise DataError(f"image folder {root} has no class subdirectories")
        classes = [d.name.replace("_", " ") for d in class_dirs]
        items = []
        for label, d in enumerate(class_dirs):
            for path in sorted(d.iterdir()):
                if path.suffix.lower() in (".jpg", ".jpeg", ".png", ".bmp", ".webp"):
                    items.append((path, label))
        super().__init__(classes, items)


_LOADERS = {
    "oxfordpets": _load_oxfordpets,
    "cub": _load_cub,
    "food101": _load_food101,
    "flowers102": _load_flowers102,
    "cars196": _load_cars196,
    "dogs120": _load_dogs120,
}


def load_benchmark(name: str, root: str | Path, split: str = "test") -> _LazyImageSource:
    """Open a benchmark's official test split from its published layout."""
    check_benchmark(name)
    if split != "test":
        raise ValidationError("only the official test split is supported")
    source = _LOADERS[name](Path(root))
    expected = BENCHMARKS[name]
    if len(source.classes) != expected:
        raise DataError(f"{name}: found {len(source.classes)} classes, expected {expected}")
    return source
