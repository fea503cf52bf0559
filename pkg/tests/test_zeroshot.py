import numpy as np
import pytest

from realdesc.descriptions import ClassDescriptions, DescriptionFile
from realdesc.errors import DataError, ShapeError, ValidationError
from realdesc.zeroshot import (
    ClassificationReport,
    PrototypeIndex,
    build_prototypes,
    classify,
    compare_modes,
    evaluate_dataset,
)


def _synthetic_index(n_classes, dim, seed=0, mode="no_name"):
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(n_classes, dim)).astype(np.float32)
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return PrototypeIndex(classes=[f"c{i}" for i in range(n_classes)], prototypes=protos,
                          mode=mode, k_per_class={f"c{i}": 1 for i in range(n_classes)})


def _brute_force_argmax(query, protos):
    # Oracle: explicit loop over all (query, class) dot products.
    q = query / np.linalg.norm(query)
    best, best_score = 0, -np.inf
    for i in range(protos.shape[0]):
        score = float(np.dot(protos[i], q))
        if score > best_score:
            best, best_score = i, score
    return best


def test_classify_single_class():
    index = _synthetic_index(1, 8)
    name, scores = classify(index.prototypes[0], index)
    assert name == "c0"
    assert scores.shape == (1,)


def test_classify_self_similarity():
    index = _synthetic_index(5, 16, seed=1)
    name, _ = classify(index.prototypes[2], index)
    assert name == "c2"


def test_classify_matches_brute_force_on_100_queries():
    index = _synthetic_index(5, 16, seed=2)
    rng = np.random.default_rng(3)
    for _ in range(100):
        q = rng.normal(size=16).astype(np.float32)
        name, _ = classify(q, index)
        assert name == index.classes[_brute_force_argmax(q, index.prototypes)]


def test_classify_dimension_mismatch():
    index = _synthetic_index(3, 8)
    with pytest.raises(ShapeError):
        classify(np.zeros(9, dtype=np.float32), index)


def test_classify_tie_breaks_to_lowest_index():
    protos = np.stack([np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])]).astype(np.float32)
    index = PrototypeIndex(classes=["a", "b", "c"], prototypes=protos, mode="no_name",
                           k_per_class={"a": 1, "b": 1, "c": 1})
    name, _ = classify(np.array([1.0, 0.0], dtype=np.float32), index)
    assert name == "a"


def test_argmax_invariant_to_uniform_scaling():
    index = _synthetic_index(6, 12, seed=4)
    scaled = PrototypeIndex(classes=index.classes, prototypes=index.prototypes * 7.3,
                            mode=index.mode, k_per_class=index.k_per_class)
    rng = np.random.default_rng(5)
    for _ in range(50):
        q = rng.normal(size=12).astype(np.float32)
        assert classify(q, index)[0] == classify(q, scaled)[0]


# ---------------------------------------------------------------- prototypes

def _file_for(world, classes, style="columbia", k=4):
    return world.description_file(classes=classes, style=style, k=k)


def test_prototype_of_single_sentence_equals_embedding(handle, world):
    name = world.classes[0]
    file = world.description_file(classes=[name], k=1)
    index = build_prototypes(file, "with_name", handle)
    emb = handle.encode_text(file.classes[name].sentences[0]).numpy()
    emb = emb / np.linalg.norm(emb)
    assert np.allclose(index.prototypes[0], emb, atol=1e-5)


def test_prototype_of_identical_sentences_equals_single(handle):
    sentence = "A figure with a red body."
    file = DescriptionFile(
        metadata={"dataset": "t", "style": "columbia", "generator": "t"},
        classes={"x": ClassDescriptions(class_name="x", placeholder="figure", style="columbia",
                                        sentences=[sentence] * 4,
                                        name_free_sentences=[sentence] * 4)})
    index = build_prototypes(file, "no_name", handle)
    emb = handle.encode_text(sentence).numpy()
    emb = emb / np.linalg.norm(emb)
    assert np.allclose(index.prototypes[0], emb, atol=1e-5)


def test_prototype_index_shape_and_cache(handle, world, tmp_path):
    file = _file_for(world, world.classes[:6])
    index = build_prototypes(file, "no_name", handle, cache_dir=tmp_path)
    assert index.prototypes.shape == (6, handle.embed_dim)
    cached = build_prototypes(file, "no_name", handle, cache_dir=tmp_path)
    assert np.allclose(index.prototypes, cached.prototypes)
    assert list(tmp_path.glob("prototypes_*.npz"))


def test_prototype_only_name_uses_template(handle, world):
    file = _file_for(world, world.classes[:2])
    index = build_prototypes(file, "only_name", handle)
    emb = handle.encode_text(f"a photo of a {world.classes[0]}.").numpy()
    emb = emb / np.linalg.norm(emb)
    assert np.allclose(index.prototypes[0], emb, atol=1e-5)
    assert index.k_per_class[world.classes[0]] == 1


def test_prototype_requires_name_free_for_no_name(handle, world):
    file = world.description_file(classes=world.classes[:2], name_free=False)
    with pytest.raises(ValidationError):
        build_prototypes(file, "no_name", handle)


def test_prototype_index_round_trip(handle, world, tmp_path):
    file = _file_for(world, world.classes[:3])
    index = build_prototypes(file, "with_name", handle)
    path = index.save(tmp_path / "idx.npz")
    loaded = PrototypeIndex.load(path)
    assert loaded.classes == index.classes
    assert np.allclose(loaded.prototypes, index.prototypes)
    assert loaded.mode == index.mode


# ---------------------------------------------------------------- evaluation

class _ArrayDataset:
    def __init__(self, items, classes):
        self.items = items
        self.classes = classes

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


def test_evaluate_single_image_perfect(handle, world):
    name = world.classes[0]
    file = _file_for(world, [name], k=2)
    index = build_prototypes(file, "with_name", handle)
    img = world.render(name, 0)
    report = evaluate_dataset(_ArrayDataset([(img, 0)], [name]), index, handle)
    assert report.top1 == 1.0
    assert report.top5 == 1.0
    assert report.n_images == 1


def test_evaluate_top5_is_one_when_five_classes(handle, world):
    classes = world.classes[:5]
    file = _file_for(world, classes)
    index = build_prototypes(file, "no_name", handle)
    ds = world.image_source(classes, n_per_class=2)
    report = evaluate_dataset(ds, index, handle)
    assert report.top5 == 1.0
    assert 0.0 <= report.top1 <= report.top5


def test_evaluate_rejects_unknown_labels(handle, world):
    file = _file_for(world, world.classes[:3])
    index = build_prototypes(file, "no_name", handle)
    ds = world.image_source(world.classes[3:5], n_per_class=1)
    with pytest.raises(DataError):
        evaluate_dataset(ds, index, handle)


def test_evaluate_permutation_of_classes_preserves_metrics(handle, world):
    classes = world.classes[:6]
    file = _file_for(world, classes)
    index = build_prototypes(file, "no_name", handle)
    permuted_file = DescriptionFile(metadata=dict(file.metadata),
                                    classes={name: file.classes[name] for name in reversed(classes)})
    permuted = build_prototypes(permuted_file, "no_name", handle)
    ds = world.image_source(classes, n_per_class=2)
    r1 = evaluate_dataset(ds, index, handle)
    r2 = evaluate_dataset(ds, permuted, handle)
    assert r1.top1 == pytest.approx(r2.top1)
    assert r1.top5 == pytest.approx(r2.top5)
    assert r1.per_class_accuracy == r2.per_class_accuracy


def test_report_invariant_enforced():
    with pytest.raises(ValidationError):
        ClassificationReport(top1=0.9, top5=0.5, per_class_accuracy={}, confusion_topline=[], n_images=1)


def test_compare_modes_gap_zero_when_name_free_equals_named(handle, world):
    classes = world.classes[:4]
    named = world.description_file(classes=classes, name_free=False)
    for cd in named.classes.values():
        cd.name_free_sentences = list(cd.sentences)
    ds = world.image_source(classes, n_per_class=2)
    gap = compare_modes(ds, named, handle)
    assert gap.gap == pytest.approx(0.0)
    assert gap.n_images == len(ds)
