import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from realdesc.descriptions import (
    ClassDescriptions,
    DescriptionFile,
    FixtureProvider,
    RemoteLLMProvider,
    base_name_variants,
    filter_name,
    generate_descriptions,
    strip_names,
    verify_name_free,
)
from realdesc.errors import GenerationError, ValidationError


# ------------------------------------------------------------ name variants

def test_variants_multiword_oracle():
    # Oracle: hand-enumerated rule products for this input.
    variants = base_name_variants("Rhinoceros auklet")
    for expected in ["Rhinoceros auklet", "rhinoceros auklet", "Rhinoceros Auklet",
                     "rhinoceros-auklet", "rhinoceros_auklet", "auklet", "auklets"]:
        assert expected in variants, expected
    assert len(variants) == len(set(variants))


def test_variants_single_word():
    variants = base_name_variants("dog")
    for expected in ["dog", "Dog", "dogs"]:
        assert expected in variants


def test_variants_empty():
    assert base_name_variants("") == []
    assert base_name_variants("   ") == []


def test_variants_subspans_of_three_words():
    variants = {v.lower() for v in base_name_variants("Acura RL Sedan")}
    assert "acura rl" in variants
    assert "rl sedan" in variants
    assert "acura rl sedan" in variants
    assert "sedan" in variants  # head word
    assert "acura" not in variants  # non-head single word is not a variant


def test_variants_sibilant_plural():
    assert "finches" in base_name_variants("Purple Finch")


# ---------------------------------------------------------------- filtering

def test_filter_replaces_full_name():
    out = filter_name("Rhinoceros auklet", "The Rhinoceros auklet has a stout orange bill.", "bird")
    assert out == "The bird has a stout orange bill."


def test_filter_untouched_when_name_absent():
    sentence = "It has a dense water-repellent coat."
    assert filter_name("Golden Retriever", sentence, "dog") == sentence


def test_filter_plural_maps_to_bare_placeholder():
    out = filter_name("Rhinoceros auklet", "Rhinoceros Auklets gather in colonies.", "bird")
    assert out in ("bird gather in colonies.", "birds gather in colonies.")


def test_filter_head_word_and_possessive():
    out = filter_name("Rhinoceros auklet", "the auklet's bill is stout", "bird")
    assert "auklet" not in out.lower()
    assert out.startswith("the bird")


def test_filter_collapses_adjacent_placeholders():
    out = filter_name("Rhinoceros auklet", "The Rhinoceros auklet auklet dives.", "bird")
    assert "bird bird" not in out
    assert out == "The bird dives."


def test_filter_word_boundaries_do_not_fire_inside_words():
    out = filter_name("Cardinal", "The cardinality of the set is large.", "bird")
    assert out == "The cardinality of the set is large."


def test_filter_separator_variants():
    out = filter_name("Rhinoceros auklet", "A rhinoceros-auklet and a rhinoceros_auklet.", "bird")
    assert "auklet" not in out.lower()


def test_filter_rewriter_runs_first_but_pass2_is_authoritative():
    class BadRewriter:
        def rewrite(self, class_name, sentence, placeholder):
            return sentence  # pretends to clean but does nothing

    out = filter_name("Siamese", "The Siamese has blue eyes.", "cat", rewriter=BadRewriter())
    assert out == "The cat has blue eyes."


def test_filter_requires_placeholder():
    with pytest.raises(ValidationError):
        filter_name("dog", "a dog", "")


_name_words = st.sampled_from(["Rhinoceros", "auklet", "Golden", "Retriever", "Blue", "Jay"])
_filler = st.sampled_from(["stout", "orange", "bill", "the", "has", "a", "wing", "tail"])


@settings(max_examples=200, deadline=None)
@given(
    words=st.lists(_name_words, min_size=1, max_size=3),
    fillers=st.lists(_filler, min_size=0, max_size=6),
    seps=st.lists(st.sampled_from([" ", "-", "_"]), min_size=1, max_size=6),
    cases=st.lists(st.sampled_from(["lower", "upper", "title", "orig"]), min_size=1, max_size=6),
)
def test_filter_soundness_and_idempotence(words, fillers, seps, cases):
    """Injected name mentions (random casing/separators) always disappear."""
    name = " ".join(words)
    mention = name
    for sep, case in zip(seps, cases):
        styled = {"lower": mention.lower(), "upper": mention.upper(),
                  "title": mention.title(), "orig": mention}[case]
        mention = styled.replace(" ", sep)
    sentence = " ".join(fillers[: len(fillers) // 2] + [mention] + fillers[len(fillers) // 2:])
    once = filter_name(name, sentence, "bird")
    file = DescriptionFile(
        metadata={"dataset": "t", "style": "columbia", "generator": "t"},
        classes={name: ClassDescriptions(class_name=name, placeholder="bird", style="columbia",
                                         sentences=[sentence], name_free_sentences=[once])})
    assert verify_name_free(file).certified
    assert filter_name(name, once, "bird") == once  # idempotent


@settings(max_examples=100, deadline=None)
@given(fillers=st.lists(_filler, min_size=1, max_size=10))
def test_filter_preserves_non_matching_tokens(fillers):
    sentence = " ".join(fillers)
    out = filter_name("Zyzzyva", sentence, "insect")
    assert out.split() == sentence.split()


# ------------------------------------------------------------- verification

def _make_file(sentences_by_class, placeholder="bird", filtered=True):
    classes = {}
    for name, sentences in sentences_by_class.items():
        nf = [filter_name(name, s, placeholder) for s in sentences] if filtered else []
        classes[name] = ClassDescriptions(
            class_name=name, placeholder=placeholder, style="columbia",
            sentences=sentences, name_free_sentences=nf)
    return DescriptionFile(metadata={"dataset": "t", "style": "columbia", "generator": "t"},
                           classes=classes)


def test_verify_certifies_filtered_file():
    file = _make_file({"Rhinoceros auklet": ["The Rhinoceros auklet has a stout bill."]})
    report = verify_name_free(file)
    assert report.certified
    assert report.residuals == []


def test_verify_finds_residual():
    file = _make_file({"Rhinoceros auklet": ["clean sentence"]})
    file.classes["Rhinoceros auklet"].name_free_sentences = ["the auklet's bill"]
    report = verify_name_free(file)
    assert not report.certified
    assert len(report.residuals) == 1
    hit = report.residuals[0]
    assert hit["class"] == "Rhinoceros auklet"
    assert "auklet" in hit["variant"].lower()


def test_verify_cross_class_is_informational():
    file = _make_file({
        "Blue Jay": ["The Blue Jay has a crest."],
        "Cardinal": ["The Cardinal looks like a Blue Jay with red feathers."],
    })
    report = verify_name_free(file)
    assert report.certified  # cross-class mention is not a failure
    assert any(hit["mentions"] == "Blue Jay" for hit in report.cross_class_hits)


def test_verify_requires_filtered_file():
    file = _make_file({"Blue Jay": ["The Blue Jay has a crest."]}, filtered=False)
    with pytest.raises(ValidationError):
        verify_name_free(file)


def test_verify_skips_placeholder_equal_variant():
    # Head word == placeholder ("flower"): its presence is by design.
    file = _make_file({"passion flower": ["The passion flower has wavy filaments."]},
                      placeholder="flower")
    assert verify_name_free(file).certified


# -------------------------------------------------------------------- store

def test_description_file_round_trip(tmp_path):
    file = _make_file({"Blue Jay": ["The Blue Jay has a crest.", "The Blue Jay has black bars."]})
    path = file.save(tmp_path / "f.json")
    loaded = DescriptionFile.load(path)
    assert loaded.to_dict() == file.to_dict()
    assert loaded.content_hash() == file.content_hash()


def test_mismatched_name_free_length_rejected():
    with pytest.raises(ValidationError):
        ClassDescriptions(class_name="x", placeholder="bird", style="columbia",
                          sentences=["a", "b"], name_free_sentences=["a"])


# ---------------------------------------------------------------- providers

def test_fixture_provider_is_deterministic():
    provider = FixtureProvider(attributes={"Blue Jay": ["a blue crest", "black wing bars"]})
    a = provider.describe_class("Blue Jay", "bird", "columbia", 8)
    b = provider.describe_class("Blue Jay", "bird", "columbia", 8)
    assert a == b
    assert len(a) == 8
    assert all("Blue Jay" in s for s in a)


def test_fixture_provider_unknown_class_gets_generic_but_stable_output():
    provider = FixtureProvider()
    a = provider.describe_class("Mystery Thing", "object", "oxford", 4)
    assert a == provider.describe_class("Mystery Thing", "object", "oxford", 4)
    assert all("Mystery Thing" in s for s in a)


def test_columbia_fixtures_are_concise(world):
    provider = FixtureProvider(attributes={c: None for c in []})
    sentences = provider.describe_class("Blue Jay", "bird", "columbia", 8)
    mean_words = sum(len(s.split()) for s in sentences) / len(sentences)
    assert mean_words <= 15


def test_generate_descriptions_empty_classes():
    file = generate_descriptions([], "oxford", 8, FixtureProvider())
    assert len(file) == 0
    assert file.metadata["style"] == "oxford"


def test_generate_descriptions_k_validation():
    with pytest.raises(ValidationError):
        generate_descriptions(["a"], "oxford", 0, FixtureProvider())


def test_generate_descriptions_name_binding_and_count():
    file = generate_descriptions(["Rhinoceros auklet"], "columbia", 8, FixtureProvider(),
                                 placeholders={"Rhinoceros auklet": "bird"}, dataset="demo")
    cd = file.classes["Rhinoceros auklet"]
    assert len(cd.sentences) == 8
    assert all("Rhinoceros auklet" in s for s in cd.sentences)
    assert cd.placeholder == "bird"


def test_strip_names_populates_all_classes(world_descriptions):
    assert all(cd.filtered for cd in world_descriptions.classes.values())
    assert verify_name_free(world_descriptions).certified


def test_remote_provider_requires_credentials(monkeypatch):
    monkeypatch.delenv("REALDESC_LLM_ENDPOINT", raising=False)
    monkeypatch.delenv("REALDESC_LLM_KEY", raising=False)
    with pytest.raises(ValidationError):
        RemoteLLMProvider()


def test_remote_provider_parses_and_logs(tmp_path):
    def respond(request: httpx.Request) -> httpx.Response:
        assert request.headers["Authorization"] == "Bearer test-key"
        body = json.loads(request.content)
        assert "Blue Jay" in body["messages"][0]["content"]
        text = "1. The Blue Jay has a blue crest.\n2. The Blue Jay has black wing bars."
        return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})

    provider = RemoteLLMProvider(endpoint="https://llm.example/v1/chat", api_key="test-key",
                                 audit_log=tmp_path / "audit.jsonl",
                                 transport=httpx.MockTransport(respond))
    sentences = provider.describe_class("Blue Jay", "bird", "columbia", 2)
    assert sentences == ["The Blue Jay has a blue crest.", "The Blue Jay has black wing bars."]
    log_lines = (tmp_path / "audit.jsonl").read_text().strip().splitlines()
    assert len(log_lines) == 1
    assert "prompt" in json.loads(log_lines[0])


def test_remote_provider_retries_then_fails(tmp_path):
    calls = {"n": 0}

    def respond(request: httpx.Request) -> httpx.Response:
        calls["n"] += 1
        return httpx.Response(500, text="boom")

    provider = RemoteLLMProvider(endpoint="https://llm.example/v1/chat", api_key="k",
                                 max_retries=3, transport=httpx.MockTransport(respond))
    with pytest.raises(GenerationError):
        provider.describe_class("Blue Jay", "bird", "columbia", 2)
    assert calls["n"] == 3


def test_generation_failure_writes_partial_checkpoint(tmp_path):
    class FlakyProvider:
        name = "flaky"

        def __init__(self):
            self.calls = 0

        def describe_class(self, class_name, placeholder, style, k):
            self.calls += 1
            if class_name == "B":
                raise GenerationError("provider down")
            return [f"The {class_name} has a mark {i}." for i in range(k)]

    ckpt = tmp_path / "partial.json"
    with pytest.raises(GenerationError):
        generate_descriptions(["A", "B"], "columbia", 2, FlakyProvider(),
                              checkpoint_path=ckpt)
    partial = DescriptionFile.load(ckpt)
    assert list(partial.classes) == ["A"]
    assert partial.metadata["partial"] is True
