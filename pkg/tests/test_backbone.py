import pytest
import torch

from realdesc.backbone import KNOWN_CHECKPOINTS, FreezePolicy, load_checkpoint
from realdesc.errors import RegistryError, ShapeError, ValidationError


def test_known_checkpoint_metadata():
    assert KNOWN_CHECKPOINTS["openai/clip-vit-base-patch32"]["embed_dim"] == 512
    assert KNOWN_CHECKPOINTS["openai/clip-vit-large-patch14"]["embed_dim"] == 768


def test_unknown_identifier_raises_registry_error():
    with pytest.raises(RegistryError):
        load_checkpoint("nonexistent-model-with-no-org")


def test_unresolvable_registry_id(tmp_path, monkeypatch):
    monkeypatch.setenv("HF_HUB_OFFLINE", "1")
    monkeypatch.setenv("REALDESC_MODEL_CACHE", str(tmp_path / "cache"))
    with pytest.raises(RegistryError):
        load_checkpoint("nonexistent/model")


def test_handle_exposes_checkpoint_geometry(handle):
    assert handle.embed_dim == 32
    assert handle.patch_size == 8
    assert handle.image_size == 32
    assert handle.n_patches == 1 + (32 // 8) ** 2
    assert handle.metadata["patch_feature_space"] == "pre_projection_hidden"
    assert handle.metadata["preprocessing"]["crop_size"]["height"] == 32


def test_encode_image_deterministic(handle, world):
    px = handle.preprocess(world.render(world.classes[0], 0))
    a = handle.encode_image(px)
    b = handle.encode_image(px)
    assert torch.equal(a, b)
    assert a.shape == (handle.embed_dim,)
    assert torch.isfinite(a).all()


def test_encode_image_batch_matches_single_calls(handle, world):
    imgs = [handle.preprocess(world.render(name, 0)) for name in world.classes[:4]]
    batch = handle.encode_image(torch.stack(imgs))
    singles = torch.stack([handle.encode_image(px) for px in imgs])
    assert torch.allclose(batch, singles, atol=1e-5)


def test_encode_image_rejects_wrong_resolution(handle):
    with pytest.raises(ShapeError):
        handle.encode_image(torch.randn(3, 64, 64))


def test_encode_text_shape_and_determinism(handle):
    emb = handle.encode_text("a photo of a red circle figure")
    assert emb.shape == (handle.embed_dim,)
    assert torch.equal(emb, handle.encode_text("a photo of a red circle figure"))


def test_encode_text_empty_string_rejected(handle):
    with pytest.raises(ValidationError):
        handle.encode_text("")
    with pytest.raises(ValidationError):
        handle.encode_text("   ")


def test_encode_text_truncation_matches_manual_prefix(handle):
    # Oracle: tokenize, truncate by hand to the cap, then embed the ids.
    long_text = " ".join(["red circle striped background figure"] * 120)
    ids = handle.tokenize(long_text)
    assert len(ids) > 77
    manual = ids[:76] + [handle.tokenizer.eos_token_id]
    expected = handle.encode_tokens(manual)
    got = handle.encode_text(long_text)
    assert torch.equal(got, expected)


def test_truncation_prefix_property(handle):
    # Any over-long string embeds identically to its truncated token prefix.
    words = ["red", "blue", "striped", "circle", "square", "background"]
    text = " ".join(words[i % len(words)] for i in range(300))
    got = handle.encode_text(text)
    expected = handle.encode_tokens(handle.truncate_tokens(handle.tokenize(text)))
    assert torch.equal(got, expected)


def test_patch_features_shape_and_cls(handle, world):
    px = handle.preprocess(world.render(world.classes[1], 0))
    feats = handle.patch_features(px)
    assert feats.shape == (handle.n_patches, handle.vision_width)
    # CLS head applied to row 0 reproduces the plain embedding.
    assert torch.allclose(handle.project_cls(feats[0]), handle.encode_image(px), atol=1e-5)


def test_patch_features_rejects_high_resolution(handle, world):
    px = handle.preprocess_at(world.render(world.classes[0], 0), 64)
    with pytest.raises(ShapeError):
        handle.patch_features(px)


def test_cosine_scores_bounded(handle, world):
    img = handle.encode_image(handle.preprocess(world.render(world.classes[0], 0)))
    txt = handle.encode_text(world.sentences(world.classes[0], "columbia", 1)[0])
    cos = torch.nn.functional.cosine_similarity(img, txt, dim=0)
    assert -1.0 <= float(cos) <= 1.0


def test_freeze_policy_last_k(fresh_handle):
    report = fresh_handle.apply_freeze_policy(
        FreezePolicy(text_encoder_trainable=True, image_trainable_layers=2))
    assert report["text_encoder"] > 0
    assert report["vision_layers"] > 0
    layers = fresh_handle.vision_layers()
    for layer in layers[:-2]:
        assert all(not p.requires_grad for p in layer.parameters())
    for layer in layers[-2:]:
        assert all(p.requires_grad for p in layer.parameters())


def test_freeze_policy_all_layers(fresh_handle):
    fresh_handle.apply_freeze_policy(FreezePolicy(text_encoder_trainable=True, image_trainable_layers="all"))
    for layer in fresh_handle.vision_layers():
        assert all(p.requires_grad for p in layer.parameters())


def test_freeze_policy_nothing_trainable_rejected(fresh_handle):
    with pytest.raises(ValidationError):
        fresh_handle.apply_freeze_policy(FreezePolicy())


def test_freeze_policy_last_k_too_large(fresh_handle):
    with pytest.raises(ValidationError):
        fresh_handle.apply_freeze_policy(
            FreezePolicy(text_encoder_trainable=True, image_trainable_layers=99))


def test_gradient_isolation_after_freeze(fresh_handle, world):
    fresh_handle.apply_freeze_policy(
        FreezePolicy(text_encoder_trainable=True, image_trainable_layers="none"))
    px = torch.stack([fresh_handle.preprocess(world.render(world.classes[0], i)) for i in range(2)])
    img = fresh_handle.forward_image(px)
    txt = fresh_handle.forward_text_batch(["a red circle", "a blue square"])
    loss = (img.sum() + txt.sum())
    loss.backward()
    for p in fresh_handle.model.vision_model.parameters():
        assert p.grad is None or torch.all(p.grad == 0)
    assert any(p.grad is not None and p.grad.abs().sum() > 0
               for p in fresh_handle.model.text_model.parameters())
