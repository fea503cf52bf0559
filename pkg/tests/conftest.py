import pytest
import torch

from realdesc.backbone import load_checkpoint
from realdesc.synthetic import AttributeWorld, build_tiny_checkpoint

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def world():
    return AttributeWorld(n_classes=80, seed=0, image_side=64)


@pytest.fixture(scope="session")
def tiny_ckpt(tmp_path_factory, world):
    path = tmp_path_factory.mktemp("ckpt") / "tiny-clip"
    build_tiny_checkpoint(path, seed=0, corpus=world.corpus_text())
    return path


@pytest.fixture(scope="session")
def handle(tiny_ckpt):
    """Shared read-only handle; tests that mutate weights use fresh_handle."""
    return load_checkpoint(str(tiny_ckpt))


@pytest.fixture()
def fresh_handle(tiny_ckpt):
    return load_checkpoint(str(tiny_ckpt))


@pytest.fixture(scope="session")
def world_descriptions(world):
    return world.description_file(style="columbia", k=6)
