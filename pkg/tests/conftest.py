import pytest
import torch

from patchlm.modeling import BackboneConfig, ModelConfig, build_vlm

torch.set_num_threads(1)


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        backbones=[BackboneConfig(patch_size=16, dim=16, depth=2, heads=2)],
        projector_hidden=24,
        lm_dim=32,
        lm_depth=2,
        lm_heads=2,
        max_context=256,
        prompt_style="base",
        image_scheme="naive-resize",
        image_resolution=32,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return build_vlm(tiny_config(), seed=0)
