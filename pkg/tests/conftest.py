import numpy as np
import pytest

from attnseg.synth_fixtures import RegionSpec, SceneSpec, make_fixture
from attnseg.tensor_store import (
    AttentionBundle,
    CrossLayer,
    TokenManifest,
    TokenSpan,
)


def random_stochastic(rng, rows, cols):
    """Row-stochastic float32 matrix with strictly positive entries."""
    m = rng.uniform(0.05, 1.0, size=(rows, cols))
    return (m / m.sum(axis=1, keepdims=True)).astype(np.float32)


def tiny_bundle(rng=None, grid=2, tokens=3):
    """Smallest well-formed bundle: one cross layer at the self grid."""
    rng = rng or np.random.default_rng(0)
    wh = grid * grid
    manifest = TokenManifest(
        prompt_text="a photo including cat.",
        entries=[
            TokenSpan("context", "other", 0, 0),
            TokenSpan("cat", "category", 1, 1),
            TokenSpan("period", "other", 2, 2),
        ],
        class_ids={"cat": 1},
    )
    return AttentionBundle(
        image_id="tiny",
        image_width=grid,
        image_height=grid,
        cross_layers=[
            CrossLayer(
                layer_index=4,
                width=grid,
                height=grid,
                tokens=tokens,
                data=random_stochastic(rng, wh, tokens),
            )
        ],
        self_map=random_stochastic(rng, wh, wh),
        self_width=grid,
        self_height=grid,
        token_manifest=manifest,
    )


@pytest.fixture
def two_class_spec():
    return SceneSpec(
        name="two",
        grid_width=16,
        grid_height=16,
        regions=[
            RegionSpec("cat", 1, 2, 2, 8, 8),
            RegionSpec("dog", 2, 10, 9, 15, 14),
        ],
    )


@pytest.fixture
def two_class_fixture(two_class_spec):
    return make_fixture(two_class_spec, seed=7)
