import numpy as np
import pytest

from fewshotlab.data import (
    SyntheticShapesConfig,
    generate_synthetic,
    load_dataset,
    make_splits,
)


@pytest.fixture(scope="session")
def synth():
    """24-class shapes dataset, 20 images per class, 32px."""
    cfg = SyntheticShapesConfig(n_classes=24, images_per_class=20, image_size=32, seed=7)
    return load_dataset(generate_synthetic(cfg))


@pytest.fixture(scope="session")
def synth_split(synth):
    return make_splits(synth, seed=3)


@pytest.fixture(scope="session")
def synth_symmetric():
    """Rotation-symmetric variant: every class distribution is invariant
    under 90-degree rotations, so rotation labels carry no information."""
    cfg = SyntheticShapesConfig(
        n_classes=12, images_per_class=24, image_size=32, seed=11,
        shapes=("circle", "square", "cross"),
    )
    return load_dataset(generate_synthetic(cfg))


def rand_image(rng, c=3, h=16, w=16, dtype=np.uint8):
    return rng.integers(0, 256, size=(c, h, w)).astype(dtype)
