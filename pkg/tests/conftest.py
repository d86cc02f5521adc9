import numpy as np
import pytest

from percsal import data, model


@pytest.fixture(scope="session")
def tiny_net():
    """A quickly trained single-label MiniVGG; good enough to explain."""
    ds = data.gen_shapes(150, 32, 4, 0.3, seed=0)
    return model.train(model.minivgg(4), ds, epochs=5, lr=0.01, seed=0)


@pytest.fixture(scope="session")
def tiny_detector():
    """A trained multi-label detector variant (max-pooled scores learn slowly,
    so this needs more epochs than the classifier)."""
    ds = data.gen_shapes(150, 32, 4, 0.5, seed=1)
    return model.train(model.minivgg_detector(4), ds, epochs=30, lr=0.03, seed=1)


@pytest.fixture(scope="session")
def eval_samples(tiny_net):
    """Evaluation samples the tiny net classifies correctly."""
    ds = data.gen_shapes(30, 32, 4, 0.3, seed=500)
    good = [s for s in ds
            if int(np.argmax(model.forward_arrays(tiny_net, s.image))) == s.label]
    assert len(good) >= 5
    return good
