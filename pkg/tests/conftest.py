import numpy as np
import pytest

from videocascade.videodata import VideoBatch


def random_video_batch(b=2, t=8, c=3, h=16, w=16, seed=0, labels=None) -> VideoBatch:
    rng = np.random.default_rng(seed)
    data = rng.uniform(-1.0, 1.0, size=(b, t, c, h, w)).astype(np.float32)
    return VideoBatch(data, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
