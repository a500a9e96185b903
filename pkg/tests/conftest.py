import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from flowseg import labelgen, net
from flowseg.synthgen import SynthConfig, gen_dataset


@pytest.fixture(scope="session")
def tiny_model():
    """1-level, 4-channel model in float64 for gradient checks."""
    cfg = net.ModelConfig(levels=1, base_channels=4)
    ck = net.init_params(cfg, seed=3)
    params = {k: v.astype(np.float64) for k, v in ck.params.items()}
    return cfg, params


@pytest.fixture(scope="session")
def small_pair():
    """A (shot-sized, source-sized) pair of synthetic items with targets."""
    cfg = SynthConfig(seed=5, n_images=2, h=16, w=16, cells_per_image=(1, 2),
                      radius=(2, 2), skeleton_length=(4, 6), curvature=0.2,
                      branch_prob=0.0, domain="phase", noise_sigma=0.02, blur_sigma=0.5)
    (shot_img, shot_msk), (src_img, src_msk) = gen_dataset(cfg).items
    return (
        (shot_img, shot_msk, labelgen.make_targets(shot_msk)),
        (src_img, src_msk, labelgen.make_targets(src_msk)),
    )
