import numpy as np
import pytest
import torch

from instance_i2i.data_model import DomainId, ImageSample, InstanceBox
from instance_i2i.datasets import SyntheticSceneSpec, generate_synthetic
from instance_i2i.networks import NetworkConfig, TranslationModel
from instance_i2i.training import TrainConfig

X = DomainId("sunny", 0)
Y = DomainId("night", 1)

TINY_NET = NetworkConfig(base_channels=4, n_residual_blocks=1, mlp_dim=8, style_dim=8)
TINY_TRAIN = dict(image_size=16, instance_size=8, max_instances=2)


def make_sample(size=16, boxes=((2, 3, 6, 5),), domain=X, sid="img", seed=0):
    rng = np.random.default_rng(seed)
    px = rng.uniform(-1, 1, size=(3, size, size)).astype(np.float32)
    return ImageSample(px, domain, tuple(InstanceBox(*b) for b in boxes), sid)


@pytest.fixture
def tiny_model():
    return TranslationModel(TINY_NET, seed=0)


@pytest.fixture(scope="session")
def toy_corpus():
    x, y = generate_synthetic(SyntheticSceneSpec(image_size=16, n_images=6, object_size=(4, 8), seed=3))
    return x.samples(), y.samples()


def tiny_train_cfg(**kw):
    return TrainConfig(**{**TINY_TRAIN, **kw})


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")
