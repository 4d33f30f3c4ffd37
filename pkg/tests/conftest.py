import numpy as np
import pytest

from vgs import data as D
from vgs import model as M
from vgs.numcore import make_rng


def tiny_config(**kw):
    base = dict(image_dim=5, embed_dim=4, mfcc_dim=3, conv_kernel=3, conv_stride=2, conv_channels=4,
                gru_layers=2, attention_after_layers=[1, 2])
    base.update(kw)
    return M.ModelConfig(**base)


def perturbed_params(config, seed, scale=0.3):
    """Initialized params plus noise so biases and weights are all non-trivial."""
    params = M.init_params(config, seed)
    rng = make_rng(seed, "perturb")
    for p in params:
        p.value[...] += rng.normal(0.0, scale, p.shape)
    return params


def random_batch(config, n, seed, t_range=(8, 13)):
    rng = make_rng(seed, "batch")
    feats = [rng.normal(size=(int(rng.integers(*t_range)), config.mfcc_dim)) for _ in range(n)]
    images = rng.normal(size=(n, config.image_dim))
    return feats, images


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """40 images x 5 captions, both languages, train/val/test = 30/5/5."""
    out = tmp_path_factory.mktemp("corpus")
    spec = D.SynthSpec(n_concepts=6, n_images=40, splits={"train": 30, "val": 5, "test": 5}, seed=3)
    manifests = D.generate_synthetic(spec, out)
    return out, manifests


# one "criterion N: PASS/FAIL ..." line per acceptance criterion, filled by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
