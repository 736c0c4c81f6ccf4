import pytest
import torch

from facemorph.data import ImageStore, generate_synthetic_faces
from facemorph.encoder import EncoderConfig, EncoderTrainConfig, FaceEncoder, FaceFeatures, train_desk_encoder
from facemorph.morphnet import GeneratorConfig, init_generator

# tiny shapes for fast generator tests
TINY_ENC = EncoderConfig(widths=(4, 4, 8, 8, 8), feature_dim=16)
TINY_GEN = GeneratorConfig(f_dim=16, f4_channels=8, channel_scale=16)

ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])


def random_features(n, seed, enc_config=TINY_ENC):
    g = torch.Generator().manual_seed(seed)
    c3, c4, c5 = enc_config.widths[2:]
    return FaceFeatures(
        f=torch.randn(n, enc_config.feature_dim, generator=g),
        F3=torch.randn(n, c3, 14, 14, generator=g),
        F4=torch.randn(n, c4, 7, 7, generator=g).relu(),
        F5=torch.randn(n, c5, 7, 7, generator=g).relu(),
    )


@pytest.fixture(scope="session")
def synth_index(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth") / "images"
    return generate_synthetic_faces(str(root), 8, 20, seed=0)


@pytest.fixture(scope="session")
def synth_store(synth_index):
    return ImageStore(synth_index)


@pytest.fixture(scope="session")
def desk_encoder(synth_index):
    enc, report = train_desk_encoder(synth_index, EncoderTrainConfig(), seed=0)
    return enc, report


@pytest.fixture()
def tiny_generator():
    return init_generator(TINY_GEN, seed=0)


@pytest.fixture()
def tiny_encoder():
    torch.manual_seed(0)
    return FaceEncoder(TINY_ENC).freeze()
