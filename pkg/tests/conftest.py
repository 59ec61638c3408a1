from __future__ import annotations

import pytest

from pflfe.data_synth import ClientDataConfig, ClientDataset, gen_client_dataset
from pflfe.segnet import ModelConfig

TINY_MODEL = ModelConfig(image_side=16, encoder_widths=(4, 8), decoder_widths=(8, 4), projector_hidden=8,
                         projector_out=8)

TINY_CLIENTS = [
    dict(shape_family="ellipse", intensity_fg_range=(0.65, 0.85), intensity_bg_range=(0.10, 0.30)),
    dict(shape_family="rectangle", intensity_fg_range=(0.10, 0.30), intensity_bg_range=(0.60, 0.80)),
    dict(shape_family="blob", intensity_fg_range=(0.55, 0.75), intensity_bg_range=(0.25, 0.45)),
]


def tiny_datasets(seed: int = 0, n: int = 3, num_train: int = 8, num_test: int = 4):
    out = []
    for i, kw in enumerate(TINY_CLIENTS[:n]):
        cfg = ClientDataConfig(client_id=i, num_train=num_train, num_test=num_test, image_side=16,
                               object_scale_range=(0.2, 0.35), **kw)
        train, test = gen_client_dataset(cfg, seed)
        out.append((ClientDataset.from_samples(train), ClientDataset.from_samples(test)))
    return out


@pytest.fixture
def datasets():
    return tiny_datasets()


TINY_TOML = """
[model]
image_side = 16
encoder_widths = [4, 8]
decoder_widths = [8, 4]
projector_hidden = 8
projector_out = 8

[federation]
threads = 1

[protocol]
name = "pflfe"
rounds = 2
batch_size = 4
adapt_rounds = 1
adapt_epochs = 1

[data]
num_train = 8
num_test = 4
[[data.clients]]
shape_family = "ellipse"
intensity_fg_range = [0.65, 0.85]
intensity_bg_range = [0.10, 0.30]
object_scale_range = [0.2, 0.35]
[[data.clients]]
shape_family = "rectangle"
intensity_fg_range = [0.10, 0.30]
intensity_bg_range = [0.60, 0.80]
object_scale_range = [0.2, 0.35]
[[data.clients]]
shape_family = "blob"
intensity_fg_range = [0.55, 0.75]
intensity_bg_range = [0.25, 0.45]
object_scale_range = [0.2, 0.35]

[seeds]
values = [3]

[output]
features_per_class = 20
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML)
    return str(path)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
