import pytest
import torch

from pivotae.arch import desk_preset

TINY = dict(
    image_size=32,
    rep_dim=48,
    latent_dim=8,
    encoder_layers=2,
    encoder_heads=2,
    bridge_hidden=48,
    decoder_hidden=48,
    decoder_layers=1,
    decoder_heads=2,
    disc_hidden=32,
    disc_layers=1,
)

TINY_CONFIG = """\
[run]
seed = 3

[arch]
preset = desk
image_size = 32
rep_dim = 48
latent_dim = 8
encoder_layers = 2
encoder_heads = 2
bridge_hidden = 48
decoder_hidden = 48
decoder_layers = 1
decoder_heads = 2
disc_hidden = 32
disc_layers = 1

[data]
root = synthetic:24
val_fraction = 0.25

[optim]
batch_size = 8

[stage1]
max_steps = 4
[stage2]
max_steps = 4
[stage3]
max_steps = 4

[probe]
steps = 20
eval_every = 10
width = 32
num_samples = 16
"""


@pytest.fixture
def tiny_arch():
    return desk_preset(**TINY)


@pytest.fixture
def tiny_images(tiny_arch):
    g = torch.Generator().manual_seed(0)
    return torch.rand(6, 3, tiny_arch.image_size, tiny_arch.image_size, generator=g) * 2 - 1


@pytest.fixture
def tiny_config_path(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CONFIG)
    return p


ACCEPTANCE_RESULTS = []


def record_criterion(number, title, passed, detail):
    """Store one acceptance outcome; all outcomes are printed at session end."""
    ACCEPTANCE_RESULTS.append((number, title, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {title}: {detail}")
