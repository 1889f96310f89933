import pytest

TINY_CONFIG = """\
# smallest settings that exercise every stage
image_size = 32
T = 20
beta_end = 0.2
depth = 2
seg_width = 4
denoiser_width = 4
time_dim = 8
spade_hidden = 4
n_source = 12
n_target = 8
n_test = 4
epochs_seg = 2
epochs_diffusion = 2
epochs_finetune = 1
epochs_oracle = 1
epochs_grid = 1
batch_size = 4
clahe_tiles = 2
clahe_bins = 16
pollution_grid = 0, 0.6 x 0, 0.3
n_grid_train = 6
n_grid_eval = 3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.txt"
    path.write_text(TINY_CONFIG)
    return path


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
