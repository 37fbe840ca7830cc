import pytest

TINY_TOML = """
profile = "tiny"

[dataset]
seed = 7
duration_s = 1.0
save_images = false

[[dataset.splits]]
name = "train"
counts = { "2" = 3 }
sir_mode = "zero"

[[dataset.splits]]
name = "val"
counts = { "2" = 2 }
sir_mode = "zero"

[[dataset.splits]]
name = "test"
counts = { "2" = 2 }
sir_mode = "random"

[[dataset.splits]]
name = "test_small"
counts = { "2" = 2 }
sir_mode = "zero"
small_angle = true
max_gap = 15

[features]
bin_lo = 8
bin_hi = 24

[model]
n_max = 2
trunk_fc = 8
trunk_gru = 8
trunk_gru_layers = 1
sps_fc = 8
sps_gru = 8
sps_gru_layers = 1
trace_norm = true
precision = "float32"

[train]
lr = 1e-3
batch_size = 2
max_epochs = 2

[eval]
splits = ["test", "test_small"]
sweep_split = "test"
threshold = 0.3
"""


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    path.write_text(TINY_TOML)
    return path


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
