import pytest
from hypothesis import given, strategies as st

from pagmil_lab.cl_harness import NAIVE, ExperimentConfig
from pagmil_lab.config import config_to_yaml, load_config, parse_config, validate_config
from pagmil_lab.errors import ConfigError


def test_empty_config_is_default():
    assert parse_config("")[0] == ExperimentConfig()


def test_partial_config_keeps_defaults():
    cfg, _ = parse_config("method: naive-baseline\ndata:\n  n_train: 10\noptim:\n  lr: 0.05\n")
    assert cfg.method == NAIVE and cfg.data.n_train == 10 and cfg.optim.lr == 0.05
    assert cfg.data.n_test == ExperimentConfig().data.n_test


def test_default_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(config_to_yaml(cfg))[0] == cfg


@given(st.integers(0, 2 ** 32), st.integers(1, 5), st.floats(1e-4, 1.0), st.sampled_from([[0, 1, 2, 3], [3, 1, 0, 2]]),
       st.integers(5, 12))
def test_round_trip_property(seed, epochs, lr, order, hi):
    cfg = ExperimentConfig(seed=seed, epochs=epochs, task_order=order)
    cfg.optim.lr = lr
    cfg.data.blob_size_range = (4, hi)
    text = config_to_yaml(cfg)
    back = parse_config(text)[0]
    assert back == cfg and config_to_yaml(back) == text


@pytest.mark.parametrize("text, line, fragment", [
    ("seed: 1\ndata:\n  grid_size: 2\n", 3, "data.grid_size: must be >= 8, got 2"),
    ("seed: 1\nbogus: 3\n", 2, "unknown key 'bogus'"),
    ("data:\n  n_train: 10\n  colour: red\n", 3, "unknown key 'data.colour'"),
    ("epochs: three\n", 1, "epochs must be an integer"),
    ("data:\n  sigma: true\n", 2, "must be a number"),
    ("method: magic\n", 1, "method: must be one of"),
    ("selector:\n  k_percent: 0\n", 2, "selector.k_percent"),
    ("task_order: [0, 0, 1, 2]\n", 1, "permutation"),
    ("data:\n  class_counts: [2, 3]\n", 1, "offset_norms"),
    ("data:\n  blob_size_range: [1, 5]\n", 2, "2 <= min <= max"),
    ("data:\n  min_blobs: 0\n", 2, "data.min_blobs: must be between 1 and 3"),
    ("data:\n  min_blobs: 3\n  max_blobs: 2\n", 3, "must be >= data.min_blobs"),
    ("optim:\n  momentum: 1.0\n", 2, "optim.momentum"),
    ("prompt:\n  inter_variant: other\n", 2, "inter_variant"),
    ("data: 5\n", 1, "must be a mapping"),
    ("seed: 1\nseed: 2\n", 2, "duplicate key"),
])
def test_errors_cite_line(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "cfg.yaml")
    msg = str(exc.value)
    assert msg.startswith(f"cfg.yaml:{line}:") and fragment in msg


def test_invalid_yaml():
    with pytest.raises(ConfigError, match="invalid YAML"):
        parse_config("a: [1, 2\n", "c.yaml")


def test_non_mapping_top_level():
    with pytest.raises(ConfigError, match="top level"):
        parse_config("- 1\n- 2\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.yaml")


def test_validate_programmatic_config():
    cfg = ExperimentConfig(epochs=0)
    with pytest.raises(ConfigError, match="epochs"):
        validate_config(cfg)
