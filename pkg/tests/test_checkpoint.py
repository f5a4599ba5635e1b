import numpy as np
import pytest

from pagmil_lab.checkpoint import dumps_model, load_model, loads_model, save_model
from pagmil_lab.errors import CheckpointError
from pagmil_lab.mil_core import ModelState
from pagmil_lab.prompt_guide import finalize_task, generate_prompt


def trained_like(seed=0):
    m = ModelState.init(5, 4, hidden=6, gen_hidden=7, p_dim=3, min_margin=1.5, seed=seed)
    m.heads.new_head(2, 5, init_seed=1, task_id=0)
    finalize_task(np.random.default_rng(seed).normal(size=(4, 3)), m.prompts, 0, 0)
    m.heads.freeze_active()
    m.heads.new_head(4, 5, init_seed=2, task_id=1)
    return m


def test_round_trip_is_bit_exact(tmp_path):
    m = trained_like()
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    back = load_model(path)
    assert back.snapshot() == m.snapshot()
    assert dumps_model(back) == path.read_bytes()
    assert back.heads.active_id == 1 and back.prompts.min_margin == 1.5


def test_loaded_model_keeps_freeze_state():
    back = loads_model(dumps_model(trained_like()))
    assert back.heads.heads[0].frozen and not back.heads.heads[1].frozen
    with pytest.raises(ValueError):
        back.heads.heads[0].W[0, 0] = 1.0
    with pytest.raises(ValueError):
        back.prompts.entries[0].mean[0] = 1.0
    back.heads.heads[1].W[0, 0] = 1.0   # the active head stays trainable


def test_loaded_model_computes_the_same_prompts():
    m = trained_like()
    back = loads_model(dumps_model(m))
    thumb = np.random.default_rng(3).uniform(size=(4, 4, 3))
    assert generate_prompt(thumb, m.gen).tobytes() == generate_prompt(thumb, back.gen).tobytes()


@pytest.mark.parametrize("mangle", [
    lambda b: b"not a checkpoint\n",
    lambda b: b.replace(b"pagmil-ckpt 1", b"pagmil-ckpt 9", 1),
    lambda b: b[: len(b) // 2],
    lambda b: b.replace(b"end\n", b"fin\n"),
    lambda b: b.replace(b"dims dim=5", b"dims dim=x", 1),
    lambda b: b.replace(b"tensor attn.V", b"tensor attn.Q", 1),
    lambda b: b.replace(b"dims dim=5", b"dims dim=6", 1),
])
def test_corrupt_checkpoints_rejected(mangle):
    with pytest.raises(CheckpointError):
        loads_model(mangle(dumps_model(trained_like())))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_model(tmp_path / "none.ckpt")
