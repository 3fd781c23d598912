import pytest

from crossmodal_kd.config import load_config


def small_config(out_dir, **overrides):
    """Short synthetic run: 600 steps of sine_mix, 48-step lookback, 12-step horizon."""
    base = {
        "synth-length": 600, "synth-channels": 2, "periodicity": 12, "seq-len": 48, "pred-len": 12,
        "batch-size": 16, "train-epochs": 2, "max-steps-per-epoch": 4, "out-dir": str(out_dir),
    }
    base.update(overrides)
    return load_config(None, base)


@pytest.fixture
def small(tmp_path):
    def make(sub="run", **overrides):
        return small_config(tmp_path / sub, **overrides)
    return make
