import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smla.config import RunConfig
from smla.errors import ConfigError
from smla.model import ABLATIONS


def test_text_roundtrip():
    rc = RunConfig.desk().with_ablation("sap")
    again = RunConfig.from_text(rc.to_text())
    assert again == rc
    assert again.to_text() == rc.to_text()


@settings(max_examples=30)
@given(lr=st.floats(1e-5, 1.0), epochs=st.integers(0, 500), frames=st.integers(10, 2000),
       ablation=st.sampled_from(list(ABLATIONS)))
def test_roundtrip_property(lr, epochs, frames, ablation):
    rc = RunConfig.desk().with_ablation(ablation)
    rc.train.lr, rc.train.epochs, rc.frontend.target_frames = lr, epochs, frames
    assert RunConfig.from_text(rc.to_text()) == rc


@pytest.mark.parametrize("name", list(ABLATIONS))
def test_ablation_selector(name):
    rc = RunConfig.from_text(f"[run]\nablation = {name}\n")
    assert (rc.model.encoding_mode, rc.model.use_fr, rc.model.use_dln) == ABLATIONS[name]
    assert rc.model.ablation == name


def test_unknown_ablation_lists_names():
    with pytest.raises(ConfigError) as err:
        RunConfig().with_ablation("mla-gap-fr")
    for name in ABLATIONS:
        assert name in str(err.value)


@pytest.mark.parametrize("text", ["[model]\nchanels = 1,2,3,4,5\n", "[optim]\nlr = 0.1\n",
                                  "[train]\nlr = fast\n", "[train]\naugment = maybe\n",
                                  "[model]\nencoding_mode = tap\n", "not a config"])
def test_rejects_bad_text(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text)


def test_partial_text_overrides_base():
    rc = RunConfig.from_text("[train]\nepochs = 3\n# comment\n[model]\nchannels = 4,4,8,8,16\n",
                             base=RunConfig.desk())
    assert rc.train.epochs == 3
    assert rc.model.channels == (4, 4, 8, 8, 16)
    assert rc.train.batch_size == 32


def test_presets():
    desk, full = RunConfig.desk(), RunConfig.full()
    assert (desk.frontend.target_frames, desk.train.batch_size, desk.train.epochs) == (300, 32, 30)
    assert (full.frontend.target_frames, full.train.batch_size, full.train.epochs) == (1200, 96, 200)
    assert full.model.channels == (32, 32, 64, 128, 256) and full.model.blocks == (3, 4, 6, 3)
    assert (full.train.lr, full.train.momentum, full.train.weight_decay) == (0.1, 0.9, 1e-4)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "none.cfg")
