import json
import math

import pytest

from importantaug.config import DEFAULT_SNR_GRID, Q_LIST, RunConfig, load_config
from importantaug.errors import InvalidConfigError


def test_defaults():
    cfg = RunConfig()
    assert cfg.sweep.dev_snr_grid == DEFAULT_SNR_GRID == (-12.5, -10.0, 0.0, 10.0, 20.0, 30.0, 40.0)
    assert cfg.sweep.q_list == Q_LIST
    assert cfg.sweep.noiseaug_snr_grid[0] == math.inf
    assert cfg.policy.snr_db == -12.5 and cfg.optim.batch_size == 256


def test_json_round_trip(tmp_path):
    cfg = RunConfig(seed=3).with_overrides(["optim.max_epochs=4", "optim.patience=2", "policy.kind=null-importantaug"])
    path = cfg.save(tmp_path / "c.json")
    doc = json.loads(path.read_text(encoding="utf-8"))
    assert doc["sweep"]["noiseaug_snr_grid"][0] == "inf"
    back = load_config(path)
    assert back == cfg and back.to_json() == cfg.to_json()


def test_override_types():
    cfg = load_config(None, ["seed=7", "loss.lambda_e=2", "eval.snr_grid=[0, \"inf\"]", "data.speech_root=/x"])
    assert cfg.seed == 7 and cfg.loss.lambda_e == 2.0
    assert cfg.eval.snr_grid == (0.0, math.inf)
    assert cfg.data.speech_root == "/x"


@pytest.mark.parametrize("override,match", [
    ("optim.foo=1", "unknown config key"),
    ("seed=-1", "seed"),
    ("optim.batch_size=abc", "optim"),
    ("policy.kind=specaugment", "policy"),
    ("sweep.q_list=[]", "q_list"),
    ("eval.snr_grid=[\"nan\"]", "eval"),
    ("noequals", "key=value"),
])
def test_rejections(override, match):
    with pytest.raises(InvalidConfigError, match=match):
        load_config(None, [override])


def test_missing_file(tmp_path):
    with pytest.raises(InvalidConfigError, match="not found"):
        load_config(tmp_path / "nope.json")


def test_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{", encoding="utf-8")
    with pytest.raises(InvalidConfigError, match="invalid JSON"):
        load_config(tmp_path / "c.json")
