import csv
import struct

import pytest

from importantaug import checkpoint, evaluation
from importantaug.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main

FAST = ["--set", "optim.max_epochs=1", "--set", "optim.patience=1", "--set", "optim.batch_size=16"]


def run(*argv):
    return main([str(a) for a in argv])


def _log_without_wall_time(path):
    with open(path, encoding="utf-8") as fh:
        return [row[:-1] for row in csv.reader(fh)]


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("make-toy", "--out", root / "toy", "--set", "toy.n_per_class=5", "--set", "toy.n_noise=4") == EXIT_OK
    cfg = root / "toy" / "config.json"
    runs = root / "toy" / "runs"
    assert run("train-baseline", "--config", cfg, *FAST) == EXIT_OK
    assert run("train-generator", "--config", cfg, *FAST, "--baseline", runs / "baseline.ckpt") == EXIT_OK
    return cfg, runs


def test_make_toy_layout_and_determinism(toy, tmp_path):
    cfg, runs = toy
    root = cfg.parent
    assert (root / "speech" / "validation_list.txt").is_file()
    assert (root / "speech" / "testing_list.txt").is_file()
    assert (root / "cue_regions.json").is_file() and (root / "manifest.csv").is_file()
    assert run("make-toy", "--out", tmp_path / "again", "--set", "toy.n_per_class=5", "--set", "toy.n_noise=4") == 0
    for rel in ["manifest.csv", "cue_regions.json", "speech/class1/toy1_00002.wav"]:
        assert (root / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()


def test_baseline_reloads_and_reruns_identically(toy):
    cfg, runs = toy
    ckpt = checkpoint.load(runs / "baseline.ckpt", "recognizer")
    assert ckpt.meta["words"] == ["class0", "class1", "class2", "class3"]
    before, log = (runs / "baseline.ckpt").read_bytes(), _log_without_wall_time(runs / "baseline_log.csv")
    assert run("train-baseline", "--config", cfg, *FAST) == EXIT_OK
    assert (runs / "baseline.ckpt").read_bytes() == before
    assert _log_without_wall_time(runs / "baseline_log.csv") == log and len(log) == 2


def test_generator_leaves_baseline_untouched(toy):
    cfg, runs = toy
    base, gen = (runs / "baseline.ckpt").read_bytes(), (runs / "generator.ckpt").read_bytes()
    assert run("train-generator", "--config", cfg, *FAST, "--baseline", runs / "baseline.ckpt") == EXIT_OK
    assert (runs / "baseline.ckpt").read_bytes() == base
    assert (runs / "generator.ckpt").read_bytes() == gen


@pytest.mark.parametrize("kind", ["importantaug", "null-importantaug", "conventional"])
def test_stage_two_is_deterministic(toy, kind):
    cfg, runs = toy
    args = ["train-importantaug", "--config", cfg, *FAST, "--set", f"policy.kind={kind}",
            "--baseline", runs / "baseline.ckpt", "--generator", runs / "generator.ckpt"]
    assert run(*args) == EXIT_OK
    first = (runs / f"recognizer_{kind}.ckpt").read_bytes()
    assert run(*args) == EXIT_OK
    assert (runs / f"recognizer_{kind}.ckpt").read_bytes() == first


def test_evaluate_clean_and_grid(toy, tmp_path):
    cfg, runs = toy
    ck = f"base={runs / 'baseline.ckpt'}"
    assert run("evaluate", "--config", cfg, "--checkpoint", ck, "--out", tmp_path / "c.csv") == EXIT_OK
    assert len(evaluation.read_table(tmp_path / "c.csv")) == 1
    for name in ("g1.csv", "g2.csv"):
        assert run("evaluate", "--config", cfg, "--checkpoint", ck, "--testset", "noisy-grid",
                   "--out", tmp_path / name) == EXIT_OK
    rows = evaluation.read_table(tmp_path / "g1.csv")
    assert [r.snr_db for r in rows] == [-12.5, -10, 0, 10, 20, 30, 40]
    assert (tmp_path / "g1.csv").read_bytes() == (tmp_path / "g2.csv").read_bytes()


def test_sweep_rows_and_best_marker(toy, tmp_path):
    cfg, runs = toy
    args = ["sweep", "--config", cfg, *FAST, "--kind", "noiseaug-snr", "--set", 'sweep.noiseaug_snr_grid=["inf", 0]',
            "--set", "sweep.dev_snr_grid=[0]", "--baseline", runs / "baseline.ckpt"]
    assert run(*args, "--out", tmp_path / "a.csv") == EXIT_OK
    assert run(*args, "--out", tmp_path / "b.csv") == EXIT_OK
    rows = evaluation.read_table(tmp_path / "a.csv")
    assert [r.condition for r in rows] == ["noiseaug dev", "noiseaug dev", "best"]
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_export_masks_deterministic(toy, tmp_path):
    cfg, runs = toy
    ids = ["class0/toy0_00000.wav", "class2/toy2_00001.wav"]
    for out in ("a", "b"):
        assert run("export-masks", "--config", cfg, "--generator", runs / "generator.ckpt",
                   "--ids", *ids, "--out", tmp_path / out) == EXIT_OK
    for name in ("class0__toy0_00000.png", "class2__toy2_00001.png"):
        img = evaluation.read_mask_image(tmp_path / "a" / name)
        assert img.shape == (257, 126)
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestExitCodes:
    def test_missing_corpus_names_field(self, capsys):
        assert run("train-baseline", "--set", "data.speech_root=/does/not/exist") == EXIT_USAGE
        assert "data.speech_root" in capsys.readouterr().err

    def test_unknown_flag_value(self, toy):
        with pytest.raises(SystemExit) as exc:
            run("evaluate", "--config", toy[0], "--checkpoint", "a=b", "--testset", "bogus")
        assert exc.value.code == 2

    def test_unknown_config_key(self, toy):
        assert run("train-baseline", "--config", toy[0], "--set", "optim.bogus=1") == EXIT_USAGE

    def test_stft_mismatch_refused(self, toy, capsys):
        cfg, runs = toy
        assert run("evaluate", "--config", cfg, "--set", "stft.amplitude_floor=0.001",
                   "--checkpoint", f"a={runs / 'baseline.ckpt'}") == EXIT_USAGE
        assert "STFT" in capsys.readouterr().err

    def test_checkpoint_version_mismatch(self, toy, tmp_path):
        cfg, runs = toy
        blob = bytearray((runs / "baseline.ckpt").read_bytes())
        struct.pack_into("<I", blob, 8, 2)
        (tmp_path / "old.ckpt").write_bytes(bytes(blob))
        assert run("train-generator", "--config", cfg, *FAST, "--baseline", tmp_path / "old.ckpt") == EXIT_DATA

    def test_wrong_checkpoint_kind(self, toy):
        cfg, runs = toy
        assert run("evaluate", "--config", cfg, "--checkpoint", f"g={runs / 'generator.ckpt'}") == EXIT_DATA

    def test_none_policy_rejected(self, toy):
        cfg, runs = toy
        assert run("train-importantaug", "--config", cfg, "--set", "policy.kind=none",
                   "--baseline", runs / "baseline.ckpt") == EXIT_USAGE
