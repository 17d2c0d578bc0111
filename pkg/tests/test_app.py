import pytest

import pullseg.analysis.report
import pullseg.app
import pullseg.data.netpbm
from pullseg.trainer import config


@pytest.fixture
def config_file(tmp_path, micro_cfg):
    return config.save(micro_cfg, tmp_path / "cfg")


def _exit_code(argv):
    with pytest.raises(SystemExit) as exc:
        pullseg.app.main(argv)
    return exc.value.code


def test_usage_errors():
    assert _exit_code([]) == 2
    assert _exit_code(["train"]) == 2


def test_config_errors_exit_with_two(tmp_path, config_file):
    argv = ["train", "--config", str(config_file), "--out", str(tmp_path / "run")]
    assert _exit_code(argv + ["--set", "colour=red"]) == 2
    assert _exit_code(argv + ["--set", "tau=0"]) == 2


def test_io_errors_exit_with_three(tmp_path):
    assert _exit_code(["train", "--config", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 3
    assert _exit_code(
        ["translate", "--src", str(tmp_path / "empty"), "--out", str(tmp_path / "out")]
    ) == 3


def test_end_to_end(tmp_path, config_file):
    data, run, report = tmp_path / "data", tmp_path / "run", tmp_path / "report"
    pullseg.app.main(["generate", "--config", str(config_file), "--out", str(data)])
    assert (data / "held_out" / "manifest.txt").is_file()

    pullseg.app.main(
        ["train", "--config", str(config_file), "--data", str(data), "--out", str(run),
         "--set", "iters=2"]
    )
    ckpt = run / "ckpt_000002.ckpt"
    assert ckpt.is_file() and (run / "losses.csv").is_file()

    pullseg.app.main(["eval", "--ckpt", str(ckpt), "--data", str(data)])
    pullseg.app.main(
        ["analyze", "--ckpt", str(ckpt), "--data", str(data), "--out", str(report),
         "--predictions"]
    )
    assert (report / "metrics.csv").is_file()
    metrics = {row.metric for row in pullseg.analysis.report.read_metrics(report)}
    assert {"miou", "source_miou", "source_iou"} <= metrics
    assert (report / "predictions" / "pred_0.ppm").is_file()

    pullseg.app.main(
        ["translate", "--src", str(data / "source"), "--ref", str(data / "target"),
         "--out", str(tmp_path / "pseudo"), "--beta", "0.1"]
    )
    translated = pullseg.data.netpbm.load_dataset(tmp_path / "pseudo")
    assert translated.domain_tag == "source" and len(translated) == 6

    pairs = tmp_path / "pairs.csv"
    pullseg.app.main(["dump-pairs", "--config", str(config_file), "--out", str(pairs)])
    assert pairs.read_text().strip()


def test_fda_translation_needs_a_reference(tmp_path, config_file):
    data = tmp_path / "data"
    pullseg.app.main(["generate", "--config", str(config_file), "--out", str(data)])
    argv = ["translate", "--src", str(data / "source"), "--out", str(tmp_path / "x")]
    assert _exit_code(argv) == 2
    pullseg.app.main(argv + ["--engine", "gaussian_blur", "--sigma", "0.5"])


def test_checkpoint_commands_ignore_the_seed_override(tmp_path, config_file, monkeypatch):
    run = tmp_path / "run"
    pullseg.app.main(
        ["train", "--config", str(config_file), "--out", str(run), "--set", "iters=0"]
    )
    monkeypatch.setenv("T2S_SEED", "99")
    pullseg.app.main(["eval", "--ckpt", str(run / "ckpt_000000.ckpt")])
    pullseg.app.main(
        ["analyze", "--ckpt", str(run / "ckpt_000000.ckpt"), "--out", str(tmp_path / "report")]
    )
    assert (tmp_path / "report" / "metrics.csv").is_file()
