"""End-to-end CLI runs on a tiny dataset with a one-epoch config."""

import json

import pytest
from click.testing import CliRunner

from mmgl.cli import CHECKPOINT_NAME, main
from mmgl.metrics import read_records_csv
from mmgl.trainer import JOURNAL_NAME, load_checkpoint


def run_cli(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def all_output(result) -> str:
    try:
        return result.output + result.stderr
    except (ValueError, AttributeError):
        return result.output


def assert_ok(result):
    assert result.exit_code == 0, all_output(result) or repr(result.exception)


CONFIG_TOML = """
[data]
manifest = {manifest!r}
labeled_fraction = 0.5

[model]
base_channels = 4

[stages.global]
epochs = 1
batch_size = 4
slice_step = 8

[stages.local]
epochs = 1
batch_size = 2
slice_step = 8

[stages.finetune]
epochs = 1
batch_size = 2
learning_rate = 1e-3
slice_step = 8
val_slice_step = 16
augment = false
"""


@pytest.fixture(scope="module")
def work(tmp_path_factory, tiny_ds_dir):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.toml"
    cfg_path.write_text(CONFIG_TOML.format(manifest=str(tiny_ds_dir / "manifest.json")))
    return root


@pytest.fixture(scope="module")
def global_run(work):
    out = work / "g"
    assert_ok(run_cli("pretrain-global", "--config", work / "config.toml", "--out", out))
    return out


@pytest.fixture(scope="module")
def local_run(work, global_run):
    out = work / "l"
    assert_ok(
        run_cli(
            "pretrain-local", "--config", work / "config.toml", "--out", out,
            "--init", global_run / CHECKPOINT_NAME,
        )
    )
    return out


@pytest.fixture(scope="module")
def finetune_run(work, local_run):
    out = work / "f"
    assert_ok(
        run_cli(
            "finetune", "--config", work / "config.toml", "--out", out,
            "--init", local_run / CHECKPOINT_NAME,
        )
    )
    return out


class TestSynthData:
    def test_writes_dataset(self, tmp_path):
        out = tmp_path / "ds"
        result = run_cli(
            "synth-data", "--count", 4, "--seed", 3, "--out", out,
            "--shape", "24,24,24", "--structures", 3,
        )
        assert_ok(result)
        assert "wrote 4 volumes" in result.output
        assert (out / "manifest.json").exists()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert "manifest.json" in manifest["outputs"]

    def test_refuses_nonempty_dir(self, tmp_path):
        out = tmp_path / "ds"
        out.mkdir()
        (out / "existing.txt").write_text("x")
        result = run_cli("synth-data", "--count", 4, "--out", out, "--shape", "24,24,24")
        assert result.exit_code != 0
        assert "--force" in all_output(result)
        assert_ok(
            run_cli(
                "synth-data", "--count", 4, "--out", out,
                "--shape", "24,24,24", "--structures", 3, "--force",
            )
        )

    def test_bad_shape_is_friendly(self, tmp_path):
        result = run_cli("synth-data", "--out", tmp_path / "x", "--shape", "8,8,8")
        assert result.exit_code != 0
        assert result.exception is None or isinstance(result.exception, SystemExit)


class TestStageCommands:
    def test_global_outputs(self, global_run):
        for name in (CHECKPOINT_NAME, JOURNAL_NAME, "resolved_config.json",
                     "split.json", "run_manifest.json"):
            assert (global_run / name).exists()
        ck = load_checkpoint(global_run / CHECKPOINT_NAME)
        assert ck.stage == "global_pretrain"
        resolved = json.loads((global_run / "resolved_config.json").read_text())
        assert resolved["model"]["base_channels"] == 4

    def test_local_requires_init(self, work):
        result = run_cli(
            "pretrain-local", "--config", work / "config.toml",
            "--out", work / "l_noinit",
        )
        assert result.exit_code != 0
        assert "init checkpoint" in all_output(result)

    def test_local_outputs(self, local_run):
        ck = load_checkpoint(local_run / CHECKPOINT_NAME)
        assert ck.stage == "local_pretrain"

    def test_finetune_outputs(self, finetune_run):
        ck = load_checkpoint(finetune_run / CHECKPOINT_NAME)
        assert ck.stage == "finetune"
        assert ck.train_state.best_val_dice is not None
        journal = (finetune_run / JOURNAL_NAME).read_text().splitlines()
        assert journal[0] == "epoch,total,val_dice"

    def test_finetune_rejects_global_init(self, work, global_run):
        result = run_cli(
            "finetune", "--config", work / "config.toml",
            "--out", work / "f_bad", "--init", global_run / CHECKPOINT_NAME,
        )
        assert result.exit_code != 0

    def test_out_dir_guard(self, work, global_run):
        result = run_cli(
            "pretrain-global", "--config", work / "config.toml", "--out", global_run
        )
        assert result.exit_code != 0
        assert "already has contents" in all_output(result)


class TestEvaluate:
    def test_records_and_overlays(self, work, finetune_run):
        out = work / "eval"
        result = run_cli(
            "evaluate", "--config", work / "config.toml",
            "--checkpoint", finetune_run / CHECKPOINT_NAME,
            "--out", out, "--split", "val",
        )
        assert_ok(result)
        assert "mean dice" in result.output
        records = read_records_csv(out / "records.csv")
        # one val volume plus the aggregate row
        assert len(records) == 2
        assert all(r.run == "evaluate-val" for r in records)
        assert list(out.glob("overlay_*.png"))

    def test_no_overlays_flag(self, work, finetune_run):
        out = work / "eval_plain"
        assert_ok(
            run_cli(
                "evaluate", "--config", work / "config.toml",
                "--checkpoint", finetune_run / CHECKPOINT_NAME,
                "--out", out, "--split", "val", "--no-overlays",
            )
        )
        assert not list(out.glob("overlay_*.png"))


class TestAblateAndReport:
    def test_single_arm_ablation(self, work):
        out = work / "abl"
        result = run_cli(
            "ablate", "--config", work / "config.toml", "--out", out,
            "--arms", "random", "--seeds", "0",
        )
        assert_ok(result)
        assert "ablation report" in result.output
        assert (out / "records.csv").exists()
        assert (out / "report_mean_dice.png").exists()
        assert (out / "arms" / "random" / "seed0" / "finetune" / JOURNAL_NAME).exists()

    def test_report_from_records(self, work):
        src = work / "abl" / "records.csv"
        out = work / "rep"
        result = run_cli("report", "--records", src, "--out", out)
        assert_ok(result)
        for metric in ("mean_dice", "miou", "pixacc"):
            assert (out / f"report_{metric}.png").exists()

    def test_report_rejects_empty(self, work, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("run,seed\n")
        result = run_cli("report", "--records", empty, "--out", tmp_path / "rep")
        assert result.exit_code != 0
        assert "no records" in all_output(result)

    def test_unknown_arm_is_friendly(self, work, tmp_path):
        result = run_cli(
            "ablate", "--config", work / "config.toml",
            "--out", tmp_path / "abl2", "--arms", "bogus", "--seeds", "0",
        )
        assert result.exit_code != 0
        assert "unknown ablation arm" in all_output(result)
