"""End-to-end tests of the command-line interface and its exit-code contract."""

import json
import os

import pytest

from microdrive import cli
from microdrive.cli import main

TINY_CONFIG = {
    "seed": 0,
    "frame_stride": 6,
    "frames_per_episode": 1,
    "perception": {"d_model": 16, "view_channels": 4, "bev_resolution": 16,
                   "n_heads": 2, "n_agent_queries": 8, "n_map_queries": 4},
    "lm": {"d_model": 16, "n_layers": 1, "n_heads": 2},
    "stages": {s: {"lr": 1e-3, "epochs": 1}
               for s in ("s0", "s1", "s2", "s2.5", "s3")},
}


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, config_path):
    out = str(tmp_path_factory.mktemp("data"))
    assert main(["gen-data", "--config", config_path, "--out", out,
                 "--episodes", "2", "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def ckpt_dir(tmp_path_factory, config_path, data_dir):
    out = str(tmp_path_factory.mktemp("ckpt"))
    assert main(["train", "--stage", "all", "--data", data_dir,
                 "--ckpt", out, "--config", config_path]) == 0
    return out


# --- gen-data ------------------------------------------------------------------


def test_gen_data_outputs_exist(data_dir):
    files = ["world.jsonl", "stage1_align.jsonl", "stage2_qa.jsonl",
             "stage25_forecast.jsonl", "stage3_plan.jsonl",
             "run_manifest.json"]
    for fname in files:
        assert os.path.exists(os.path.join(data_dir, fname))


def test_gen_data_printed_counts_match_line_counts(tmp_path, config_path, capsys):
    out = str(tmp_path / "d")
    assert main(["gen-data", "--config", config_path, "--out", out,
                 "--episodes", "2", "--seed", "3"]) == 0
    printed = dict(line.split() for line in capsys.readouterr().out.strip().split("\n"))
    from microdrive.annotate import STAGE_FILES
    for stage, fname in STAGE_FILES.items():
        with open(os.path.join(out, fname)) as f:
            n = sum(1 for line in f if line.strip())
        assert int(printed[stage]) == n
    with open(os.path.join(out, "world.jsonl")) as f:
        assert int(printed["episodes"]) == sum(1 for _ in f)


def test_gen_data_zero_episodes_is_schema_valid(tmp_path, capsys):
    out = str(tmp_path / "empty")
    assert main(["gen-data", "--out", out, "--episodes", "0"]) == 0
    from microdrive import world
    assert world.read_episodes_jsonl(os.path.join(out, "world.jsonl")) == []
    from microdrive.annotate import STAGE_FILES, read_records
    for fname in STAGE_FILES.values():
        assert read_records(os.path.join(out, fname)) == []


def test_gen_data_deterministic(tmp_path, config_path):
    outs = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        assert main(["gen-data", "--config", config_path, "--out", out,
                     "--episodes", "2", "--seed", "5"]) == 0
        with open(os.path.join(out, "world.jsonl"), "rb") as f:
            outs.append(f.read())
    assert outs[0] == outs[1]


def test_gen_data_out_path_collision_is_io_error(tmp_path, capsys):
    target = tmp_path / "file"
    target.write_text("x")
    assert main(["gen-data", "--out", str(target), "--episodes", "1"]) == 1
    assert "error:" in capsys.readouterr().err


# --- seeds and manifest ----------------------------------------------------------


def _manifest_seed(out):
    with open(os.path.join(out, "run_manifest.json")) as f:
        return json.load(f)["seed"]


def test_seed_precedence_flag_env_file(tmp_path, config_path, monkeypatch):
    # config file says 0; env overrides file; flag overrides env
    monkeypatch.setenv(cli.SEED_ENV_VAR, "11")
    out = str(tmp_path / "env")
    assert main(["gen-data", "--config", config_path, "--out", out,
                 "--episodes", "0"]) == 0
    assert _manifest_seed(out) == 11
    out = str(tmp_path / "flag")
    assert main(["gen-data", "--config", config_path, "--out", out,
                 "--episodes", "0", "--seed", "22"]) == 0
    assert _manifest_seed(out) == 22
    monkeypatch.delenv(cli.SEED_ENV_VAR)
    out = str(tmp_path / "file")
    assert main(["gen-data", "--config", config_path, "--out", out,
                 "--episodes", "0"]) == 0
    assert _manifest_seed(out) == 0


def test_bad_env_seed_is_config_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.SEED_ENV_VAR, "not-a-number")
    assert main(["gen-data", "--out", str(tmp_path / "x"),
                 "--episodes", "0"]) == 2


def test_manifest_written_before_work_fails(tmp_path, capsys):
    # training against a missing data dir fails, but the manifest exists
    ckpt = str(tmp_path / "ckpt")
    assert main(["train", "--stage", "s0", "--data", str(tmp_path / "nope"),
                 "--ckpt", ckpt]) == 1
    with open(os.path.join(ckpt, "run_manifest.json")) as f:
        manifest = json.load(f)
    assert manifest["tool_version"]
    assert manifest["command_line"]


# --- train -----------------------------------------------------------------------


def test_train_all_writes_five_checkpoints(ckpt_dir):
    for stage in ("s0", "s1", "s2", "s25", "s3"):
        assert os.path.exists(os.path.join(ckpt_dir, stage, "manifest.json"))
        assert os.path.exists(os.path.join(ckpt_dir, stage, "params.pt"))
        with open(os.path.join(ckpt_dir, stage, "train_report.json")) as f:
            report = json.load(f)
        assert report["stage"] == stage
        assert len(report["losses"]) > 0


def test_train_stage_without_parent_exits_2(tmp_path, data_dir, config_path, capsys):
    code = main(["train", "--stage", "s2", "--data", data_dir,
                 "--ckpt", str(tmp_path / "ck"), "--config", config_path])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


def test_train_single_stage_from_parent(tmp_path, data_dir, config_path,
                                        ckpt_dir, capsys):
    import shutil
    ck = str(tmp_path / "ck")
    os.makedirs(ck)
    shutil.copytree(os.path.join(ckpt_dir, "s0"), os.path.join(ck, "s0"))
    assert main(["train", "--stage", "s1", "--data", data_dir,
                 "--ckpt", ck, "--config", config_path]) == 0
    with open(os.path.join(ck, "s1", "manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(ckpt_dir, "s0", "manifest.json")) as f:
        parent = json.load(f)
    assert manifest["parent_hash"] == parent["params_hash"]


# --- eval ------------------------------------------------------------------------


def test_eval_plan_suite(tmp_path, data_dir, ckpt_dir, config_path, capsys):
    out = str(tmp_path / "report.json")
    code = main(["eval", "--ckpt", os.path.join(ckpt_dir, "s3"),
                 "--data", data_dir, "--suite", "plan", "--out", out,
                 "--config", config_path])
    assert code == 0
    printed = capsys.readouterr().out
    for headline in ("stp3 avg L2", "stp3 avg collision",
                     "uniad avg L2", "uniad avg collision"):
        assert headline in printed
    with open(out) as f:
        report = json.load(f)
    assert set(report) == {"meta", "stp3", "uniad", "qa"}
    assert os.path.exists(str(tmp_path / "report.csv"))
    assert os.path.exists(str(tmp_path / "report_samples.jsonl"))


def test_eval_qa_suite(tmp_path, data_dir, ckpt_dir, config_path, capsys):
    out = str(tmp_path / "qa.json")
    code = main(["eval", "--ckpt", os.path.join(ckpt_dir, "s3"),
                 "--data", data_dir, "--suite", "qa", "--out", out,
                 "--config", config_path])
    assert code == 0
    printed = capsys.readouterr().out
    for n in ("1", "2", "3", "4"):
        assert f"BLEU-{n}" in printed
    for cat in ("existence", "counting", "object", "status", "comparison"):
        assert cat in printed
    with open(out) as f:
        assert "qa" in json.load(f)


def test_eval_unknown_suite_exits_2(tmp_path, data_dir):
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--data", data_dir, "--suite", "bogus",
              "--out", str(tmp_path / "r.json")])
    assert exc.value.code == 2


# --- infer -----------------------------------------------------------------------


def test_infer_dry_run_changes_only_mission_goal(data_dir, capsys):
    from microdrive import world
    episodes = world.read_episodes_jsonl(os.path.join(data_dir, "world.jsonl"))
    frame = sorted(episodes[0].ego_future)[0]
    dumps = {}
    for command in ("turn_left", "turn_right"):
        assert main(["infer", "--episode", os.path.join(data_dir, "world.jsonl"),
                     "--frame", str(frame), "--command", command,
                     "--dry-run"]) == 0
        dumps[command] = capsys.readouterr().out.split("\n")
    diff = [(a, b) for a, b in zip(dumps["turn_left"], dumps["turn_right"])
            if a != b]
    assert len(diff) == 1
    assert diff[0][0].startswith("Mission goal:")
    assert "turn left" in diff[0][0] and "turn right" in diff[0][1]


def test_infer_deterministic(data_dir, ckpt_dir, capsys):
    from microdrive import world
    episodes = world.read_episodes_jsonl(os.path.join(data_dir, "world.jsonl"))
    frame = sorted(episodes[0].ego_future)[0]
    outputs = []
    for _ in range(2):
        code = main(["infer", "--ckpt", os.path.join(ckpt_dir, "s3"),
                     "--episode", os.path.join(data_dir, "world.jsonl"),
                     "--frame", str(frame), "--command", "keep_forward"])
        assert code in (0, 3)
        outputs.append((code, capsys.readouterr().out))
    assert outputs[0] == outputs[1]


def test_infer_parse_failure_exits_3(data_dir, ckpt_dir, capsys):
    # the s0 checkpoint has an untrained language model: its greedy output
    # cannot be a well-formed trajectory
    from microdrive import world
    episodes = world.read_episodes_jsonl(os.path.join(data_dir, "world.jsonl"))
    frame = sorted(episodes[0].ego_future)[0]
    code = main(["infer", "--ckpt", os.path.join(ckpt_dir, "s0"),
                 "--episode", os.path.join(data_dir, "world.jsonl"),
                 "--frame", str(frame), "--command", "keep_forward"])
    assert code == 3
    captured = capsys.readouterr()
    assert "raw:" in captured.out


def test_infer_bad_frame_is_config_error(data_dir, capsys):
    assert main(["infer", "--episode", os.path.join(data_dir, "world.jsonl"),
                 "--frame", "9999", "--command", "keep_forward",
                 "--dry-run"]) == 2
    assert "keyframe" in capsys.readouterr().err
