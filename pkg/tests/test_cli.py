"""Command-line surface: flows, exit codes, JSON errors, config precedence."""

import json
import subprocess
import sys

import pytest

from foleyflow import training
from foleyflow.cli import main
from foleyflow.datapipe import MANIFEST_HEADER


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def checkpoint(workdir):
    out = workdir / "run"
    code = main(
        [
            "train",
            "--preset", "stage1",
            "--steps", "3",
            "--batch-size", "2",
            "--data-clips", "4",
            "--out", str(out),
        ]
    )
    assert code == 0
    return str(out / "stage1.ckpt")


@pytest.fixture(scope="module")
def latent(workdir, checkpoint):
    out = workdir / "gen" / "clip0.ysnd"
    out.parent.mkdir(exist_ok=True)
    code = main(["sample", "--checkpoint", checkpoint, "--out", str(out), "--text", "rain", "--nfe", "4"])
    assert code == 0
    return str(out)


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_and_log(workdir, checkpoint):
    run_dir = workdir / "run"
    assert (run_dir / "stage1.ckpt").is_file()
    log_lines = (run_dir / "events.log").read_text().splitlines()
    assert len(log_lines) == 3
    events = [training.parse_event(line) for line in log_lines]
    assert [e.step for e in events] == [1, 2, 3]


def test_train_multi_stage_chains(workdir):
    out = workdir / "multi"
    code = main(
        [
            "train",
            "--stages", "1,2",
            "--steps", "2,2",
            "--batch-size", "2",
            "--data-clips", "4",
            "--out", str(out),
        ]
    )
    assert code == 0
    assert (out / "stage1.ckpt").is_file()
    assert (out / "stage2.ckpt").is_file()
    events = [training.parse_event(line) for line in (out / "events.log").read_text().splitlines()]
    assert [e.step for e in events] == [1, 2, 3, 4]
    assert [e.stage_id for e in events] == [1, 1, 2, 2]


def test_train_later_stage_requires_init(workdir, capsys):
    code = main(["train", "--preset", "stage2", "--steps", "2", "--out", str(workdir / "nope")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "ConfigError"
    assert "init-checkpoint" in err["error"]["message"]


def test_train_resume_from_checkpoint(workdir, checkpoint):
    out = workdir / "resumed"
    code = main(
        [
            "train",
            "--preset", "stage2",
            "--steps", "2",
            "--batch-size", "2",
            "--data-clips", "4",
            "--init-checkpoint", checkpoint,
            "--out", str(out),
        ]
    )
    assert code == 0
    assert (out / "stage2.ckpt").is_file()


def test_train_steps_count_mismatch(workdir, capsys):
    code = main(["train", "--stages", "1,2", "--steps", "2", "--out", str(workdir / "nope2")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "ConfigError"


# ---------------------------------------------------------------------------
# sample


def test_sample_writes_latent_and_envelope(latent):
    import os

    assert os.path.getsize(latent) > 0
    env_lines = open(latent + ".env.csv").read().splitlines()
    assert env_lines[0] == "time,audio_energy"
    assert len(env_lines) > 1


def test_sample_is_bit_deterministic(workdir, checkpoint):
    a = workdir / "det_a.lat"
    b = workdir / "det_b.lat"
    for path in (a, b):
        code = main(
            ["sample", "--checkpoint", checkpoint, "--out", str(path), "--text", "rain", "--nfe", "4", "--seed", "9"]
        )
        assert code == 0
    assert a.read_bytes() == b.read_bytes()


def test_sample_seed_changes_output(workdir, checkpoint):
    a = workdir / "seed_a.lat"
    b = workdir / "seed_b.lat"
    main(["sample", "--checkpoint", checkpoint, "--out", str(a), "--nfe", "4", "--seed", "1"])
    main(["sample", "--checkpoint", checkpoint, "--out", str(b), "--nfe", "4", "--seed", "2"])
    assert a.read_bytes() != b.read_bytes()


def test_sample_missing_checkpoint(workdir, capsys):
    code = main(["sample", "--checkpoint", str(workdir / "ghost.ckpt"), "--out", str(workdir / "x.lat")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "ContractError"
    assert "checkpoint" in err["error"]["message"]


def test_sample_video_id_conditions(workdir, checkpoint):
    out = workdir / "vid.lat"
    code = main(["sample", "--checkpoint", checkpoint, "--out", str(out), "--video", "crash-cymbal", "--nfe", "4"])
    assert code == 0


# ---------------------------------------------------------------------------
# eval


def test_eval_self_is_perfect(workdir, checkpoint, latent, capsys):
    gen_dir = workdir / "gen"
    # a second clip so the distribution metrics have two pairs
    main(["sample", "--checkpoint", checkpoint, "--out", str(gen_dir / "clip1.ysnd"), "--seed", "3", "--nfe", "4"])
    capsys.readouterr()
    code = main(["eval", str(gen_dir), str(gen_dir), "--json"])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["values"]["FAD"] == 0.0
    assert report["values"]["CLIP"] == 100.0
    assert report["values"]["AV"] == 1.0
    assert report["n_pairs"] == 2


def test_eval_writes_report_and_plots(workdir, capsys):
    gen_dir = workdir / "gen"
    out = workdir / "report.json"
    plots = workdir / "plots"
    code = main(["eval", str(gen_dir), str(gen_dir), "--json", "--out", str(out), "--plot", str(plots)])
    assert code == 0
    capsys.readouterr()
    assert json.loads(out.read_text())["n_pairs"] == 2
    assert sorted(p.name for p in plots.iterdir()) == ["clip0.envelopes.csv", "clip1.envelopes.csv"]


def test_eval_missing_dir(workdir, capsys):
    code = main(["eval", str(workdir / "absent"), str(workdir / "gen")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "ContractError"


# ---------------------------------------------------------------------------
# pipeline


def _write_manifest(path):
    path.write_text(
        MANIFEST_HEADER
        + "\n"
        + "good,2.0,hit:0.2:0.5;thud:1.0:1.4,0.8,0.9,0,0\n"
        + "talky,2.0,hit:0.2:0.5,0.8,0.9,1,0\n"
        + "mangled nonsense\n"
        + "faint,2.0,hit:0.2:0.5,0.05,0.9,0,0\n"
    )


def test_pipeline_filters_and_reports(workdir, capsys):
    src = workdir / "in.manifest"
    dst = workdir / "out.manifest"
    report = workdir / "drops.csv"
    _write_manifest(src)
    code = main(["pipeline", str(src), str(dst), "--report", str(report)])
    assert code == 0
    captured = capsys.readouterr()
    assert "warning: manifest line 4:" in captured.err
    assert "speech,1" in captured.out
    assert "alignment,1" in captured.out
    assert report.read_text().rstrip() == captured.out.rstrip()
    out_lines = dst.read_text().splitlines()
    assert out_lines[0] == MANIFEST_HEADER
    assert [line.split(",")[0] for line in out_lines[1:]] == ["good#0", "good#1"]


def test_pipeline_keep_speech_flag(workdir, capsys):
    src = workdir / "in.manifest"
    dst = workdir / "kept.manifest"
    code = main(["pipeline", str(src), str(dst), "--keep-speech"])
    assert code == 0
    assert "speech,0" in capsys.readouterr().out
    ids = [line.split(",")[0] for line in dst.read_text().splitlines()[1:]]
    assert "talky" in ids or "talky#0" in ids


def test_pipeline_missing_input(workdir, capsys):
    code = main(["pipeline", str(workdir / "absent.manifest"), str(workdir / "x.manifest")])
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip())["error"]["kind"] == "ContractError"


# ---------------------------------------------------------------------------
# refine


def test_refine_picks_and_traces(workdir, checkpoint, latent, capsys):
    out = workdir / "refined.lat"
    code = main(
        [
            "refine",
            "--checkpoint", checkpoint,
            "--coarse", latent,
            "--out", str(out),
            "--text", "rain",
            "--k", "2",
            "--nfe", "4",
        ]
    )
    assert code == 0
    captured = capsys.readouterr()
    assert "picked" in captured.out
    trace_lines = (workdir / "refined.lat.trace.csv").read_text().splitlines()
    assert trace_lines[0].startswith("index,seed,")
    assert len([l for l in trace_lines if not l.startswith(("index", "#"))]) == 2
    assert out.is_file()


def test_refine_rejects_k_zero(workdir, checkpoint, latent, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["refine", "--checkpoint", checkpoint, "--coarse", latent, "--out", "x.lat", "--k", "0"])
    assert exc.value.code == 2
    assert json.loads(capsys.readouterr().err.strip())["error"]["kind"] == "ConfigError"


# ---------------------------------------------------------------------------
# parsing and config files


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["sample", "--checkpoint", "x", "--out", "y", "--warp", "9"])
    assert exc.value.code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "ConfigError"


def test_missing_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_config_file_sets_defaults(workdir, checkpoint):
    cfg = workdir / "sample.cfg"
    cfg.write_text("# sampler knobs\nnfe=4\nseed=9\n")
    a = workdir / "cfg_a.lat"
    b = workdir / "cfg_b.lat"
    assert main(["sample", "--checkpoint", checkpoint, "--out", str(a), "--config", str(cfg)]) == 0
    assert main(["sample", "--checkpoint", checkpoint, "--out", str(b), "--nfe", "4", "--seed", "9"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_explicit_flag_beats_config(workdir, checkpoint):
    cfg = workdir / "sample.cfg"  # nfe=4 seed=9 from the previous test
    cfg.write_text("nfe=4\nseed=9\n")
    a = workdir / "win_a.lat"
    b = workdir / "win_b.lat"
    assert main(["sample", "--checkpoint", checkpoint, "--out", str(a), "--config", str(cfg), "--seed", "2"]) == 0
    assert main(["sample", "--checkpoint", checkpoint, "--out", str(b), "--nfe", "4", "--seed", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_config_boolean_keys(workdir, capsys):
    src = workdir / "in.manifest"
    dst = workdir / "cfgkeep.manifest"
    cfg = workdir / "pipe.cfg"
    cfg.write_text("keep_speech=true\nkeep_bgm=false\n")
    code = main(["pipeline", str(src), str(dst), "--config", str(cfg)])
    assert code == 0
    assert "speech,0" in capsys.readouterr().out


def test_config_unknown_key_exits_2(workdir, capsys):
    cfg = workdir / "bad.cfg"
    cfg.write_text("волюм=11\n")
    with pytest.raises(SystemExit) as exc:
        main(["pipeline", "in", "out", "--config", str(cfg)])
    assert exc.value.code == 2


def test_config_file_missing(workdir, capsys):
    code = main(["sample", "--checkpoint", "x", "--out", "y", "--config", str(workdir / "ghost.cfg")])
    assert code == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"]["kind"] == "ConfigError"
    assert "config file not found" in err["error"]["message"]


def test_config_malformed_line(workdir, capsys):
    cfg = workdir / "broken.cfg"
    cfg.write_text("just some words\n")
    code = main(["sample", "--checkpoint", "x", "--out", "y", "--config", str(cfg)])
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip())["error"]["kind"] == "ConfigError"


def test_console_script_help():
    proc = subprocess.run(
        [sys.executable, "-m", "foleyflow.cli", "--help"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    for command in ("train", "sample", "eval", "pipeline", "refine"):
        assert command in proc.stdout
