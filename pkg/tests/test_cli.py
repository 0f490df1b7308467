import hashlib
import subprocess
import sys

import numpy as np
import pytest

from gendet.cli import (EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, ConfigError, default_config, main,
                           parse_config_text)
from gendet.synthcorpus import make_det_set, write_pgm

TINY = """# tiny run
d_model = 16
n_layers = 2
n_heads = 2
t_embed_dim = 8
n_det_train = 32
n_det_test = 16
n_gen_train = 32
n_gen_test = 40
batch_size = 8
steps_gduf = 3
steps_diga = 3
eval_every = 0
sample_steps = 4
n_fid = 40
"""
CAPTION = "one small blob lit from left on dark background"


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(root, seed=0):
    """make-data, both training stages, generate and eval under one config."""
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    common = ["--config", str(cfg), "--seed", str(seed)]
    d, g, a = root / "data", root / "gduf", root / "diga"
    assert main(["make-data", *common, "--out", str(d)]) == EXIT_OK
    assert main(["train-gduf", *common, "--data", str(d), "--out", str(g)]) == EXIT_OK
    assert main(["train-diga", *common, "--data", str(d), "--ckpt", str(g / "gduf.ckpt"), "--out", str(a)]) == EXIT_OK
    assert main(["generate", *common, "--ckpt", str(a / "diga.ckpt"), "--caption", CAPTION, "--n", "3",
                 "--out", str(root / "samples")]) == EXIT_OK
    assert main(["eval", *common, "--data", str(d), "--ckpt", str(a / "diga.ckpt"), "--fid", "--feature-ckpt",
                 str(g / "gduf.ckpt"), "--out", str(root / "eval")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def artifacts(root):
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix in (".csv", ".ckpt", ".pgm", ".gdc", ".txt"))


def test_pipeline_writes_expected_artifacts(pipeline):
    names = {p.relative_to(pipeline).as_posix() for p in artifacts(pipeline)}
    for want in ("data/det-train.gdc", "data/gen-test.gdc", "gduf/gduf.ckpt", "gduf/gduf_log.csv",
                 "diga/diga.ckpt", "diga/diga_log.csv", "samples/sample_000.pgm", "samples/sample_002.pgm",
                 "eval/metrics.csv"):
        assert want in names
    for sub in ("data", "gduf", "diga", "samples", "eval"):
        assert (pipeline / sub / "resolved_config.txt").is_file()
    metrics = (pipeline / "eval" / "metrics.csv").read_text()
    assert "overall,-,fid_proxy," in metrics and "robustness,crop:0.9,acc," in metrics


def test_resolved_config_is_complete_and_reloadable(pipeline):
    text = (pipeline / "gduf" / "resolved_config.txt").read_text()
    cfg = parse_config_text(text)
    assert set(cfg) == set(default_config())
    assert cfg["d_model"] == 16 and cfg["steps_gduf"] == 3 and cfg["seed"] == 0


def test_pipeline_rerun_is_byte_identical(pipeline, tmp_path):
    again = run_pipeline(tmp_path)
    a, b = artifacts(pipeline), artifacts(again)
    assert [p.relative_to(pipeline) for p in a] == [p.relative_to(again) for p in b]
    for p, q in zip(a, b):
        if p.name == "tiny.cfg":
            continue
        assert p.read_bytes() == q.read_bytes(), p.relative_to(pipeline)


def test_generate_seed_twice_identical_and_seed_matters(pipeline, tmp_path):
    ck = str(pipeline / "diga" / "diga.ckpt")
    outs = []
    for name, seed in (("a", "7"), ("b", "7"), ("c", "8")):
        assert main(["generate", "--config", str(pipeline / "tiny.cfg"), "--seed", seed, "--ckpt", ck,
                     "--caption", CAPTION, "--n", "2", "--out", str(tmp_path / name)]) == EXIT_OK
        outs.append([digest(tmp_path / name / f"sample_{i:03d}.pgm") for i in range(2)])
    assert outs[0] == outs[1] and outs[0] != outs[2]
    assert "seed = 7" in (tmp_path / "a" / "resolved_config.txt").read_text()


def test_commands_do_not_mutate_inputs(pipeline, tmp_path):
    ck, data = pipeline / "gduf" / "gduf.ckpt", pipeline / "data"
    before = [digest(ck)] + [digest(p) for p in sorted(data.glob("*.gdc"))]
    assert main(["train-diga", "--config", str(pipeline / "tiny.cfg"), "--data", str(data), "--ckpt", str(ck),
                 "--out", str(tmp_path)]) == EXIT_OK
    assert before == [digest(ck)] + [digest(p) for p in sorted(data.glob("*.gdc"))]


def test_detect_prints_label_probability_explanation(pipeline, tmp_path, capsys):
    img = make_det_set(2, seed=0, split="det-test").images[0]
    write_pgm(tmp_path / "x.pgm", img)
    capsys.readouterr()
    assert main(["detect", "--ckpt", str(pipeline / "gduf" / "gduf.ckpt"), str(tmp_path / "x.pgm")]) == EXIT_OK
    path, label, prob, text = capsys.readouterr().out.rstrip("\n").split("\t")
    assert path.endswith("x.pgm") and label in ("real", "fake")
    assert 0 <= float(prob) <= 1 and (label == "fake") == (float(prob) > 0.5)
    assert isinstance(text, str)


def test_cli_flags_override_config(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("smsa_on = true\nseed = 3\nfreeze_policy = detector-heads\n")
    assert main(["make-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--seed", "5", "--ablate-smsa",
                 "--freeze", "backbone", "--diga-target", "velocity"]) == EXIT_OK
    resolved = parse_config_text((tmp_path / "d" / "resolved_config.txt").read_text())
    assert resolved["seed"] == 5 and resolved["smsa_on"] is False
    assert resolved["freeze_policy"] == "backbone" and resolved["diga_target"] == "velocity"


def test_grad_check_exits_zero(capsys):
    assert main(["grad-check"]) == EXIT_OK
    assert "all passed" in capsys.readouterr().out


def test_config_unknown_key_reports_file_and_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("# header\nd_model = 16\nwarp_factor = 9\n")
    assert main(["make-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert f"{cfg}:3" in err and "warp_factor" in err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("text, line", [("seed = abc\n", 1), ("\n\nsmsa_on = maybe\n", 3), ("steps_gduf 10\n", 1)])
def test_config_parse_errors_have_line_numbers(text, line):
    with pytest.raises(ConfigError, match=f"c.cfg:{line}:"):
        parse_config_text(text, "c.cfg")


def test_config_bad_enum_value():
    with pytest.raises(ConfigError, match="diga_target"):
        parse_config_text("diga_target = score\n", "c.cfg")


def test_usage_errors_exit_one(tmp_path, capsys):
    assert main(["make-data"]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main(["make-data", "--out", str(tmp_path), "--bogus"]) == EXIT_USAGE
    assert main(["make-data", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == EXIT_USAGE


def test_unknown_caption_word_is_usage_error(pipeline, tmp_path):
    assert main(["generate", "--ckpt", str(pipeline / "gduf" / "gduf.ckpt"), "--caption", "zebra stripes",
                 "--out", str(tmp_path)]) == EXIT_USAGE


def test_missing_checkpoint_is_data_error(tmp_path, capsys):
    img = tmp_path / "x.pgm"
    write_pgm(img, np.zeros((32, 32)))
    assert main(["detect", "--ckpt", str(tmp_path / "nope.ckpt"), str(img)]) == EXIT_DATA
    assert "nope.ckpt" in capsys.readouterr().err


def test_malformed_pgm_is_data_error(pipeline, tmp_path, capsys):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n32 32\n255\n" + bytes(10))
    assert main(["detect", "--ckpt", str(pipeline / "gduf" / "gduf.ckpt"), str(bad)]) == EXIT_DATA
    assert "bad.pgm" in capsys.readouterr().err


def test_missing_corpus_is_data_error(tmp_path):
    assert main(["train-gduf", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_make_data_refuses_overwrite(pipeline):
    assert main(["make-data", "--config", str(pipeline / "tiny.cfg"), "--out", str(pipeline / "data")]) == EXIT_DATA


def test_numerical_failure_exits_three(pipeline, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY + "lr = inf\n")
    code = main(["train-gduf", "--config", str(cfg), "--data", str(pipeline / "data"), "--out", str(tmp_path / "o")])
    assert code == EXIT_NUMERIC
    assert "step" in capsys.readouterr().err


def test_module_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "gendet.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "grad-check" in proc.stdout
