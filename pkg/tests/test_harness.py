import json

import pytest

from cagul_lab import harness
from cagul_lab.__main__ import main as cli

TINY = ["--m", "6", "--n", "3", "--n-private", "1", "--m-general", "2", "--m-tilde", "2",
        "--d-model", "8", "--n-layers", "1", "--n-heads", "2", "--pretrain-images", "12",
        "--pretrain-epochs", "1", "--replay", "6", "--finetune-epochs", "2", "--epochs-joint", "1",
        "--unlearn-epochs", "1"]


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    args = ["--out", str(out), *TINY]
    assert cli(["datagen", *args]) == 0
    assert cli(["finetune", *args]) == 0
    return out, args


# -- configuration ------------------------------------------------------------

def test_parse_config_text_coerces_and_skips_comments():
    cfg = harness.parse_config_text("# comment\nm = 5\nmethod = ga  # trailing\ncagul_lr = 0.5\n")
    assert cfg == {"m": 5, "method": "ga", "cagul_lr": 0.5}


@pytest.mark.parametrize("text,where", [("m 5", ":1:"), ("\nbogus = 1", ":2:"), ("m = five", ":1:")])
def test_parse_config_text_errors_carry_line_numbers(text, where):
    with pytest.raises(harness.UsageError, match=where):
        harness.parse_config_text(text, "cfg.txt")


def test_load_config_applies_overrides_and_validates(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("m = 6\nm_tilde = 2\n")
    cfg = harness.load_config(p, {"m_tilde": 3, "seed": None})
    assert (cfg.m, cfg.m_tilde, cfg.seed) == (6, 3, 0)
    with pytest.raises(harness.UsageError):
        harness.load_config(tmp_path / "missing.txt")
    with pytest.raises(harness.UsageError):
        harness.load_config(None, {"m_tilde": 99})
    with pytest.raises(harness.UsageError):
        harness.load_config(None, {"method": "magic"})


def test_tags_are_deterministic():
    c = harness.ExperimentConfig()
    assert harness.tag(c) == "cagul-k3-m4-s0"
    assert harness.tag(c.replace(ablation="no_discriminator")) == "cagul-no_discriminator-k3-m4-s0"
    assert harness.tag(c.replace(method="ga", seed=2)) == "ga-m4-s2"
    assert harness.tag(c.replace(method="finetune")) == "finetune"
    assert harness.tag(c.replace(k=5, loss_variant="ga_kl")) == "cagul-ga_kl-k5-m4-s0"


# -- command line ---------------------------------------------------------------

def test_usage_errors_exit_with_one(tmp_path, capsys):
    assert cli(["eval", "--out", str(tmp_path), "--method", "magic"]) == 1
    assert cli(["eval", "--out", str(tmp_path), "--method", "finetune"]) == 1  # nothing generated yet
    with pytest.raises(SystemExit) as e:
        cli(["unlearn", "--m", "many"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli(["teleport"])
    assert e.value.code == 1
    assert "error" in capsys.readouterr().err


def test_tiny_pipeline_writes_reports(tiny_run):
    out, args = tiny_run
    assert (out / "models" / "finetune.tvlm").exists() and (out / "data" / "manifest.jsonl").exists()
    for method in (["--method", "po_gd"], ["--method", "cagul", "--ablation", "no_discriminator"]):
        assert cli(["unlearn", *args, *method]) == 0
        assert cli(["eval", *args, *method]) == 0
    rows = harness.read_csv(out / "reports" / "po_gd-m2-s0.csv")
    assert tuple(rows[0]) == harness.CSV_COLUMNS
    assert {(r["split"], r["metric"]) for r in rows} >= {("forget", "exact_match"), ("general", "exact_match"),
                                                        ("nonprivate", "truth_ratio")}
    txt = (out / "reports" / "cagul-no_discriminator-k3-m2-s0.txt").read_text()
    assert "Method" in txt and "cagul" in txt


def test_weak_discriminator_exits_with_two(tiny_run, capsys):
    _, args = tiny_run
    assert cli(["unlearn", *args, "--method", "cagul", "--epochs-discriminator", "0"]) == 2
    assert "training failed" in capsys.readouterr().err


def test_probe_writes_one_line_per_record(tiny_run):
    out, args = tiny_run
    assert cli(["probe-attention", *args, "--k", "2"]) == 0
    lines = (out / "probe" / "attention.jsonl").read_text().splitlines()
    assert len(lines) == 6 * 3
    first = json.loads(lines[0])
    assert len(first["alpha"]) == 16 and len(first["K"]) == 2
    assert sum(first["alpha"]) == pytest.approx(1.0, abs=1e-5)


def test_sweep_over_m_tilde(tiny_run):
    out, args = tiny_run
    assert cli(["sweep", *args, "--method", "po_gd", "--param", "m_tilde", "--values", "1,2"]) == 0
    rows = harness.read_csv(out / "sweep" / "m_tilde.csv")
    assert {r["m_tilde"] for r in rows} == {"1", "2"}
    assert cli(["sweep", *args, "--method", "po_gd", "--param", "k", "--values", "1"]) == 1
    assert cli(["sweep", *args, "--param", "m_tilde", "--values", "a,b"]) == 1
