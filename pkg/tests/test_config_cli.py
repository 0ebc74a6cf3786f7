import filecmp
import json
import os
import shutil

import pytest

from unlearnlab import pipeline
from unlearnlab.cli import main
from unlearnlab.config import DEFAULTS, ExperimentConfig
from unlearnlab.errors import ConfigError, PrerequisiteError

SMALL = {
    "seed": 1,
    "corpus": {"n_authors": 40, "forget_fraction": 0.1, "n_general": 10},
    "model": {"d_model": 32, "d_ff": 64, "max_len": 48},
    "train": {"original": {"epochs": 2}, "retained": {"epochs": 2}, "encoder": {"epochs": 1},
              "unlearn": {"epochs": 2}},
    "objective": {"kind": "TPO", "gdr_weight": 1.0},
    "eval": {"n_probe": 6},
}


def write_cfg(tmp, raw, name="cfg.json"):
    p = os.path.join(tmp, name)
    with open(p, "w") as fh:
        json.dump(raw, fh)
    return p


# ---------------------------------------------------------------- config


def test_defaults_fill_missing_fields():
    cfg = ExperimentConfig({"seed": 4})
    assert cfg.seed == 4
    assert cfg["corpus"] == DEFAULTS["corpus"]
    assert cfg.objective().kind == "TPO"


@pytest.mark.parametrize("raw, pointer", [
    ({"seed": -1}, "/seed"),
    ({"corpus": {"n_authors": "many"}}, "/corpus/n_authors"),
    ({"corpus": {"forget_fraction": 0.001, "n_authors": 20}}, "/corpus/forget_fraction"),
    ({"corpus": {"n_general": 7}}, "/corpus/n_general"),
    ({"model": {"d_model": 30, "n_heads": 4}}, "/model/n_heads"),
    ({"objective": {"kind": "SimPO"}}, "/objective/kind"),
    ({"objective": {"beta": 0}}, "/objective/beta"),
    ({"objective": {"kind": "LPL-only"}, "identifier": {"kind": "none"}}, "/identifier/kind"),
    ({"identifier": {"kind": "external"}}, "/identifier/annotations"),
    ({"identifier": {"stoplist": "no-such-file.txt"}}, "/identifier/stoplist"),
    ({"train": {"unlearn": {"lr": -1}}}, "/train/unlearn/lr"),
    ({"train": {"retained": {"batch_size": 0}}}, "/train/retained/batch_size"),
    ({"colour": "red"}, "/colour"),
    ({"eval": {"k_percent": 0}}, "/eval/k_percent"),
])
def test_invalid_config_names_the_field(raw, pointer):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig(raw)
    assert info.value.pointer == pointer


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(str(bad))


def test_stage_hashes_depend_only_on_their_blocks():
    a = ExperimentConfig({})
    b = a.replace(objective={"kind": "NPO"})
    c = a.replace(train={"original": {"lr": 1e-3}})
    assert a.stage_hash("corpus") == b.stage_hash("corpus") == c.stage_hash("corpus")
    assert a.stage_hash("original") == b.stage_hash("original") != c.stage_hash("original")
    assert a.stage_hash("unlearn") != b.stage_hash("unlearn")
    assert a.stage_hash("unlearn") != c.stage_hash("unlearn")
    assert a.replace(out="elsewhere").config_hash == a.config_hash


# ---------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(str(root), SMALL)
    out = str(root / "a")
    assert main(["run", "--config", cfg, "--out", out]) == 0
    return root, cfg, out


def test_cli_exit_codes(tmp_path, capsys):
    cfg = write_cfg(str(tmp_path), {"seed": -1})
    assert main(["gen-corpus", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "config error at /seed" in capsys.readouterr().err
    ok = write_cfg(str(tmp_path), SMALL, "ok.json")
    assert main(["evaluate", "--config", ok, "--out", str(tmp_path / "empty")]) == 2
    assert "run `" in capsys.readouterr().err
    assert main(["unlearn", "--config", ok, "--out", str(tmp_path / "empty")]) == 2
    assert main(["report", str(tmp_path / "none-*.csv"), "--out", str(tmp_path)]) == 2


def test_prerequisite_names_missing_step(tmp_path):
    ws = pipeline.Workspace(ExperimentConfig(SMALL), str(tmp_path))
    with pytest.raises(PrerequisiteError, match="gen-corpus"):
        pipeline.load_corpus(ws)


def test_run_produces_artifacts(cli_run):
    root, cfg, out = cli_run
    ws = pipeline.Workspace(ExperimentConfig.load(cfg), out)
    rows = pipeline.read_csv(ws.run_csv)
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]
    assert os.path.exists(ws.steps_path) and os.path.exists(ws.annotations_path)
    assert len(os.listdir(ws.eval_dir)) == 3


def test_rerun_is_byte_identical(cli_run):
    root, cfg, out = cli_run
    out2 = str(root / "b")
    assert main(["run", "--config", cfg, "--out", out2]) == 0
    csvs = sorted(f for f in os.listdir(out) if f.endswith(".csv"))
    assert csvs and csvs == sorted(f for f in os.listdir(out2) if f.endswith(".csv"))
    for f in csvs:
        assert filecmp.cmp(os.path.join(out, f), os.path.join(out2, f), shallow=False), f


def test_unlearn_resume_matches_uninterrupted(cli_run, tmp_path, monkeypatch):
    root, cfg, out = cli_run
    ws_full = pipeline.Workspace(ExperimentConfig.load(cfg), out)
    fresh = str(tmp_path / "r")
    os.makedirs(fresh)
    for f in os.listdir(out):
        if f.startswith(("corpus-", "model-original", "annotations-")):
            shutil.copy(os.path.join(out, f), fresh)
    ws = pipeline.Workspace(ExperimentConfig.load(cfg), fresh)

    saved = str(tmp_path / "epoch1.ckpt.npz")
    real = pipeline.save_checkpoint

    def keep_epoch1(path, ck):
        real(path, ck)
        if ck.epoch == 1:
            shutil.copy(path, saved)

    monkeypatch.setattr(pipeline, "save_checkpoint", keep_epoch1)
    pipeline.run_unlearning(ws)
    monkeypatch.undo()
    os.remove(os.path.join(ws.unlearn_dir, "epoch-02.npz"))
    assert main(["unlearn", "--config", cfg, "--out", fresh, "--checkpoint", saved]) == 0
    for f in ("epoch-01.npz", "epoch-02.npz"):
        assert filecmp.cmp(os.path.join(ws.unlearn_dir, f), os.path.join(ws_full.unlearn_dir, f), shallow=False)
    assert filecmp.cmp(ws.steps_path, ws_full.steps_path, shallow=False)


def test_resume_rejects_foreign_checkpoint(cli_run, tmp_path):
    root, cfg, out = cli_run
    ws = pipeline.Workspace(ExperimentConfig.load(cfg), out)
    other = write_cfg(str(tmp_path), {**SMALL, "objective": {"kind": "NPO", "gdr_weight": 1.0}})
    shutil.copytree(out, str(tmp_path / "o"))
    assert main(["unlearn", "--config", other, "--out", str(tmp_path / "o"), "--checkpoint", ws.ckpt_path("unlearn")]) == 1


def test_report(cli_run, tmp_path, capsys):
    root, cfg, out = cli_run
    assert main(["report", os.path.join(out, "run-*.csv"), "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out.split()
    svg, table = printed[0], printed[1]
    assert open(svg).read().startswith("<svg") or "<svg" in open(svg).read()
    assert "TPO" in open(table).read()


def test_identifier_variants(cli_run, tmp_path):
    root, cfg, out = cli_run
    stop = tmp_path / "stop.txt"
    stop.write_text("the\nis\nof\n")
    for ident in ({"kind": "stopword", "stoplist": str(stop)}, {"kind": "discriminative"}):
        c = ExperimentConfig({**SMALL, "identifier": ident})
        ws = pipeline.Workspace(c, out)
        got = pipeline.identify(ws)
        assert len(got) == 20 and all(a.annotation_source == ident["kind"] for a in got)
        audit = json.load(open(ws.stage("annotations", prefix="identifier", suffix=".json")))
        assert 0 <= audit["precision"] <= 1 and 0 <= audit["recall"] <= 1
