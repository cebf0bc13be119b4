import json
import subprocess
import sys

import pytest

from charflip import blackbox, cli, corpus
from charflip import source_model as sm

TINY = [
    "--set", "src_emb=16", "--set", "src_hidden=24", "--set", "src_layers=1",
    "--set", "src_ff_hidden=16", "--set", "atk_emb=8", "--set", "atk_hidden=8",
    "--set", "src_epochs=8", "--set", "atk_epochs=2", "--set", "lr=0.005",
    "--set", "batch_size=16", "--set", "tau=0.3",
    "--set", "max_flips=8", "--set", "bench_max_flips=6",
]


def run_cli(args, capsys):
    code = cli.main(args)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_synth_corpus_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert cli.main(["synth-corpus", "--out", str(a), "--n", "60", "--seed", "3"]) == 0
    assert cli.main(["synth-corpus", "--out", str(b), "--n", "60", "--seed", "3"]) == 0
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()
    assert json.loads((tmp_path / "a.csv.config.json").read_text())["config"]["seed"] == 3


def test_missing_corpus_exit_3(tmp_path, capsys):
    code, out, err = run_cli(
        ["train-source", "--corpus", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "m.ckpt")],
        capsys,
    )
    assert code == 3
    payload = json.loads(err)
    assert payload["error"]["code"] == 3
    assert "synth-corpus" in payload["error"]["message"]


def test_missing_source_checkpoint_exit_3(tmp_path, capsys):
    corpus_path = tmp_path / "c.csv"
    cli.main(["synth-corpus", "--out", str(corpus_path), "--n", "20"])
    capsys.readouterr()
    code, _, err = run_cli(
        ["gen-data", "--source", str(tmp_path / "missing.ckpt"),
         "--corpus", str(corpus_path), "--out", str(tmp_path / "p.jsonl")],
        capsys,
    )
    assert code == 3
    assert "train-source" in json.loads(err)["error"]["message"]


def test_bad_config_key_exit_2(tmp_path, capsys):
    code, _, err = run_cli(
        ["synth-corpus", "--out", str(tmp_path / "c.csv"), "--set", "no_such_key=1"], capsys
    )
    assert code == 2
    assert json.loads(err)["error"]["code"] == 2


def test_bad_profile_exit_2(tmp_path, capsys):
    code, _, err = run_cli(
        ["synth-corpus", "--out", str(tmp_path / "c.csv"), "--set", "profile=galaxy"], capsys
    )
    assert code == 2


def test_config_file_applied_and_flags_win(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nsynth_n = 30\nseed = 9\n", encoding="utf-8")
    out = tmp_path / "c.csv"
    code, stdout, _ = run_cli(
        ["synth-corpus", "--out", str(out), "--config", str(cfg)], capsys
    )
    assert code == 0
    assert json.loads(stdout)["sentences"] == 30
    # --set beats the file
    code, stdout, _ = run_cli(
        ["synth-corpus", "--out", str(out), "--config", str(cfg), "--set", "synth_n=12"],
        capsys,
    )
    assert json.loads(stdout)["sentences"] == 12


def test_config_file_syntax_error(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("this is not a key value line\n", encoding="utf-8")
    code, _, err = run_cli(
        ["synth-corpus", "--out", str(tmp_path / "c.csv"), "--config", str(cfg)], capsys
    )
    assert code == 2


def pipeline(workdir, seed="5"):
    workdir.mkdir(parents=True, exist_ok=True)
    c = str(workdir / "corpus.csv")
    src = str(workdir / "source.ckpt")
    pairs = str(workdir / "pairs.jsonl")
    atk = str(workdir / "attacker.ckpt")
    bench = str(workdir / "bench")
    steps = [
        ["synth-corpus", "--out", c, "--n", "300", "--seed", seed] + TINY,
        ["train-source", "--corpus", c, "--out", src, "--seed", seed] + TINY,
        ["gen-data", "--source", src, "--corpus", c, "--out", pairs,
         "--search", "hotflip-1", "--limit", "12", "--seed", seed] + TINY,
        ["train-attacker", "--pairs", pairs, "--out", atk, "--seed", seed] + TINY,
        ["bench", "--source", src, "--attacker-ckpt", atk, "--corpus", c,
         "--out", bench, "--attackers", "distflip,hotflip-1,random",
         "--limit", "4", "--seed", seed] + TINY,
    ]
    for step in steps:
        code = cli.main(step)
        assert code == 0, f"{step[0]} failed"
    return workdir


@pytest.fixture(scope="module")
def shared_pipeline(tmp_path_factory):
    return pipeline(tmp_path_factory.mktemp("pipe") / "w")


COMPARED = [
    "corpus.csv",
    "corpus.csv.config.json",
    "source.ckpt",
    "source.ckpt.metrics.jsonl",
    "pairs.jsonl",
    "pairs.jsonl.report.json",
    "attacker.ckpt",
    "attacker.ckpt.metrics.jsonl",
    "bench/report.json",
    "bench/survival.csv",
]


def test_full_pipeline_deterministic(tmp_path, capsys):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    capsys.readouterr()
    for rel in COMPARED:
        fa, fb = a / rel, b / rel
        assert fa.exists(), f"missing {rel}"
        assert fa.read_bytes() == fb.read_bytes(), f"{rel} differs between identical runs"
    # timing exists but is exempt from byte comparison
    assert (a / "bench/timing.json").exists()


def test_attack_text_smoke(shared_pipeline, capsys):
    work = shared_pipeline
    capsys.readouterr()
    code, stdout, _ = run_cli(
        ["attack", "--source", str(work / "source.ckpt"), "--attacker", "hotflip-1",
         "--text", "you total clown", "--tau", "0.3", "--seed", "5"] + TINY,
        capsys,
    )
    assert code == 0
    trace = json.loads(stdout.strip().split("\n")[-1])
    assert {"id", "flips", "scores", "success", "forward_count", "backward_count"} <= set(trace)


def test_attack_distflip_requires_checkpoint(shared_pipeline, capsys):
    work = shared_pipeline
    capsys.readouterr()
    code, _, err = run_cli(
        ["attack", "--source", str(work / "source.ckpt"), "--attacker", "distflip",
         "--text", "hi there"] + TINY,
        capsys,
    )
    assert code == 3
    assert "train-attacker" in json.loads(err)["error"]["message"]


def test_blackbox_command_against_mock(shared_pipeline, capsys):
    work = shared_pipeline
    capsys.readouterr()
    vocab = corpus.default_vocab()
    model = sm.SourceModel.load(str(work / "source.ckpt"), vocab)
    out = str(work / "transfer.jsonl")
    with blackbox.MockServer(model) as server:
        code, stdout, err = run_cli(
            ["blackbox", "--source", str(work / "source.ckpt"),
             "--attacker-ckpt", str(work / "attacker.ckpt"),
             "--corpus", str(work / "corpus.csv"), "--out", out,
             "--endpoint", server.url, "--rate", "1000", "--limit", "3",
             "--seed", "5"] + TINY,
            capsys,
        )
    assert code == 0, err
    payload = json.loads(stdout)
    assert payload["summary"]["sentences"] <= 3
    lines = [json.loads(x) for x in (work / "transfer.jsonl").read_text().strip().split("\n")]
    assert "summary" in lines[-1]


def test_synth_corpus_custom_lexicon(tmp_path, capsys):
    lex = tmp_path / "lex.txt"
    lex.write_text("grump\nnitwit\n", encoding="utf-8")
    out = tmp_path / "c.csv"
    code, _, _ = run_cli(
        ["synth-corpus", "--out", str(out), "--n", "20", "--lexicon", str(lex)], capsys
    )
    assert code == 0
    body = out.read_text()
    assert "grump" in body or "nitwit" in body
    for default_trigger in corpus.DEFAULT_TRIGGERS:
        assert default_trigger not in body


def test_console_script_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "charflip.cli", "synth-corpus", "--help"],
        capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0
    assert "--out" in proc.stdout
