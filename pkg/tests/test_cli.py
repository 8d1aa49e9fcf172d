import io
import json
from pathlib import Path

import numpy as np
import pytest

from sidecontrol import baselm as bl
from sidecontrol import cli
from sidecontrol.control import generate_controlled
from sidecontrol.textdata import SemanticLabel

CONFIG = {
    "task": "label", "n_dialogues": 60, "seed": 3, "limit": 6,
    "base": {"d": 16, "layers": 1, "heads": 2, "lmax": 96},
    "base_train": {"lr": 0.003, "steps": 40, "log_every": 0},
    "classifier": {"lr": 0.01, "epochs": 3},
    "side": {"max_steps": 20, "eval_every": 10, "val_limit": 10},
    "eval_classifier": {"epochs": 1, "lr": 0.001},
    "generation": {"max_len": 10},
}


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(CONFIG))
    common = ["--config", cfg]
    assert run("synth", *common, "--out", root / "data") == 0
    assert run("train-base", *common, "--data", root / "data", "--out", root / "base") == 0
    assert run("train-classifier", *common, "--data", root / "data", "--base", root / "base",
               "--out", root / "clf") == 0
    assert run("train-side", *common, "--data", root / "data", "--base", root / "base", "--classifier",
               root / "clf", "--out", root / "side") == 0
    return root


def _files(d: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "manifest.json"}


def _manifest_without_time(d: Path) -> dict:
    man = json.loads((d / "manifest.json").read_text())
    man.pop("wall_seconds")
    man["config"].pop("out")
    return man


# ------------------------------------------------------------------ config

def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--task", "label", "--n", 10, "--seed", 7, "--out", tmp_path / name) == 0
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    assert set(_files(tmp_path / "a")) == {"train.jsonl", "val.jsonl", "test.jsonl"}
    assert _manifest_without_time(tmp_path / "a") == _manifest_without_time(tmp_path / "b")
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {"config", "seed", "git", "wall_seconds", "artifacts"} <= set(man)
    assert run("synth", "--task", "label", "--n", 10, "--seed", 8, "--out", tmp_path / "c") == 0
    assert _files(tmp_path / "a") != _files(tmp_path / "c")


def test_flags_override_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"task": "knowledge", "seed": 1, "n_dialogues": 5, "side": {"lr": 0.5}}))
    args = cli.build_parser().parse_args(["synth", "--config", str(path), "--seed", "9", "--set", "side.lr=0.25"])
    cfg = cli.resolve_config(args)
    assert (cfg.seed, cfg.task, cfg.n_dialogues, cfg.side["lr"]) == (9, "knowledge", 5, 0.25)


@pytest.mark.parametrize("payload, match", [
    ({"bogus": 1}, "unknown key"),
    ({"side": {"nope": 1}}, "unknown key"),
    ({"side": {"lam": 1.0}}, "unknown key"),
    ({"grid": []}, "non-empty"),
    ({"task": "sentiment"}, "task"),
    ({"train": "/does/not/exist.jsonl"}, "does not exist"),
])
def test_config_validation(tmp_path, payload, match):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(cli.CLIError, match=match):
        cli.load_config(path)


def test_seed_is_mandatory(tmp_path, capsys):
    assert run("synth", "--task", "label", "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert len(err.strip().splitlines()) == 1 and json.loads(err)["error"] == "config"


def test_stage_seeds_are_distinct_and_stable():
    seeds = [cli.stage_seed(5, s) for s in cli.STAGES]
    assert len(set(seeds)) == len(seeds)
    assert seeds == [cli.stage_seed(5, s) for s in cli.STAGES]
    assert cli.stage_seed(5, "decode") != cli.stage_seed(6, "decode")


# ------------------------------------------------------------------ errors

@pytest.mark.parametrize("argv, kind, code", [
    (["synth", "--seed", "1", "--bogus"], "usage", 2),
    (["frobnicate"], "usage", 2),
    ([], "usage", 2),
    (["train-side", "--seed", "1", "--base", "/nowhere", "--out", "OUT"], "missing-artifact", 3),
])
def test_errors_are_single_json_lines(tmp_path, capsys, argv, kind, code):
    argv = [a.replace("OUT", str(tmp_path / "o")) for a in argv]
    assert cli.main(argv) == code
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1
    assert json.loads(err)["error"] == kind


def test_chained_hash_mismatch_is_refused(pipeline, tmp_path, capsys):
    other = tmp_path / "other"
    cfg = pipeline / "cfg.json"
    assert run("train-base", "--config", cfg, "--data", pipeline / "data", "--seed", 4, "--out", other) == 0
    code = run("generate", "--config", cfg, "--data", pipeline / "data", "--base", other, "--side",
               pipeline / "side", "--method", "sidecontrol", "--out", tmp_path / "g")
    assert code == 4
    assert json.loads(capsys.readouterr().err)["error"] == "hash-mismatch"
    # a tampered base checkpoint no longer matches its own manifest
    tampered = tmp_path / "tampered"
    tampered.mkdir()
    for p in (pipeline / "base").iterdir():
        (tampered / p.name).write_bytes(p.read_bytes())
    lines = (tampered / "base.ckpt").read_text().split("\n")
    lines[2] = " ".join(["0"] * len(lines[2].split()))
    (tampered / "base.ckpt").write_text("\n".join(lines))
    with pytest.raises(cli.CLIError, match="does not match"):
        cli.load_base_dir(tampered)


# ------------------------------------------------------- pipeline stages

def test_train_side_is_reproducible(pipeline, tmp_path):
    cfg = pipeline / "cfg.json"
    assert run("train-side", "--config", cfg, "--data", pipeline / "data", "--base", pipeline / "base",
               "--classifier", pipeline / "clf", "--out", tmp_path / "again") == 0
    assert _files(tmp_path / "again") == _files(pipeline / "side")
    man = json.loads((pipeline / "side" / "manifest.json").read_text())
    assert man["base_hash"] == json.loads((pipeline / "base" / "manifest.json").read_text())["base_hash"]


def test_generate_then_evaluate_reference_against_itself(pipeline, tmp_path):
    cfg = pipeline / "cfg.json"
    assert run("generate", "--config", cfg, "--data", pipeline / "data", "--base", pipeline / "base",
               "--side", pipeline / "side", "--method", "sidecontrol", "--out", tmp_path / "g") == 0
    hyp = [json.loads(x) for x in (tmp_path / "g" / "hyp.jsonl").read_text().splitlines()]
    assert len(hyp) == CONFIG["limit"] and all({"context", "attribute", "response"} <= set(h) for h in hyp)
    ref = tmp_path / "g" / "ref.jsonl"
    assert run("evaluate", "--config", cfg, "--hyp", ref, "--ref", ref, "--method", "oracle",
               "--out", tmp_path / "e") == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report[0]["bleu1"] == 100.0 and report[0]["bleu2"] == 100.0
    assert "oracle" in (tmp_path / "e" / "report.txt").read_text()


def test_evaluate_rejects_misaligned_files(pipeline, tmp_path, capsys):
    ref = tmp_path / "g.jsonl"
    ref.write_text(json.dumps({"context": ["a"], "attribute": {"act": "inform"}, "response": "b"}) + "\n")
    other = tmp_path / "h.jsonl"
    other.write_text(json.dumps({"context": ["z"], "attribute": {"act": "inform"}, "response": "b"}) + "\n")
    assert run("evaluate", "--seed", 1, "--hyp", other, "--ref", ref, "--out", tmp_path / "e") == 1
    assert "contexts differ" in json.loads(capsys.readouterr().err)["message"]


def test_grid_lambda_selects_best_in_grid(pipeline, tmp_path):
    cfg = pipeline / "cfg.json"
    assert run("grid-lambda", "--config", cfg, "--data", pipeline / "data", "--base", pipeline / "base",
               "--classifier", pipeline / "clf", "--grid", 1, 100000, "--include-zero", "--val-generations", 6,
               "--set", "side.max_steps=5", "--out", tmp_path / "grid") == 0
    grid = json.loads((tmp_path / "grid" / "grid.json").read_text())
    in_grid = [r for r in grid["rows"] if r["in_grid"]]
    assert [r["lambda"] for r in grid["rows"]] == [0.0, 1.0, 100000.0]
    assert grid["best_mean"] == max(r["mean"] for r in in_grid)
    assert grid["best_lambda"] in (1.0, 100000.0)
    side = json.loads((tmp_path / "grid" / "side.json").read_text())
    assert side["lambda"] == grid["best_lambda"]


def test_bench_decode_writes_medians(pipeline, tmp_path):
    cfg = pipeline / "cfg.json"
    assert run("bench-decode", "--config", cfg, "--data", pipeline / "data", "--base", pipeline / "base",
               "--side", pipeline / "side", "--methods", "base,sidecontrol", "--set", "generation.max_len=3",
               "--out", tmp_path / "b") == 0
    bench = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert set(bench) == {"base", "sidecontrol"}
    assert all(len(v["runs"]) == 3 and v["seconds_per_token"] > 0 for v in bench.values())


# -------------------------------------------------------------------- REPL

@pytest.fixture(scope="module")
def session_parts(pipeline):
    bundle = cli.load_base_dir(pipeline / "base")
    side, man = cli.load_side_dir(pipeline / "side", bundle)
    cfg = cli.load_config(pipeline / "cfg.json")
    return bundle, side, cfg


def _session(parts, seed=11):
    bundle, side, cfg = parts
    return cli.Session(bundle, side, "label", cfg, seed)


def test_repl_act_command_controls_generation(session_parts):
    bundle, side, cfg = session_parts
    s = _session(session_parts)
    assert s.handle(":act question") == ["act = question (id 1)"]
    out = s.handle("where is the car ?")
    ctx = bundle.vocab.encode("where is the car ?") + [cli.SEP]
    ref = generate_controlled(bundle.model, side, ctx, SemanticLabel(1), cfg.build("generation"),
                              cli.example_rng(11, 0))
    assert out == ["bot: " + bundle.vocab.decode(ref.tokens)]


def test_repl_alpha_one_matches_base_decoding(session_parts):
    bundle, _, cfg = session_parts
    s = _session(session_parts)
    s.handle(":alpha 1.0")
    for turn, utt in enumerate(["hello , how are you today ?", "i will fix the phone later ."]):
        ctx = s.context_ids() + bundle.vocab.encode(utt) + [cli.SEP]
        out = s.handle(utt)
        base = bl.generate(bundle.model, ctx, cfg.build("generation"), cli.example_rng(11, turn))
        assert out == ["bot: " + bundle.vocab.decode(base)]


def test_repl_bad_input_reprompts_without_state_change(session_parts):
    s = _session(session_parts)
    s.handle(":act directive")
    before = (s.act, s.alpha, list(s.history), s.turn)
    assert s.handle(":act shouting")[0].startswith("error:")
    assert s.handle(":alpha 2")[0].startswith("error:")
    assert s.handle(":alpha x")[0].startswith("error:")
    assert s.handle(":fact a fact")[0].startswith("error:")
    assert s.handle(":nonsense")[0].startswith("error:")
    assert (s.act, s.alpha, list(s.history), s.turn) == before


def test_repl_verbose_lists_alpha_and_candidates(session_parts):
    s = _session(session_parts)
    s.handle(":verbose on")
    lines = s.handle("hello")
    assert lines[0].startswith("bot:") and len(lines) >= 2
    assert "alpha=" in lines[1] and "beta=-" in lines[1] and lines[1].count(":") >= 5


def test_repl_transcript_replay(pipeline, tmp_path, monkeypatch, capsys):
    script = ":act question\nhow was the trip ?\n:verbose on\ni will send the report .\n:quit\nnever read\n"
    monkeypatch.setattr("sys.stdin", io.StringIO(script))
    assert run("repl", "--config", pipeline / "cfg.json", "--base", pipeline / "base", "--side",
               pipeline / "side", "--out", tmp_path / "r1") == 0
    transcript = tmp_path / "r1" / "transcript.jsonl"
    rows = [json.loads(x) for x in transcript.read_text().splitlines()]
    assert [r["input"] for r in rows[1:]][-1] == ":quit" and len(rows) == 6
    capsys.readouterr()
    assert run("repl", "--config", pipeline / "cfg.json", "--base", pipeline / "base", "--side",
               pipeline / "side", "--replay", transcript, "--out", tmp_path / "r2") == 0
    assert "replay ok: 5 inputs" in capsys.readouterr().out
    assert (tmp_path / "r2" / "transcript.jsonl").read_bytes() == transcript.read_bytes()
    rows[2]["output"] = ["bot: something else"]
    transcript.write_text("".join(json.dumps(r) + "\n" for r in rows))
    assert run("repl", "--config", pipeline / "cfg.json", "--base", pipeline / "base", "--side",
               pipeline / "side", "--replay", transcript, "--out", tmp_path / "r3") == 1
    assert json.loads(capsys.readouterr().err)["error"] == "replay-mismatch"


def test_repl_replay_refuses_other_seed(pipeline, tmp_path, monkeypatch, capsys):
    monkeypatch.setattr("sys.stdin", io.StringIO("hi\n"))
    assert run("repl", "--config", pipeline / "cfg.json", "--base", pipeline / "base", "--side",
               pipeline / "side", "--out", tmp_path / "r1") == 0
    assert run("repl", "--config", pipeline / "cfg.json", "--seed", 99, "--base", pipeline / "base", "--side",
               pipeline / "side", "--replay", tmp_path / "r1" / "transcript.jsonl", "--out", tmp_path / "r2") == 4
    assert json.loads(capsys.readouterr().err)["error"] == "hash-mismatch"
