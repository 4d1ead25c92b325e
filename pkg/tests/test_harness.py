import json
from dataclasses import replace

import pytest

from codriving import templates
from codriving.cli import main
from codriving.config import ConfigError, default_config, load_config
from codriving.gateway import StubBackend
from codriving.harness import EpisodeResult, Flags, report, run_batch, run_episode
from codriving.memory import load as load_memory


class Counting(StubBackend):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.calls = 0

    def chat(self, request):
        self.calls += 1
        return super().chat(request)


def short(kind, steps=150, **kw):
    cfg = default_config(kind, **kw)
    return replace(cfg, harness=replace(cfg.harness, step_budget=steps))


def test_hdv_only_world_makes_no_backend_calls():
    backend = Counting()
    result, state = run_episode(short("highway", 50, cav_count=0, hdv_count=4), backend)
    assert backend.calls == 0 and state.prompts == []
    assert result.success  # no CAVs to deliver, no CAV collisions


def test_empty_highway_batch_succeeds(tmp_path):
    cfg = default_config("highway", cav_count=0, hdv_count=0)
    (res,) = run_batch("highway", 1, out_dir=tmp_path, config=cfg)
    assert res.success


def test_no_memory_prompts_are_zero_shot():
    result, state = run_episode(short("intersection", 60), flags=Flags(memory=False))
    assert state.prompts
    assert all(templates.NO_MEMORY in p["messages"][1][1] for p in state.prompts)
    assert len(state.store) == 0


def test_memory_grows_and_is_used():
    _, state = run_episode(short("intersection", 60))
    assert len(state.store) > 0
    assert any(p["messages"][1][1].count("Experience ") for p in state.prompts[4:])


def test_no_negotiation_prompts_have_no_orders():
    _, state = run_episode(short("intersection", 60), flags=Flags(negotiation=False))
    assert all(templates.NO_CONFLICTS in p["messages"][1][1] for p in state.prompts)


def test_episode_determinism():
    a, sa = run_episode(short("merge", 120, seed=3))
    b, sb = run_episode(short("merge", 120, seed=3))
    assert a == b
    assert json.dumps(sa.trace, sort_keys=True) == json.dumps(sb.trace, sort_keys=True)
    assert json.dumps(sa.prompts, sort_keys=True) == json.dumps(sb.prompts, sort_keys=True)


def test_trace_rows_carry_decision_fields():
    _, state = run_episode(short("intersection", 20))
    decided = [r for r in state.trace if r["action"] is not None]
    assert decided
    keys = {"t", "id", "x", "y", "v", "heading", "action", "fallback", "orders", "memory_ids", "prompt_hash", "reply_hash"}
    assert keys <= set(decided[0])


def test_result_invariants():
    with pytest.raises(ValueError):
        EpisodeResult("intersection", 0, True, {"ids": [1, 2], "time": 1.0, "position": [0, 0]}, 10, {}, None)
    r = EpisodeResult("intersection", 0, False, None, 10, {1: 3.2}, "x")
    assert EpisodeResult.from_json(json.loads(json.dumps(r.to_json()))) == r


def test_batch_resume_and_report(tmp_path):
    cfg = short("intersection", 400)
    first = run_batch("intersection", 2, Flags(memory=False), tmp_path, cfg)
    trace = (tmp_path / "seed_000.trace.jsonl").read_bytes()
    # a longer batch reuses the finished seeds byte for byte
    again = run_batch("intersection", 3, Flags(memory=False), tmp_path, cfg)
    assert again[:2] == [replace(r, trace_path="seed_000.trace.jsonl" if r.seed == 0 else "seed_001.trace.jsonl") for r in first]
    assert (tmp_path / "seed_000.trace.jsonl").read_bytes() == trace
    rep = report(tmp_path)
    assert rep.episodes == 3
    assert rep.success_rate == sum(r.success for r in again) / 3
    with pytest.raises(ValueError):
        run_batch("intersection", 3, Flags(memory=True), tmp_path, cfg)


def test_collision_means_failure(tmp_path):
    # adversarial drivers without negotiation are the likeliest to collide
    results = run_batch("intersection", 8, Flags(negotiation=False, memory=False), tmp_path, short("intersection", 400),
                        backend=StubBackend("stub-adversarial"))
    for r in results:
        if r.collision is not None:
            assert not r.success


def test_memory_db_persists_between_batches(tmp_path):
    db = tmp_path / "mem.jsonl"
    run_batch("intersection", 1, Flags(), tmp_path / "a", short("intersection", 40), memory_db=db)
    n = len(load_memory(db))
    assert n > 0
    run_batch("intersection", 1, Flags(), tmp_path / "b", short("intersection", 40), memory_db=db)
    assert len(load_memory(db)) > n


class TestCli:
    def test_run_and_report(self, tmp_path, capsys):
        out = tmp_path / "batch"
        assert main(["run", "--scenario", "highway", "--seeds", "2", "--out", str(out)]) == 0
        assert "2/2" in capsys.readouterr().out
        assert main(["report", "--in", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["episodes"] == 2 and summary["success_rate"] == 1.0

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.toml"
        cfg.write_text('[scenario]\ncav_count = 2\n\n[harness]\nstep_budget = 30\n')
        out = tmp_path / "o"
        assert main(["run", "--scenario", "intersection", "--seeds", "1", "--no-memory", "--config", str(cfg), "--out", str(out)]) == 0
        res = json.loads((out / "seed_000.result.json").read_text())
        assert res["steps_run"] <= 30

    def test_unknown_config_key_fails(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text("[harness]\nstep_budjet = 30\n")
        assert main(["run", "--scenario", "merge", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
        assert "step_budjet" in capsys.readouterr().err
        with pytest.raises(ConfigError):
            load_config(cfg)

    def test_remote_without_credential_fails(self, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("CODRIVING_API_KEY", raising=False)
        cfg = tmp_path / "c.toml"
        cfg.write_text('[backend]\nendpoint = "https://example.test/v1/chat/completions"\n')
        code = main(["run", "--scenario", "merge", "--backend", "remote", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert code == 1
        assert "CODRIVING_API_KEY" in capsys.readouterr().err
