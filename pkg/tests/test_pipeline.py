import json
from dataclasses import dataclass

import pytest

from complib import run_cgp_job
from errors import ConfigurationError
from pipeline import JobPool, atomic_write_json, derive_seed, digest_inputs, stage


@dataclass
class _Cfg:
    out: str
    tag: str = "a"

    def fingerprint(self) -> str:
        return self.tag


def test_derive_seed():
    assert derive_seed(0, "train", 2) == derive_seed(0, "train", 2)
    assert derive_seed(0, "train", 2) != derive_seed(0, "train", 4)
    assert derive_seed(0, "train") != derive_seed(1, "train")
    assert 0 <= derive_seed(123, "x") < 2 ** 63


def test_atomic_write_leaves_no_temporaries(tmp_path):
    target = tmp_path / "deep" / "out.json"
    atomic_write_json(target, {"b": 1, "a": [1, 2]})
    assert json.loads(target.read_text(encoding="utf-8")) == {"a": [1, 2], "b": 1}
    assert [p.name for p in target.parent.iterdir()] == ["out.json"]


def test_stage_runs_once_per_fingerprint(tmp_path):
    calls = []

    @stage("demo")
    def run(cfg):
        calls.append(cfg.tag)
        return [f"output-{len(calls)}"]

    cfg = _Cfg(str(tmp_path))
    assert run(cfg) == ["output-1"]
    assert run(cfg) == ["output-1"]
    assert calls == ["a"]
    assert run(cfg, force=True) == ["output-2"]
    assert run(_Cfg(str(tmp_path), tag="b")) == ["output-3"]
    marker = json.loads((tmp_path / ".stage-demo.json").read_text(encoding="utf-8"))
    assert marker == {"stage": "demo", "config": "b", "outputs": ["output-3"]}
    assert run.__name__ == "run"


def test_stage_reruns_when_upstream_artifacts_change(tmp_path):
    calls = []

    @stage("downstream", inputs=("models/*.json",))
    def run(cfg):
        calls.append(len(calls))
        return [f"output-{len(calls)}"]

    model = tmp_path / "models" / "model-k1.json"
    atomic_write_json(model, {"w1": [[1]]})
    cfg = _Cfg(str(tmp_path))
    assert run(cfg) == ["output-1"]
    assert run(cfg) == ["output-1"]
    # rewriting identical content keeps the stage complete
    atomic_write_json(model, {"w1": [[1]]})
    assert run(cfg) == ["output-1"]
    atomic_write_json(model, {"w1": [[-1]]})
    assert run(cfg) == ["output-2"]
    atomic_write_json(tmp_path / "models" / "model-k2.json", {"w1": [[0]]})
    assert run(cfg) == ["output-3"]
    marker = json.loads((tmp_path / ".stage-downstream.json").read_text(encoding="utf-8"))
    assert marker["inputs"] == digest_inputs(tmp_path, ["models/*.json"])
    assert calls == [0, 1, 2]


def test_input_digest_covers_names_and_contents(tmp_path):
    empty = digest_inputs(tmp_path, ["*.json"])
    (tmp_path / "a.json").write_text("1", encoding="utf-8")
    first = digest_inputs(tmp_path, ["*.json"])
    assert first != empty
    (tmp_path / "a.json").rename(tmp_path / "b.json")
    assert digest_inputs(tmp_path, ["*.json"]) != first
    assert digest_inputs(tmp_path, ["*.csv"]) == empty


def test_pool_needs_a_worker():
    with pytest.raises(ConfigurationError):
        JobPool(0)


def test_in_process_pool_keeps_order_and_captures_errors(tmp_path):
    def handler(task):
        if task["x"] == 2:
            raise ValueError("two")
        return task["x"] * 10

    results = JobPool(1, tmp_path).run([{"job_id": str(x), "x": x} for x in range(4)], handler)
    assert [r["status"] for r in results] == ["success", "success", "error", "success"]
    assert [r.get("result") for r in results] == [0, 10, None, 30]
    assert "ValueError: two" in results[2]["error"]


def _cgp_job(lib, job_id: str, m: int, seed: int) -> dict:
    return {
        "job_id": job_id, "kind": "popcount", "key": f"pc-m{m}", "metric": "mae", "tau": 0.5, "seed": seed,
        "tech": lib.to_dict(), "cgp": {"lam": 2, "max_iterations": 30, "restarts": 1}, "m": m,
    }


def test_worker_processes_match_in_process_results(tmp_path, lib):
    tasks = [_cgp_job(lib, f"pc-m{m}-{s}", m, s) for m in (3, 4) for s in (1, 2)]
    local = JobPool(1, tmp_path / "local").run(tasks, run_cgp_job)
    remote = JobPool(2, tmp_path / "remote", poll_interval=0.05).run(tasks, run_cgp_job)
    assert [r["status"] for r in remote] == ["success"] * 4
    for a, b in zip(local, remote):
        assert a["result"]["gnl"] == b["result"]["gnl"]
        assert a["result"]["report"] == b["result"]["report"]
    workspaces = sorted((tmp_path / "remote").iterdir())
    assert len(workspaces) == 4
    assert all((w / "result.json").exists() and (w / "job.json").exists() for w in workspaces)


def test_worker_reports_handler_failure(tmp_path, lib):
    bad = {
        "job_id": "too-wide", "kind": "ltg", "key": "ltg-p50-n50-k2", "metric": "mde", "tau": 1.0, "seed": 0,
        "tech": lib.to_dict(), "cgp": {"max_iterations": 5}, "weights": [1] * 50 + [-1] * 50, "k": 2,
    }
    (result,) = JobPool(2, tmp_path).run([bad], run_cgp_job)
    assert result["status"] == "error"
    assert "GenerationRefused" in result["error"]
