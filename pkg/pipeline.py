"""Stage bookkeeping, seed fan-out and the worker-process job pool."""
import functools
import hashlib
import json
import logging
import os
import pathlib
import subprocess
import sys
import time
import uuid
from typing import Any, Callable, Iterable, Sequence

from errors import ConfigurationError

logger = logging.getLogger(__name__)

WORKER_SCRIPT = pathlib.Path(__file__).with_name("agents") / "worker.py"
STAGE_MARKER = ".stage-{name}.json"


def derive_seed(global_seed: int, *labels: Any) -> int:
    """Per-stage seed: first 8 bytes of sha256("<seed>/<label>/...") as an unsigned int."""
    text = "/".join([str(global_seed), *(str(label) for label in labels)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big") & 0x7FFF_FFFF_FFFF_FFFF


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_json(path: str | os.PathLike, data: Any) -> None:
    atomic_write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")


def digest_inputs(root: str | os.PathLike, patterns: Iterable[str]) -> str:
    """Digest of the paths and contents of the files under ``root`` matching ``patterns``."""
    root = pathlib.Path(root)
    digest = hashlib.sha256()
    for path in sorted({p for pattern in patterns for p in root.glob(pattern) if p.is_file()}):
        digest.update(path.relative_to(root).as_posix().encode("utf-8") + b"\0")
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()[:16]


def stage(name: str, inputs: Sequence[str] = ()):
    """Skip a ``cmd_*`` stage whose completion marker exists in ``cfg.out`` unless ``force`` is set.

    The wrapped function receives the run config as its first argument. The
    marker records the config fingerprint and, when ``inputs`` names upstream
    artifacts (glob patterns under ``cfg.out``), a digest of those files, so a
    changed config or a regenerated upstream artifact re-runs the stage.
    """

    def decorator(func: Callable) -> Callable:
        @functools.wraps(func)
        def wrapper(cfg, *args, force: bool = False, **kwargs):
            marker = pathlib.Path(cfg.out) / STAGE_MARKER.format(name=name)
            expected = {"stage": name, "config": cfg.fingerprint()}
            if inputs:
                expected["inputs"] = digest_inputs(cfg.out, inputs)
            if marker.exists() and not force:
                recorded = json.loads(marker.read_text(encoding="utf-8"))
                if all(recorded.get(key) == value for key, value in expected.items()):
                    logger.info("[Stage] %s already complete in %s; use --force to redo", name, cfg.out)
                    return recorded.get("outputs")
                if recorded.get("config") == expected["config"]:
                    logger.info("[Stage] upstream artifacts of %s changed; re-running", name)
            logger.info("[Stage] running %s", name)
            outputs = func(cfg, *args, **kwargs)
            atomic_write_json(marker, {**expected, "outputs": outputs})
            return outputs

        return wrapper

    return decorator


class JobPool:
    """Bounded pool of ``agents/worker.py`` processes.

    Each job gets ``<workspace>/<job id>/job.json``; the worker answers with
    ``result.json`` holding ``{"status": "success", "result": ...}`` or
    ``{"status": "error", "error": ...}``. With ``jobs == 1`` the handler runs
    in-process. Results come back in submission order either way.
    """

    def __init__(self, jobs: int = 1, workspace: str | os.PathLike = "workspaces", poll_interval: float = 0.2):
        if jobs < 1:
            raise ConfigurationError(f"jobs must be >= 1, got {jobs}")
        self.jobs = jobs
        self.workspace = pathlib.Path(workspace).resolve()
        self.poll_interval = poll_interval

    def run(self, tasks: Iterable[dict], handler: Callable[[dict], Any]) -> list[dict]:
        tasks = list(tasks)
        if self.jobs == 1:
            return [self._run_local(task, handler) for task in tasks]
        return self._run_workers(tasks, handler)

    @staticmethod
    def _run_local(task: dict, handler: Callable[[dict], Any]) -> dict:
        try:
            return {"status": "success", "result": handler(task)}
        except Exception as e:
            logger.error("[Jobs] job %s failed: %s", task.get("job_id"), e)
            return {"status": "error", "error": f"{type(e).__name__}: {e}"}

    def spawn_worker(self, task: dict, handler: Callable) -> tuple[subprocess.Popen, pathlib.Path]:
        worker_id = f"{task.get('job_id', 'job')}-{uuid.uuid4().hex[:8]}"
        workspace_dir = self.workspace / worker_id
        workspace_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_json(workspace_dir / "job.json", task)
        cmd = [
            sys.executable, str(WORKER_SCRIPT),
            "--handler", f"{handler.__module__}:{handler.__name__}",
            "--workspace_dir", str(workspace_dir),
        ]
        env = dict(os.environ, PYTHONPATH=os.pathsep.join([str(WORKER_SCRIPT.parent.parent), os.environ.get("PYTHONPATH", "")]))
        with open(workspace_dir / "worker.log", "wb") as log:
            process = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=log, env=env)
        return process, workspace_dir

    @staticmethod
    def check_worker_status(workspace_dir: pathlib.Path, process: subprocess.Popen) -> dict | None:
        """None while running; the parsed result once the process has exited."""
        if process.poll() is None:
            return None
        result_file = workspace_dir / "result.json"
        if result_file.exists():
            try:
                return json.loads(result_file.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                return {"status": "error", "error": f"unreadable result: {e}"}
        log = workspace_dir / "worker.log"
        stderr = log.read_text(encoding="utf-8", errors="replace") if log.exists() else ""
        return {"status": "error", "error": f"worker exited with {process.returncode}: {stderr.strip()[-500:]}"}

    def _run_workers(self, tasks: list[dict], handler: Callable) -> list[dict]:
        results: list[dict | None] = [None] * len(tasks)
        pending = list(enumerate(tasks))
        running: dict[int, tuple[subprocess.Popen, pathlib.Path]] = {}
        started = time.perf_counter()
        while pending or running:
            while pending and len(running) < self.jobs:
                index, task = pending.pop(0)
                running[index] = self.spawn_worker(task, handler)
            for index, (process, workspace_dir) in list(running.items()):
                status = self.check_worker_status(workspace_dir, process)
                if status is None:
                    continue
                if status.get("status") != "success":
                    logger.error("[Jobs] job %s failed: %s", tasks[index].get("job_id"), status.get("error"))
                results[index] = status
                del running[index]
            if running:
                time.sleep(self.poll_interval)
        logger.info("[Jobs] %d job(s) on %d worker(s) in %.1fs", len(tasks), self.jobs, time.perf_counter() - started)
        return results
