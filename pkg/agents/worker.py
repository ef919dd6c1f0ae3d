import argparse
import importlib
import json
import logging
import os

from dotenv import load_dotenv

load_dotenv()


def run_worker(handler_path: str, workspace_dir: str) -> None:
    """Run one job description from ``job.json`` and write ``result.json`` next to it."""
    with open(os.path.join(workspace_dir, "job.json"), encoding="utf-8") as f:
        job = json.load(f)
    print(f"[Worker] starting job {job.get('job_id')} with {handler_path}")

    try:
        module_name, func_name = handler_path.split(":", 1)
        handler = getattr(importlib.import_module(module_name), func_name)
        result = {"status": "success", "job_id": job.get("job_id"), "result": handler(job)}
    except Exception as e:
        result = {"status": "error", "job_id": job.get("job_id"), "error": f"{type(e).__name__}: {e}"}

    result_file = os.path.join(workspace_dir, "result.json")
    tmp_file = result_file + ".tmp"
    with open(tmp_file, "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    os.replace(tmp_file, result_file)
    print(f"[Worker] job {job.get('job_id')} {result['status']}; result written to {result_file}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Library-building job worker")
    parser.add_argument("--handler", type=str, required=True, help="module:function taking the job dict")
    parser.add_argument("--workspace_dir", type=str, required=True, help="Directory holding job.json / result.json")
    parser.add_argument("--verbose", action="store_true")

    args = parser.parse_args()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    run_worker(args.handler, args.workspace_dir)
