"""Command-line pipeline: train -> gen-exact -> build-library -> optimize -> variation -> report.

Every stage reads its inputs from and writes its outputs to the run directory
(``--out``). All randomness derives from the global seed through
``pipeline.derive_seed(seed, <stage>, <labels>...)``.
"""
import argparse
import json
import logging
import pathlib
import sys

import numpy as np
import pandas as pd

from circuitgen import LtgSpec, assemble_exact_tnn, hidden_neuron_spec
from complib import ComponentLibrary, build_ltg_library, build_popcount_library, compare_with_truncation
from config import RunConfig, load_config
from errors import ConfigurationError, MissingArtifactError, TnnAxError
from moo import (
    NsgaConfig,
    ParetoPoint,
    assemble_design,
    battery_feasible,
    compare_library_modes,
    error_accuracy_sweep,
    nsga2,
    select_within_loss,
    system_pareto,
    system_point,
)
from netlist import area, bits_to_int, export_structural, simulate_batch
from pipeline import JobPool, atomic_write_json, atomic_write_text, derive_seed, stage
from plots import plot_error_sweep, plot_fronts, plot_variation
from tech import estimate_power, load_cell_library, load_interface_table
from tnn import (
    ComponentAssignment,
    Dataset,
    TnnModel,
    TrainParams,
    accuracy,
    code_bits,
    confidence_margin,
    ingest_csv,
    predict,
    select_hidden_size,
)
from varsim import VariationConfig, mc_accuracy

logger = logging.getLogger("tnn")

LOSS_LEVELS = (0.02, 0.05)


def _out(cfg: RunConfig, *parts: str) -> pathlib.Path:
    return pathlib.Path(cfg.out, *parts)


def _write_csv(path: pathlib.Path, rows: list[dict]) -> None:
    atomic_write_text(path, pd.DataFrame(rows).to_csv(index=False, float_format="%.6g"))


def _dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset.path is None:
        raise ConfigurationError("no dataset configured; pass --data or set dataset.path in the config")
    return ingest_csv(cfg.dataset.path, cfg.dataset.label_column, seed=derive_seed(cfg.seed, "split"),
                      test_fraction=cfg.dataset.test_fraction, eval_fraction=cfg.dataset.eval_fraction)


def _recall_dataset(cfg: RunConfig) -> None:
    """Later stages reuse the dataset recorded by `train` when none is configured."""
    record = _out(cfg, "dataset.json")
    if cfg.dataset.path is None and record.exists():
        data = json.loads(record.read_text(encoding="utf-8"))
        cfg.dataset.path, cfg.dataset.label_column = data["path"], data["label_column"]


def _model(cfg: RunConfig, k: int) -> TnnModel:
    path = _out(cfg, "models", f"model-k{k}.json")
    if not path.exists():
        raise MissingArtifactError(f"model {path}", "train")
    return TnnModel.load(path)


def _library(cfg: RunConfig, lib) -> ComponentLibrary:
    return ComponentLibrary.load(_out(cfg, "library"), lib)


def _front(cfg: RunConfig, k: int) -> list[dict]:
    path = _out(cfg, "fronts", f"front-k{k}.json")
    if not path.exists():
        raise MissingArtifactError(f"front {path}", "optimize")
    return json.loads(path.read_text(encoding="utf-8"))


@stage("train")
def cmd_train(cfg: RunConfig) -> list[str]:
    dataset = _dataset(cfg)
    atomic_write_json(_out(cfg, "dataset.json"), {"path": str(pathlib.Path(cfg.dataset.path).resolve()),
                                                  "label_column": cfg.dataset.label_column})
    written = []
    for k in cfg.k:
        params = TrainParams(**{**vars(cfg.train), "seed": derive_seed(cfg.seed, "train", k)})
        model, table = select_hidden_size(dataset, k, cfg.hidden, params, cfg.hidden_tolerance)
        test = dataset.split("test", k)
        model.meta["test_accuracy"] = accuracy(model, test)
        path = _out(cfg, "models", f"model-k{k}.json")
        model.save(path)
        _write_csv(_out(cfg, "models", f"selection-k{k}.csv"), table)
        print(f"[Train] k={k}: m={model.m}, test accuracy {100 * model.meta['test_accuracy']:.2f}%")
        written.append(str(path))
    return written


def _hardware_agreement(model: TnnModel, net, codes: np.ndarray, reference: np.ndarray) -> int:
    """Number of samples where the netlist's class index differs from the software prediction."""
    got = bits_to_int(simulate_batch(net, code_bits(codes, range(model.n_features), model.k)))
    return int((got != reference).sum())


@stage("gen-exact", inputs=("dataset.json", "models/*.json"))
def cmd_gen_exact(cfg: RunConfig) -> list[str]:
    lib = load_cell_library(cfg.tech)
    dataset = _dataset(cfg)
    written = []
    for k in cfg.k:
        model = _model(cfg, k)
        net = assemble_exact_tnn(model, cfg.ltg_style)
        test = dataset.split("test", k)
        mismatches = _hardware_agreement(model, net, test.codes, predict(model, test.codes))
        gate_area = area(net, lib)
        report = {
            "k": k,
            "m": model.m,
            "gates": len(net.gates),
            "kind_counts": net.kind_counts(),
            "area": gate_area,
            "area_mm2": lib.to_mm2(gate_area),
            "power_mw": estimate_power(lib, gate_area),
            "test_samples": int(len(test.labels)),
            "hw_sw_mismatches": mismatches,
        }
        atomic_write_text(_out(cfg, "exact", f"tnn-k{k}.gnl"), export_structural(net))
        atomic_write_json(_out(cfg, "exact", f"report-k{k}.json"), report)
        if mismatches:
            logger.error("[Exact] k=%d: %d hardware/software mismatches", k, mismatches)
        print(f"[Exact] k={k}: {len(net.gates)} gates, area {gate_area:.1f} ({lib.to_mm2(gate_area):.3f} mm^2)")
        written.append(str(_out(cfg, "exact", f"tnn-k{k}.gnl")))
    return written


@stage("build-library", inputs=("models/*.json",))
def cmd_build_library(cfg: RunConfig) -> list[str]:
    lib = load_cell_library(cfg.tech)
    specs: dict[str, LtgSpec] = {}
    sizes: set[int] = set()
    for k in cfg.k:
        model = _model(cfg, k)
        for row in model.w1:
            spec = hidden_neuron_spec(row, k)
            specs[spec.key] = spec
        sizes.update(int((row != 0).sum()) for row in model.w2)
    pool = JobPool(cfg.jobs, cfg.workspace)
    seed = derive_seed(cfg.seed, "library")
    library = ComponentLibrary()
    popcounts = build_popcount_library(sizes, cfg.cgp, lib, pool=pool, seed=seed)
    ltgs = build_ltg_library(specs.values(), cfg.ltg_metrics, cfg.cgp, lib, style=cfg.ltg_style, pool=pool, seed=seed)
    for build in (popcounts, ltgs):
        library.extend(build)
    root = _out(cfg, "library")
    library.save(root)
    atomic_write_json(root / "build.json", {
        "components": len(library),
        "keys": library.keys(),
        "refusals": library.refusals,
        "runs": len(library.manifests),
        "failed_jobs": popcounts.failed + ltgs.failed,
    })
    _write_csv(root / "truncation.csv", compare_with_truncation(popcounts.components, lib))
    print(f"[Library] {len(library)} component(s) over {len(library.keys())} key(s); "
          f"{len(library.refusals)} refused, {len(popcounts.failed) + len(ltgs.failed)} failed job(s)")
    return [str(root / "library.db")]


def _points(design_rows: list[dict]) -> list[ParetoPoint]:
    return [
        ParetoPoint(
            accuracy=r["accuracy"], est_area=r["est_area"], k=r["k"], interface=r["interface"],
            classifier_area_mm2=r["classifier_area_mm2"], classifier_power_mw=r["classifier_power_mw"],
            interface_area_mm2=r["interface_area_mm2"], interface_power_mw=r["interface_power_mw"],
            assignment=ComponentAssignment.from_dict(r["assignment"]), assignment_id=r["assignment_id"],
        )
        for r in design_rows
    ]


def _point_record(p: ParetoPoint, eval_accuracy: float | None) -> dict:
    return {
        **p.row(),
        "eval_accuracy": eval_accuracy,
        "classifier_power_mw": p.classifier_power_mw,
        "interface_power_mw": p.interface_power_mw,
        "assignment": p.assignment.to_dict(),
    }


@stage("optimize", inputs=("dataset.json", "models/*.json", "library/components/*.json"))
def cmd_optimize(cfg: RunConfig, compare_modes: bool = False) -> list[str]:
    lib = load_cell_library(cfg.tech)
    table = load_interface_table(cfg.interface_table)
    dataset = _dataset(cfg)
    library = _library(cfg, lib)
    selected = library.with_mode(cfg.library_mode)
    fronts: dict[int, list[ParetoPoint]] = {}
    written = []
    for k in cfg.k:
        model = _model(cfg, k)
        held_out = dataset.split("eval", k)
        if len(held_out.labels) == 0:
            held_out = dataset.split("fit", k)
        test = dataset.split("test", k)
        nsga_cfg = NsgaConfig(**{**vars(cfg.nsga), "seed": derive_seed(cfg.seed, "nsga2", k)})
        designs = nsga2(model, selected, held_out, nsga_cfg, lib)
        records, points = [], []
        for index, d in enumerate(designs):
            p = system_point(accuracy(model, test, d.assignment, selected), d.area, d.assignment, f"k{k}-{index:03d}",
                             k=k, n_features=model.n_features, lib=lib, table=table, converter=cfg.converter)
            points.append(p)
            records.append(_point_record(p, d.accuracy))
        fronts[k] = points
        atomic_write_json(_out(cfg, "fronts", f"front-k{k}.json"), records)
        _write_csv(_out(cfg, "fronts", f"front-k{k}.csv"), [p.row() for p in points])
        sweep = error_accuracy_sweep(model, library, held_out, "mde")
        _write_csv(_out(cfg, "fronts", f"error-sweep-k{k}.csv"), sweep)
        plot_error_sweep(sweep, _out(cfg, "fronts", f"error-sweep-k{k}.svg"))
        if compare_modes:
            summary = compare_library_modes(model, library, held_out, nsga_cfg, lib)
            atomic_write_json(_out(cfg, "fronts", f"modes-k{k}.json"),
                              {mode: {"designs": s["designs"], "inverted_hypervolume": s["inverted_hypervolume"]}
                               for mode, s in summary.items()})
        print(f"[NSGA-II] k={k}: {len(points)} design(s) on the front")
        written.append(str(_out(cfg, "fronts", f"front-k{k}.csv")))
    combined = system_pareto(fronts)
    _write_csv(_out(cfg, "fronts", "system_front.csv"), [p.row() for p in combined])
    atomic_write_json(_out(cfg, "fronts", "system_front.json"), [_point_record(p, None) for p in combined])
    plot_fronts(fronts, combined, _out(cfg, "fronts", "fronts.svg"), title=dataset.name)
    print(f"[Pareto] system front: {len(combined)} design(s) across k={sorted({p.k for p in combined})}")
    return written + [str(_out(cfg, "fronts", "system_front.csv"))]


@stage("variation", inputs=("dataset.json", "models/*.json", "fronts/front-k*.json"))
def cmd_variation(cfg: RunConfig) -> list[str]:
    dataset = _dataset(cfg)
    reports = {}
    summaries = {}
    for k in cfg.k:
        model = _model(cfg, k)
        vcfg = VariationConfig(cfg.variation.sigma, cfg.variation.trials, derive_seed(cfg.seed, "variation", k))
        reports[f"exact k={k}"] = mc_accuracy(model, dataset, vcfg)
        front_path = _out(cfg, "fronts", f"front-k{k}.json")
        if front_path.exists():
            lib = load_cell_library(cfg.tech)
            library = _library(cfg, lib)
            exact_accuracy = model.meta.get("test_accuracy", accuracy(model, dataset.split("test", k)))
            pick = select_within_loss(_points(_front(cfg, k)), exact_accuracy, LOSS_LEVELS[0])
            if pick is not None:
                reports[f"approx k={k}"] = mc_accuracy(model, dataset, vcfg, pick.assignment, library)
    for label, report in reports.items():
        slug = label.replace(" ", "-").replace("=", "")
        _write_csv(_out(cfg, "variation", f"{slug}.csv"), report.to_frame().to_dict("records"))
        summaries[label] = report.summary()
        print(f"[Variation] {label}: nominal {100 * report.nominal:.2f}%, "
              f"mean {100 * report.mean:.2f}% +- {100 * report.std:.2f}%")
    atomic_write_json(_out(cfg, "variation", "summary.json"), summaries)
    plot_variation(reports, _out(cfg, "variation", "variation.svg"), title=dataset.name)
    return [str(_out(cfg, "variation", "summary.json"))]


def _report_row(design: str, point: ParetoPoint, exact_accuracy: float, margin: int | None) -> dict:
    return {
        "design": design,
        "k": point.k,
        "accuracy": point.accuracy,
        "accuracy_loss": exact_accuracy - point.accuracy,
        "classifier_area_mm2": point.classifier_area_mm2,
        "interface_area_mm2": point.interface_area_mm2,
        "total_area_mm2": point.total_area,
        "total_power_mw": point.total_power,
        "battery_feasible": battery_feasible(point.total_power),
        "margin": margin,
    }


def _exact_row(cfg: RunConfig, model: TnnModel, k: int, dataset: Dataset, lib, table) -> dict:
    report_path = _out(cfg, "exact", f"report-k{k}.json")
    if not report_path.exists():
        raise MissingArtifactError(f"exact report {report_path}", "gen-exact")
    exact = json.loads(report_path.read_text(encoding="utf-8"))
    test = dataset.split("test", k)
    acc = accuracy(model, test)
    p = system_point(acc, exact["area"], ComponentAssignment((), ()), "exact", k=k, n_features=model.n_features,
                     lib=lib, table=table, converter=cfg.converter)
    return _report_row(f"exact k={k}", p, acc, confidence_margin(model, test) if model.n_classes > 1 else None)


@stage("report", inputs=("dataset.json", "models/*.json", "exact/report-k*.json", "fronts/front-k*.json",
                          "library/components/*.json"))
def cmd_report(cfg: RunConfig) -> list[str]:
    lib = load_cell_library(cfg.tech)
    table = load_interface_table(cfg.interface_table)
    dataset = _dataset(cfg)
    rows = []
    library = None
    for k in cfg.k:
        model = _model(cfg, k)
        exact = _exact_row(cfg, model, k, dataset, lib, table)
        rows.append(exact)
        if not _out(cfg, "fronts", f"front-k{k}.json").exists():
            continue
        library = library or _library(cfg, lib)
        test = dataset.split("test", k)
        points = _points(_front(cfg, k))
        for loss in LOSS_LEVELS:
            pick = select_within_loss(points, exact["accuracy"], loss)
            if pick is None:
                continue
            # cost of the assembled netlist, not the surrogate the front was ranked by
            assembled = area(assemble_design(model, library, pick.assignment), lib)
            p = system_point(pick.accuracy, assembled, pick.assignment, pick.assignment_id, k=k,
                             n_features=model.n_features, lib=lib, table=table, converter=cfg.converter)
            rows.append(_report_row(f"<= {100 * loss:.0f}% loss k={k}", p, exact["accuracy"],
                                    confidence_margin(model, test, pick.assignment, library)))
    _write_csv(_out(cfg, "report.csv"), rows)
    atomic_write_json(_out(cfg, "report.json"), rows)
    print(pd.DataFrame(rows).to_string(index=False, float_format=lambda v: f"{v:.4g}"))
    return [str(_out(cfg, "report.csv"))]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="Global seed")
    common.add_argument("--jobs", type=int, help="Parallel worker processes")
    common.add_argument("--force", action="store_true", help="Re-run a completed stage")
    common.add_argument("--tech", type=str, help="Technology file with per-gate areas")
    common.add_argument("--interface-table", dest="interface_table", type=str, help="Converter cost CSV")
    common.add_argument("--out", type=str, help="Run directory")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(description="Approximate printed ternary neural network design flow")
    sub = parser.add_subparsers(dest="command", required=True)
    train = sub.add_parser("train", parents=[common], help="Train one TNN per input precision")
    train.add_argument("--data", type=str, help="Dataset CSV")
    train.add_argument("--label", type=str, help="Label column name (default: last column)")
    sub.add_parser("gen-exact", parents=[common], help="Assemble exact bespoke netlists")
    sub.add_parser("build-library", parents=[common], help="Evolve approximate LTG/popcount libraries")
    optimize = sub.add_parser("optimize", parents=[common], help="NSGA-II over component assignments")
    optimize.add_argument("--library-mode", dest="library_mode", choices=("pareto", "all", "mde", "wcde"))
    optimize.add_argument("--compare-modes", dest="compare_modes", action="store_true",
                          help="Also run every library mode and report inverted hypervolumes")
    sub.add_parser("variation", parents=[common], help="Monte-Carlo converter variation analysis")
    sub.add_parser("report", parents=[common], help="Summary table of the run")
    return parser


COMMANDS = {
    "train": cmd_train,
    "gen-exact": cmd_gen_exact,
    "build-library": cmd_build_library,
    "optimize": cmd_optimize,
    "variation": cmd_variation,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    overrides = {key: getattr(args, key, None) for key in ("seed", "jobs", "tech", "interface_table", "out",
                                                           "library_mode")}
    try:
        cfg = load_config(args.config, overrides)
        if getattr(args, "data", None):
            cfg.dataset.path = args.data
        if getattr(args, "label", None):
            cfg.dataset.label_column = args.label
        _recall_dataset(cfg)
        cfg.validate()
        extra = {"compare_modes": True} if getattr(args, "compare_modes", False) else {}
        COMMANDS[args.command](cfg, force=args.force, **extra)
    except TnnAxError as e:
        print(f"[Error] {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
