"""Libraries of approximate LTG and popcount components.

Components are keyed by the canonical unit they implement (``ltg-p<P>-n<N>-k<k>``
or ``pc-m<m>``) so one library serves every neuron with the same shape. On disk
a library is ``components/<hash>.gnl`` plus a ``<hash>.json`` sidecar per
component and a SQLite index, ``library.db``.
"""
import hashlib
import json
import logging
import math
import pathlib
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np
from sqlalchemy import Float, String, Text, create_engine, select
from sqlalchemy.orm import DeclarativeBase, Mapped, Session, mapped_column

from bdderr import ErrorAnalyzer, ErrorReport, ltg_report, popcount_report
from cgp import CgpSettings, evolve
from circuitgen import (
    LTG_STYLES,
    LtgSpec,
    LtgStyle,
    PopcountSpec,
    gen_ltg_exact,
    gen_popcount_exact,
    gen_popcount_truncated,
)
from errors import (
    ContractViolation,
    GenerationRefused,
    MissingArtifactError,
    MissingComponentKey,
    UnresolvedComponentError,
)
from moo import inverted_hypervolume, normalize_front
from netlist import Netlist, area, export_structural, parse_structural
from pipeline import JobPool, atomic_write_json, atomic_write_text, derive_seed
from tech import CellLibrary

logger = logging.getLogger(__name__)

ComponentKind = Literal["ltg", "popcount"]
LTG_LIBRARY_METRICS = ("mde", "wcde")
POPCOUNT_LIBRARY_METRICS = ("mae", "wcae")
LIBRARY_MODES = ("pareto", "all", "mde", "wcde")
ID_LENGTH = 16

_LTG_KEY = re.compile(r"^ltg-p(\d+)-n(\d+)-k(\d+)$")
_PC_KEY = re.compile(r"^pc-m(\d+)$")


def spec_from_key(key: str) -> LtgSpec | PopcountSpec:
    if match := _LTG_KEY.match(key):
        p, n, k = map(int, match.groups())
        return LtgSpec((1,) * p + (-1,) * n, k)
    if match := _PC_KEY.match(key):
        return PopcountSpec(int(match.group(1)))
    raise ContractViolation(f"not a component key: '{key}'")


@dataclass(frozen=True)
class ApproxComponent:
    key: str
    kind: ComponentKind
    netlist: Netlist
    report: ErrorReport
    area: float
    metric: str | None = None
    tau: float | None = None
    run_id: str = "exact"
    style: str | None = None

    @property
    def id(self) -> str:
        # same netlist under two keys (e.g. a constant) must stay two rows
        return hashlib.sha256(f"{self.key}/{self.netlist.digest()}".encode("utf-8")).hexdigest()[:ID_LENGTH]

    @property
    def is_exact(self) -> bool:
        return self.report.ep == 0

    def error(self, metric: str) -> Fraction:
        return self.report.metric(metric)

    def sidecar(self) -> dict:
        return {
            "id": self.id,
            "key": self.key,
            "kind": self.kind,
            "area": self.area,
            "metric": self.metric,
            "tau": self.tau,
            "run_id": self.run_id,
            "style": self.style,
            "gates": len(self.netlist.gates),
            "report": self.report.to_dict(),
        }


def exact_component(spec: LtgSpec | PopcountSpec, lib: CellLibrary, style: LtgStyle = "two_tree") -> ApproxComponent:
    if isinstance(spec, LtgSpec):
        net = gen_ltg_exact(spec, style)
        return ApproxComponent(spec.key, "ltg", net, ltg_report(1 << spec.input_bits, 0, 0, 0),
                               area(net, lib), style=style)
    net = gen_popcount_exact(spec)
    return ApproxComponent(spec.key, "popcount", net, popcount_report(1 << spec.m, 0, 0, 0), area(net, lib))


def verify_component(component: ApproxComponent, analyzer: ErrorAnalyzer | None = None) -> ErrorReport:
    """Recompute the error report of a stored component against a freshly generated exact circuit."""
    analyzer = analyzer or ErrorAnalyzer()
    spec = spec_from_key(component.key)
    if isinstance(spec, LtgSpec):
        spec.check_size()
        return analyzer.ltg_error(gen_ltg_exact(spec), component.netlist, spec)
    return analyzer.popcount_error(gen_popcount_exact(spec), component.netlist)


@dataclass(frozen=True)
class TauSchedule:
    metric: str
    lo: float
    hi: float
    count: int = 10

    def __post_init__(self):
        if not self.lo > 0:
            raise ContractViolation(f"tau schedule needs lo > 0, got {self.lo}")
        if self.hi < self.lo:
            raise ContractViolation(f"tau schedule needs hi >= lo, got [{self.lo}, {self.hi}]")
        if self.count < 1:
            raise ContractViolation("tau schedule needs at least one point")

    def points(self) -> list[float]:
        if self.count == 1:
            return [float(self.lo)]
        return [float(t) for t in np.geomspace(self.lo, self.hi, self.count)]


def popcount_tau_schedule(m: int, count: int = 10) -> tuple[TauSchedule, TauSchedule]:
    """mae from 0.1 to 0.5*2^g and wcae from 1 to 0.5*2^m, with g = ceil(log2 m)."""
    if m < 2:
        raise ContractViolation(f"popcount schedules need m >= 2, got {m}")
    g = math.ceil(math.log2(m))
    return TauSchedule("mae", 0.1, 0.5 * 2 ** g, count), TauSchedule("wcae", 1.0, 0.5 * 2 ** m, count)


def ltg_tau_schedule(spec: LtgSpec, count: int = 10) -> tuple[TauSchedule, TauSchedule]:
    """Distance-error ranges scaled to the bit width of the largest |S| the unit can see."""
    g = max(spec.max_magnitude.bit_length(), 1)
    return TauSchedule("mde", 1e-3, 0.5 * 2 ** g, count), TauSchedule("wcde", 1.0, float(2 ** g), count)


def popcount_time_limit(m: int, base_seconds: float) -> float:
    if m < 16:
        return base_seconds
    if m < 32:
        return 2 * base_seconds
    return 10 * base_seconds


def run_cgp_job(job: dict) -> dict:
    """Worker entry: best of ``restarts`` CGP runs for one (unit, metric, tau)."""
    lib = CellLibrary.from_dict(job["tech"])
    settings = CgpSettings(**job["cgp"])
    if job["kind"] == "ltg":
        spec = LtgSpec(tuple(job["weights"]), job["k"])
        spec.check_size()
        seed_net = gen_ltg_exact(spec, job.get("style") or "two_tree")
    else:
        spec = PopcountSpec(job["m"])
        seed_net = gen_popcount_exact(spec)
    best = None
    for restart in range(settings.restarts):
        cfg = settings.config(job["metric"], job["tau"], derive_seed(job["seed"], restart), job.get("time_limit"))
        result = evolve(seed_net, spec, cfg, lib)
        if best is None or result.area < best.area:
            best = result
    return {
        "gnl": export_structural(best.netlist),
        "area": best.area,
        "report": best.report.to_dict(),
        "manifest": best.manifest(),
    }


@dataclass
class LibraryBuild:
    components: list[ApproxComponent] = field(default_factory=list)
    refusals: dict[str, str] = field(default_factory=dict)
    failed: list[str] = field(default_factory=list)
    manifests: dict[str, dict] = field(default_factory=dict)


def _collect(build: LibraryBuild, tasks: list[dict], results: list[dict], lib: CellLibrary, node_budget: int) -> None:
    analyzer = ErrorAnalyzer(node_budget)
    for task, outcome in zip(tasks, results):
        if outcome.get("status") != "success":
            build.failed.append(task["job_id"])
            continue
        payload = outcome["result"]
        net = parse_structural(payload["gnl"])
        component = ApproxComponent(
            key=task["key"],
            kind=task["kind"],
            netlist=net,
            report=ErrorReport.from_dict(payload["report"]),
            area=area(net, lib),
            metric=task["metric"],
            tau=task["tau"],
            run_id=task["job_id"],
            style=task.get("style"),
        )
        recomputed = verify_component(component, analyzer)
        if recomputed != component.report or component.error(task["metric"]) > task["tau"]:
            logger.error("[Library] %s failed re-verification; dropped", task["job_id"])
            build.failed.append(task["job_id"])
            continue
        build.components.append(component)
        build.manifests[task["job_id"]] = {
            "job_id": task["job_id"],
            "key": task["key"],
            "component_id": component.id,
            "metric": task["metric"],
            "tau": task["tau"],
            **payload["manifest"],
        }


def _task(kind: str, key: str, metric: str, tau: float, index: int, seed: int, lib: CellLibrary,
          settings: CgpSettings, **unit) -> dict:
    job_id = f"{key}-{metric}-{index:02d}"
    return {
        "job_id": job_id,
        "kind": kind,
        "key": key,
        "metric": metric,
        "tau": tau,
        "seed": derive_seed(seed, job_id),
        "tech": lib.to_dict(),
        "cgp": {k: getattr(settings, k) for k in CgpSettings.__dataclass_fields__},
        **unit,
    }


def build_popcount_library(sizes: Iterable[int], settings: CgpSettings, lib: CellLibrary, *,
                           pool: JobPool | None = None, seed: int = 0) -> LibraryBuild:
    build = LibraryBuild()
    tasks = []
    for m in sorted(set(sizes)):
        spec = PopcountSpec(m)
        build.components.append(exact_component(spec, lib))
        if m < 2:
            continue
        limit = popcount_time_limit(m, settings.time_limit) if settings.time_limit else None
        for schedule in popcount_tau_schedule(m, settings.points):
            for index, tau in enumerate(schedule.points()):
                tasks.append(_task("popcount", spec.key, schedule.metric, tau, index, seed, lib, settings,
                                   m=m, time_limit=limit))
    logger.info("[Library] popcount: %d CGP job(s) for sizes %s", len(tasks), sorted(set(sizes)))
    results = (pool or JobPool()).run(tasks, run_cgp_job)
    _collect(build, tasks, results, lib, settings.node_budget)
    return build


def build_ltg_library(specs: Iterable[LtgSpec], metrics: Sequence[str], settings: CgpSettings, lib: CellLibrary, *,
                      style: LtgStyle = "two_tree", pool: JobPool | None = None, seed: int = 0) -> LibraryBuild:
    build = LibraryBuild()
    tasks = []
    unique = {spec.canonical().key: spec.canonical() for spec in specs}
    for key in sorted(unique):
        spec = unique[key]
        try:
            spec.check_size()
        except GenerationRefused as e:
            logger.warning("[Library] %s refused: %s", key, e.reason)
            build.refusals[key] = e.reason
            continue
        build.components.append(exact_component(spec, lib, style))
        for schedule in ltg_tau_schedule(spec, settings.points):
            if schedule.metric not in metrics:
                continue
            for index, tau in enumerate(schedule.points()):
                tasks.append(_task("ltg", key, schedule.metric, tau, index, seed, lib, settings,
                                   weights=list(spec.weights), k=spec.k, style=style))
    logger.info("[Library] LTG: %d CGP job(s) over %d unit(s)", len(tasks), len(unique))
    results = (pool or JobPool()).run(tasks, run_cgp_job)
    _collect(build, tasks, results, lib, settings.node_budget)
    return build


def _dominates(a: tuple, b: tuple) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def _non_dominated(members: list[ApproxComponent], metric: str) -> list[ApproxComponent]:
    ordered = sorted(members, key=lambda c: (c.area, c.error(metric), c.id))
    kept: list[ApproxComponent] = []
    best_error: Fraction | None = None
    for c in ordered:
        err = c.error(metric)
        if best_error is None or err < best_error:
            kept.append(c)
            best_error = err
    return kept


def pareto_filter(components: Iterable[ApproxComponent]) -> list[ApproxComponent]:
    """Area/error non-dominated subset per key and metric; exact components always stay."""
    by_key: dict[str, list[ApproxComponent]] = {}
    for c in components:
        by_key.setdefault(c.key, []).append(c)
    kept: dict[str, ApproxComponent] = {}
    for key in sorted(by_key):
        members = by_key[key]
        for c in members:
            if c.metric is None:
                kept.setdefault(c.id, c)
        metrics = sorted({c.metric for c in members if c.metric is not None})
        for metric in metrics:
            pool = [c for c in members if c.metric == metric or c.metric is None]
            for c in _non_dominated(pool, metric):
                kept.setdefault(c.id, c)
    return sorted(kept.values(), key=lambda c: (c.key, c.area, c.id))


class Base(DeclarativeBase):
    pass


class ComponentRow(Base):
    __tablename__ = "components"

    id: Mapped[str] = mapped_column(String(ID_LENGTH), primary_key=True)
    key: Mapped[str] = mapped_column(String(64), index=True)
    kind: Mapped[str] = mapped_column(String(16))
    area: Mapped[float] = mapped_column(Float)
    metric: Mapped[str | None] = mapped_column(String(8), nullable=True)
    tau: Mapped[float | None] = mapped_column(Float, nullable=True)
    run_id: Mapped[str] = mapped_column(String(96))
    style: Mapped[str | None] = mapped_column(String(16), nullable=True)
    report_json: Mapped[str] = mapped_column(Text)


class RefusalRow(Base):
    __tablename__ = "refusals"

    key: Mapped[str] = mapped_column(String(64), primary_key=True)
    reason: Mapped[str] = mapped_column(Text)


class RunRow(Base):
    __tablename__ = "runs"

    job_id: Mapped[str] = mapped_column(String(96), primary_key=True)
    key: Mapped[str] = mapped_column(String(64), index=True)
    manifest_json: Mapped[str] = mapped_column(Text)


class ComponentLibrary:
    """Components grouped by key, ordered by (area, id) within a key.

    ``manifests`` maps the run id of every CGP-evolved component to the run's
    configuration (seed included), termination reason and best area.
    """

    def __init__(self, components: Iterable[ApproxComponent] = (), refusals: dict[str, str] | None = None,
                 manifests: dict[str, dict] | None = None):
        self._by_key: dict[str, dict[str, ApproxComponent]] = {}
        self.refusals: dict[str, str] = dict(refusals or {})
        self.manifests: dict[str, dict] = dict(manifests or {})
        for c in components:
            self.add(c)

    def add(self, component: ApproxComponent) -> None:
        entries = self._by_key.setdefault(component.key, {})
        current = entries.get(component.id)
        # keep the exact provenance when the same netlist came back from CGP
        if current is None or (component.metric is None and current.metric is not None):
            entries[component.id] = component

    def extend(self, build: LibraryBuild) -> None:
        for c in build.components:
            self.add(c)
        self.refusals.update(build.refusals)
        self.manifests.update(build.manifests)

    def keys(self) -> list[str]:
        return sorted(self._by_key)

    def __contains__(self, key: str) -> bool:
        return key in self._by_key

    def __iter__(self) -> Iterator[ApproxComponent]:
        for key in self.keys():
            yield from self.get(key)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_key.values())

    def get(self, key: str) -> list[ApproxComponent]:
        if key not in self._by_key:
            raise MissingComponentKey(key)
        return sorted(self._by_key[key].values(), key=lambda c: (c.area, c.id))

    def resolve(self, key: str, component_id: str) -> ApproxComponent:
        try:
            return self._by_key[key][component_id]
        except KeyError:
            raise UnresolvedComponentError(f"component '{component_id}' not found under key '{key}'") from None

    def exact(self, key: str) -> ApproxComponent:
        exact = [c for c in self.get(key) if c.metric is None]
        if not exact:
            raise MissingComponentKey(key)
        return exact[0]

    def require(self, keys: Iterable[str]) -> None:
        for key in keys:
            if key not in self._by_key:
                if key in self.refusals:
                    raise MissingComponentKey(f"{key} (refused: {self.refusals[key]})")
                raise MissingComponentKey(key)

    def with_mode(self, mode: str) -> "ComponentLibrary":
        """Selection used by the optimizer: Pareto union, everything, or LTGs of one metric."""
        if mode not in LIBRARY_MODES:
            raise ContractViolation(f"unknown library mode '{mode}'")
        everything = list(self)
        if mode == "all":
            selected = everything
        elif mode == "pareto":
            selected = pareto_filter(everything)
        else:
            selected = [c for c in everything if c.kind == "popcount" or c.metric in (None, mode)]
        run_ids = {c.run_id for c in selected}
        return ComponentLibrary(selected, self.refusals,
                                {job: m for job, m in self.manifests.items() if job in run_ids})

    def audit(self) -> int:
        """Re-verify every stored report; raises on the first mismatch."""
        analyzer = ErrorAnalyzer()
        for c in self:
            if verify_component(c, analyzer) != c.report:
                raise ContractViolation(f"stored report of {c.key}/{c.id} does not match its netlist")
        return len(self)

    def save(self, root: str | pathlib.Path) -> None:
        root = pathlib.Path(root)
        (root / "components").mkdir(parents=True, exist_ok=True)
        engine = create_engine(f"sqlite:///{root / 'library.db'}")
        Base.metadata.create_all(engine)
        with Session(engine) as session:
            for c in self:
                atomic_write_text(root / "components" / f"{c.id}.gnl", export_structural(c.netlist))
                atomic_write_json(root / "components" / f"{c.id}.json", c.sidecar())
                session.merge(ComponentRow(
                    id=c.id, key=c.key, kind=c.kind, area=c.area, metric=c.metric, tau=c.tau,
                    run_id=c.run_id, style=c.style, report_json=json.dumps(c.report.to_dict(), sort_keys=True),
                ))
                session.commit()
            for key, reason in sorted(self.refusals.items()):
                session.merge(RefusalRow(key=key, reason=reason))
            session.commit()
            if self.manifests:
                (root / "runs").mkdir(exist_ok=True)
            for job_id, manifest in sorted(self.manifests.items()):
                atomic_write_json(root / "runs" / f"{job_id}.json", manifest)
                session.merge(RunRow(job_id=job_id, key=manifest["key"],
                                     manifest_json=json.dumps(manifest, sort_keys=True)))
            session.commit()
        engine.dispose()
        logger.info("[Library] saved %d component(s) over %d key(s) and %d run manifest(s) to %s",
                    len(self), len(self.keys()), len(self.manifests), root)

    @classmethod
    def load(cls, root: str | pathlib.Path, lib: CellLibrary | None = None) -> "ComponentLibrary":
        root = pathlib.Path(root)
        db = root / "library.db"
        if not db.exists():
            raise MissingArtifactError(f"component library index {db}", "build-library")
        engine = create_engine(f"sqlite:///{db}")
        components = []
        with Session(engine) as session:
            for row in session.scalars(select(ComponentRow).order_by(ComponentRow.key, ComponentRow.id)):
                net = parse_structural((root / "components" / f"{row.id}.gnl").read_text(encoding="utf-8"))
                components.append(ApproxComponent(
                    key=row.key, kind=row.kind, netlist=net,
                    report=ErrorReport.from_dict(json.loads(row.report_json)),
                    area=area(net, lib) if lib is not None else row.area,
                    metric=row.metric, tau=row.tau, run_id=row.run_id, style=row.style,
                ))
            refusals = {r.key: r.reason for r in session.scalars(select(RefusalRow))}
            manifests = {r.job_id: json.loads(r.manifest_json) for r in session.scalars(select(RunRow))}
        engine.dispose()
        return cls(components, refusals, manifests)


def compare_ltg_styles(spec: LtgSpec, settings: CgpSettings, lib: CellLibrary, metric: str = "mde", *,
                       pool: JobPool | None = None, seed: int = 0) -> dict[str, dict]:
    """Area/error fronts of one-tree and two-tree seeded libraries, scored by inverted hypervolume.

    Areas are normalized to the exact two-tree area, errors to the largest error observed.
    """
    spec = spec.canonical()
    fronts = {}
    for style in LTG_STYLES:
        build = build_ltg_library([spec], [metric], settings, lib, style=style, pool=pool, seed=seed)
        fronts[style] = pareto_filter(build.components)
    reference_area = area(gen_ltg_exact(spec, "two_tree"), lib)
    max_error = max((float(c.error(metric)) for front in fronts.values() for c in front), default=0.0)
    summary = {}
    for style, front in fronts.items():
        points = normalize_front([(c.area, float(c.error(metric))) for c in front], reference_area, max_error)
        summary[style] = {
            "components": len(front),
            "exact_area": min(c.area for c in front if c.metric is None),
            "inverted_hypervolume": inverted_hypervolume(points),
        }
        logger.info("[Library] %s %s: %d point(s), inverted HV %.4f", spec.key, style, len(front),
                    summary[style]["inverted_hypervolume"])
    return summary


@dataclass(frozen=True)
class TruncationPoint:
    t: int
    netlist: Netlist
    report: ErrorReport
    area: float


def truncation_baseline(m: int, lib: CellLibrary, analyzer: ErrorAnalyzer | None = None) -> list[TruncationPoint]:
    """Drop the last t inputs, t = 0..m-1."""
    analyzer = analyzer or ErrorAnalyzer()
    spec = PopcountSpec(m)
    exact = gen_popcount_exact(spec)
    points = []
    for t in range(m):
        net = gen_popcount_truncated(spec, t, "inputs")
        points.append(TruncationPoint(t, net, analyzer.popcount_error(exact, net), area(net, lib)))
    return points


def compare_with_truncation(components: Iterable[ApproxComponent], lib: CellLibrary) -> list[dict]:
    """Area of each popcount component against the cheapest truncation with no larger mae."""
    baselines: dict[int, list[TruncationPoint]] = {}
    rows = []
    for c in components:
        if c.kind != "popcount":
            continue
        m = spec_from_key(c.key).m
        if m not in baselines:
            baselines[m] = truncation_baseline(m, lib)
        feasible = [p for p in baselines[m] if p.report.mae <= c.report.mae]
        cheapest = min(feasible, key=lambda p: (p.area, p.t))
        rows.append({
            "key": c.key,
            "id": c.id,
            "mae": float(c.report.mae),
            "area": c.area,
            "truncation_t": cheapest.t,
            "truncation_mae": float(cheapest.report.mae),
            "truncation_area": cheapest.area,
            "area_ratio": c.area / cheapest.area if cheapest.area > 0 else None,
        })
    return rows
