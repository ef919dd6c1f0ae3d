"""Cartesian Genetic Programming over gate netlists.

A genome is a single row of ``L`` nodes. Each node holds three integer genes
``(fanin1, fanin2, function)`` and the genome ends with one gene per primary
output. Signal ``s`` refers to primary input ``s`` when ``s < n_inputs`` and to
node ``s - n_inputs`` otherwise, the same numbering :class:`netlist.Netlist`
uses, so an exact seed netlist maps onto the first columns unchanged.
"""
import functools
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Sequence

from bdderr import LTG_METRICS, POPCOUNT_METRICS, AnalysisStats, ErrorAnalyzer, ErrorReport
from circuitgen import LtgSpec, PopcountSpec
from errors import BddBudgetExceeded, ConfigurationError, ContractViolation
from netlist import Netlist, area, compact
from tech import GATE_ARITY, CellLibrary

logger = logging.getLogger(__name__)

FUNCTIONS = ("BUF", "NOT", "AND2", "OR2", "NAND2", "NOR2", "XOR2", "XNOR2", "CONST0", "CONST1")
_FUNCTION_INDEX = {kind: i for i, kind in enumerate(FUNCTIONS)}
GENES_PER_NODE = 3


@dataclass(frozen=True)
class Genome:
    n_inputs: int
    n_outputs: int
    n_nodes: int
    genes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "genes", tuple(self.genes))
        if len(self.genes) != self.n_nodes * GENES_PER_NODE + self.n_outputs:
            raise ContractViolation("genome length does not match its shape")
        for index, gene in enumerate(self.genes):
            if not 0 <= gene < self.domain(index):
                raise ContractViolation(f"gene {index} = {gene} outside 0..{self.domain(index) - 1}")

    def domain(self, index: int) -> int:
        """Number of legal values of gene ``index``."""
        if index >= self.n_nodes * GENES_PER_NODE:
            return self.n_inputs + self.n_nodes
        node, slot = divmod(index, GENES_PER_NODE)
        return len(FUNCTIONS) if slot == 2 else self.n_inputs + node

    def node(self, i: int) -> tuple[str, tuple[int, ...]]:
        f1, f2, fn = self.genes[i * GENES_PER_NODE:(i + 1) * GENES_PER_NODE]
        kind = FUNCTIONS[fn]
        return kind, (f1, f2)[:GATE_ARITY[kind]]

    @property
    def outputs(self) -> tuple[int, ...]:
        return self.genes[self.n_nodes * GENES_PER_NODE:]

    def active_nodes(self) -> list[int]:
        active = [False] * self.n_nodes
        stack = list(self.outputs)
        while stack:
            s = stack.pop() - self.n_inputs
            if s < 0 or active[s]:
                continue
            active[s] = True
            stack.extend(self.node(s)[1])
        return [i for i, on in enumerate(active) if on]

    def decode(self, input_names: Sequence[str]) -> Netlist:
        """Phenotype: only active nodes survive, renumbered densely."""
        if len(input_names) != self.n_inputs:
            raise ContractViolation(f"genome has {self.n_inputs} inputs, got {len(input_names)} names")
        return compact(input_names, [self.node(i) for i in range(self.n_nodes)], self.outputs)

    def hamming(self, other: "Genome") -> int:
        return sum(1 for a, b in zip(self.genes, other.genes) if a != b)

    @classmethod
    def from_netlist(cls, net: Netlist, rng: random.Random, n_nodes: int | None = None) -> "Genome":
        """Seed genome: the netlist's gates in the first columns, random inactive filler after."""
        if n_nodes is None:
            n_nodes = max(2 * len(net.gates), 2)
        if n_nodes < len(net.gates):
            raise ContractViolation(f"{n_nodes} columns cannot hold {len(net.gates)} seed gates")
        genes: list[int] = []
        for g in net.gates:
            fanins = list(g.fanins) + [0] * (2 - len(g.fanins))
            genes += [*fanins, _FUNCTION_INDEX[g.kind]]
        for i in range(len(net.gates), n_nodes):
            reach = net.n_inputs + i
            genes += [rng.randrange(reach), rng.randrange(reach), rng.randrange(len(FUNCTIONS))]
        genes += list(net.outputs)
        return cls(net.n_inputs, net.n_outputs, n_nodes, tuple(genes))


def mutate(genome: Genome, rng: random.Random, count: int) -> Genome:
    """Change exactly ``count`` distinct genes, each to a different legal value."""
    if count <= 0:
        return genome
    mutable = [i for i in range(len(genome.genes)) if genome.domain(i) > 1]
    genes = list(genome.genes)
    for index in rng.sample(mutable, min(count, len(mutable))):
        value = rng.randrange(genome.domain(index) - 1)
        genes[index] = value + 1 if value >= genes[index] else value
    return Genome(genome.n_inputs, genome.n_outputs, genome.n_nodes, tuple(genes))


Spec = LtgSpec | PopcountSpec


@dataclass
class CgpConfig:
    metric: str
    tau: float
    lam: int = 4
    mutations: int | None = None
    max_iterations: int | None = 10_000
    time_limit: float | None = None
    seed: int = 0
    columns_factor: int = 2
    node_budget: int = 2_000_000
    log_every: int = 5_000

    def __post_init__(self):
        if self.lam < 1:
            raise ConfigurationError(f"lambda must be >= 1, got {self.lam}")
        if self.tau < 0 or math.isnan(self.tau):
            raise ConfigurationError(f"tau must be >= 0, got {self.tau}")
        if self.max_iterations is None and self.time_limit is None:
            raise ConfigurationError("CGP needs an iteration limit, a time limit, or both")
        if self.metric not in set(LTG_METRICS + POPCOUNT_METRICS):
            raise ConfigurationError(f"unknown error metric '{self.metric}'")

    def mutation_count(self, genome: Genome) -> int:
        if self.mutations is not None:
            return self.mutations
        return max(1, len(genome.genes) // 100)


@dataclass
class CgpSettings:
    """Run-independent CGP parameters; :meth:`config` binds a metric, threshold and seed."""

    lam: int = 4
    mutations: int | None = None
    max_iterations: int | None = 10_000
    time_limit: float | None = None
    node_budget: int = 2_000_000
    restarts: int = 3
    points: int = 10

    def config(self, metric: str, tau: float, seed: int, time_limit: float | None = None) -> CgpConfig:
        return CgpConfig(
            metric=metric,
            tau=tau,
            lam=self.lam,
            mutations=self.mutations,
            max_iterations=self.max_iterations,
            time_limit=self.time_limit if time_limit is None else time_limit,
            seed=seed,
            node_budget=self.node_budget,
        )


@dataclass
class FitnessContext:
    exact: Netlist
    spec: Spec
    lib: CellLibrary
    metric: str
    tau: float
    analyzer: ErrorAnalyzer = field(default_factory=ErrorAnalyzer)

    def __post_init__(self):
        allowed = LTG_METRICS if isinstance(self.spec, LtgSpec) else POPCOUNT_METRICS
        if self.metric not in allowed:
            raise ConfigurationError(f"metric '{self.metric}' does not apply to {self.spec.key}")

    def report(self, net: Netlist) -> ErrorReport:
        if isinstance(self.spec, LtgSpec):
            return self.analyzer.ltg_error(self.exact, net, self.spec)
        return self.analyzer.popcount_error(self.exact, net)

    def error(self, net: Netlist) -> Fraction:
        return self.report(net).metric(self.metric)


def budget_guarded(func):
    """Fitness wrapper: a BDD that outgrows its budget makes the candidate infeasible."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except BddBudgetExceeded as e:
            logger.warning("[CGP] %s: %s; candidate discarded", func.__name__, e)
            return math.inf

    return wrapper


class Fitness:
    """Area of the active netlist if its error is within tau, else +inf.

    Candidates above ``bound`` are rejected on area before any BDD work; errors
    are cached per phenotype digest.
    """

    def __init__(self, ctx: FitnessContext, cache_size: int = 50_000):
        self.ctx = ctx
        self.cache: dict[str, Fraction | float] = {}
        self.cache_size = cache_size
        self.evaluations = 0

    @budget_guarded
    def _error(self, net: Netlist) -> Fraction:
        self.evaluations += 1
        return self.ctx.error(net)

    def __call__(self, genome: Genome, bound: float = math.inf) -> float:
        net = genome.decode(self.ctx.exact.inputs)
        cost = area(net, self.ctx.lib)
        if cost > bound:
            return math.inf
        key = net.digest()
        if key not in self.cache:
            if len(self.cache) >= self.cache_size:
                self.cache.clear()
            self.cache[key] = self._error(net)
        return cost if self.cache[key] <= self.ctx.tau else math.inf


@dataclass
class EvolutionResult:
    best: Genome
    netlist: Netlist
    area: float
    report: ErrorReport
    history: list[tuple[int, float]]
    iterations: int
    evaluations: int
    elapsed: float
    stopped_by: str
    config: CgpConfig
    analysis: AnalysisStats = field(default_factory=AnalysisStats)

    def manifest(self) -> dict:
        return {
            "config": asdict(self.config),
            "termination": self.stopped_by,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "elapsed_s": round(self.elapsed, 3),
            "best_area": self.area,
            "gates": len(self.netlist.gates),
            "error": self.report.to_dict(),
            "bdd_analyses_per_s": round(self.analysis.rate, 1),
            "bdd_peak_nodes": self.analysis.peak_nodes,
        }


def evolve(seed_netlist: Netlist, spec: Spec, cfg: CgpConfig, lib: CellLibrary) -> EvolutionResult:
    """(1 + lambda) evolution strategy with neutral drift, seeded by an exact netlist."""
    rng = random.Random(cfg.seed)
    ctx = FitnessContext(seed_netlist, spec, lib, cfg.metric, cfg.tau, ErrorAnalyzer(cfg.node_budget))
    evaluate = Fitness(ctx)
    parent = Genome.from_netlist(seed_netlist, rng, max(cfg.columns_factor * len(seed_netlist.gates), 2))
    parent_fit = evaluate(parent, math.inf)
    if not math.isfinite(parent_fit):
        raise ContractViolation(f"seed circuit for {spec.key} is infeasible at {cfg.metric} <= {cfg.tau}")

    count = cfg.mutation_count(parent)
    best, best_fit = parent, parent_fit
    history = [(0, best_fit)]
    started = time.perf_counter()
    iteration = 0
    stopped_by = "iterations"
    while True:
        if cfg.max_iterations is not None and iteration >= cfg.max_iterations:
            break
        if cfg.time_limit is not None and time.perf_counter() - started >= cfg.time_limit:
            stopped_by = "time"
            break
        iteration += 1
        offspring = [mutate(parent, rng, count) for _ in range(cfg.lam)]
        scored = [(evaluate(child, parent_fit), child) for child in offspring]
        child_fit, child = min(scored, key=lambda pair: pair[0])
        if child_fit <= parent_fit:
            parent, parent_fit = child, child_fit
        if parent_fit < best_fit:
            best, best_fit = parent, parent_fit
            history.append((iteration, best_fit))
        if cfg.log_every and iteration % cfg.log_every == 0:
            elapsed = time.perf_counter() - started
            logger.info("[CGP] %s %s<=%g it=%d best=%.1f evals/s=%.0f", spec.key, cfg.metric, cfg.tau,
                        iteration, best_fit, evaluate.evaluations / elapsed if elapsed else 0.0)

    elapsed = time.perf_counter() - started
    netlist = best.decode(seed_netlist.inputs)
    # independent re-verification with a fresh BDD store
    report = FitnessContext(seed_netlist, spec, lib, cfg.metric, cfg.tau, ErrorAnalyzer(cfg.node_budget)).report(netlist)
    if report.metric(cfg.metric) > cfg.tau:
        raise ContractViolation(f"re-verification failed for {spec.key}: {cfg.metric} above {cfg.tau}")
    logger.info("[CGP] %s %s<=%g done: area %.1f -> %.1f in %d iterations (%s), %.0f BDD analyses/s",
                spec.key, cfg.metric, cfg.tau, history[0][1], best_fit, iteration, stopped_by,
                ctx.analyzer.stats.rate)
    return EvolutionResult(best, netlist, best_fit, report, history, iteration,
                           evaluate.evaluations, elapsed, stopped_by, cfg, ctx.analyzer.stats)
