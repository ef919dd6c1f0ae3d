"""Design-space exploration over per-neuron component choices.

NSGA-II (deap) searches integer genomes, one gene per hidden neuron and one per
output neuron, each indexing the area-sorted component list of that neuron's
library key. Objectives are accuracy on the evaluation slice (maximized) and
the surrogate classifier area (minimized).
"""
import logging
import random
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from deap import base, creator, tools
from pymoo.indicators.hv import HV

from circuitgen import (
    OutputNeuronSpec,
    assemble_tnn,
    gen_argmax,
    gen_output_neuron,
    output_width,
)
from errors import ConfigurationError, ContractViolation
from netlist import Netlist, area
from tech import CellLibrary, InterfaceCostTable, converter_for_precision, estimate_power, interface_cost
from tnn import ApproxEvaluator, ComponentAssignment, Split, TnnModel

if TYPE_CHECKING:
    from complib import ComponentLibrary

logger = logging.getLogger(__name__)

BATTERY_BUDGET_MW = 30.0

creator.create("FitnessTnn", base.Fitness, weights=(1.0, -1.0))
creator.create("TnnIndividual", list, fitness=creator.FitnessTnn)


class AreaModel:
    """Surrogate classifier area from the areas of the selected components.

    Output neurons are costed with their Z-adder around the assigned popcount
    and the argmax with the widest resulting output. A hidden neuron counts only
    while some assigned popcount still reads it; anything else is pruned from
    the assembled netlist.
    """

    def __init__(self, model: TnnModel, library: "ComponentLibrary", lib: CellLibrary):
        self.model = model
        self.library = library
        self.lib = lib
        self.hidden_keys = model.hidden_keys()
        self.output_keys = model.output_keys()
        self.specs = [OutputNeuronSpec(tuple(row)) for row in model.w2]
        self._neurons: dict[tuple[int, str], tuple[float, int, frozenset[int]]] = {}
        self._argmax: dict[int, float] = {}

    def _neuron(self, j: int, component_id: str) -> tuple[float, int, frozenset[int]]:
        """(area, output width, hidden neurons read) of output neuron ``j`` around one popcount."""
        key = (j, component_id)
        if key not in self._neurons:
            spec = self.specs[j]
            pc = self.library.resolve(self.output_keys[j], component_id).netlist
            reads = frozenset(spec.nonzero[p] for p in pc.live_inputs())
            self._neurons[key] = (area(gen_output_neuron(spec, pc), self.lib), output_width(spec, pc), reads)
        return self._neurons[key]

    def _argmax_area(self, width: int) -> float:
        if self.model.n_classes < 2:
            return 0.0
        if width not in self._argmax:
            self._argmax[width] = area(gen_argmax(self.model.n_classes, width), self.lib)
        return self._argmax[width]

    def __call__(self, assignment: ComponentAssignment) -> float:
        assignment.check(self.model)
        neurons = [self._neuron(j, cid) for j, cid in enumerate(assignment.output)]
        read = frozenset().union(*(reads for _, _, reads in neurons))
        total = self._argmax_area(max(width for _, width, _ in neurons)) + sum(a for a, _, _ in neurons)
        for i, cid in enumerate(assignment.hidden):
            if i in read:
                total += self.library.resolve(self.hidden_keys[i], cid).area
        return total


def assemble_design(model: TnnModel, library: "ComponentLibrary", assignment: ComponentAssignment) -> Netlist:
    """Classifier netlist with the assigned components copied in verbatim."""
    assignment.check(model)
    hidden = [library.resolve(key, cid).netlist for key, cid in zip(model.hidden_keys(), assignment.hidden)]
    output = []
    for row, key, cid in zip(model.w2, model.output_keys(), assignment.output):
        output.append(gen_output_neuron(OutputNeuronSpec(tuple(row)), library.resolve(key, cid).netlist))
    return assemble_tnn(model, hidden, output)


def surrogate_area(assignment: ComponentAssignment, library: "ComponentLibrary", model: TnnModel,
                   lib: CellLibrary) -> float:
    if model.m == 0 or model.n_classes == 0:
        raise ContractViolation("surrogate area of an empty model is undefined")
    return AreaModel(model, library, lib)(assignment)


@dataclass
class NsgaConfig:
    population: int = 64
    generations: int = 100
    cxpb: float = 0.9
    indpb: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.population < 4 or self.population % 4:
            raise ConfigurationError(f"NSGA-II population must be a positive multiple of 4, got {self.population}")
        if self.generations < 0:
            raise ConfigurationError("generations must be >= 0")


@dataclass(frozen=True)
class Design:
    genes: tuple[int, ...]
    assignment: ComponentAssignment
    accuracy: float
    area: float


class _Problem:
    def __init__(self, model: TnnModel, library: "ComponentLibrary", split: Split, lib: CellLibrary):
        keys = model.hidden_keys() + model.output_keys()
        library.require(keys)
        self.model = model
        self.choices = [library.get(key) for key in keys]
        self.area_model = AreaModel(model, library, lib)
        self.evaluator = ApproxEvaluator(model, library, split.codes)
        self.labels = split.labels
        self.cache: dict[tuple[int, ...], tuple[float, float]] = {}

    @property
    def bounds(self) -> list[int]:
        return [len(c) - 1 for c in self.choices]

    def assignment(self, genes: Sequence[int]) -> ComponentAssignment:
        ids = [self.choices[g][v].id for g, v in enumerate(genes)]
        return ComponentAssignment(tuple(ids[:self.model.m]), tuple(ids[self.model.m:]))

    def exact_genes(self) -> list[int]:
        return [next(i for i, c in enumerate(options) if c.metric is None) for options in self.choices]

    def evaluate(self, genes: Sequence[int]) -> tuple[float, float]:
        key = tuple(genes)
        if key not in self.cache:
            assignment = self.assignment(key)
            predicted = np.argmax(self.evaluator.encoded(assignment), axis=1)
            self.cache[key] = (float(np.mean(predicted == self.labels)), self.area_model(assignment))
        return self.cache[key]


def nsga2(model: TnnModel, library: "ComponentLibrary", split: Split, cfg: NsgaConfig, lib: CellLibrary) -> list[Design]:
    """Rank-0 designs after ``cfg.generations`` generations; the all-exact design seeds generation 0."""
    if len(split.labels) == 0:
        raise ContractViolation("NSGA-II needs a non-empty evaluation split")
    problem = _Problem(model, library, split, lib)
    random.seed(cfg.seed)
    n_genes = len(problem.choices)
    bounds = problem.bounds
    indpb = cfg.indpb if cfg.indpb is not None else 1.0 / n_genes

    toolbox = base.Toolbox()
    toolbox.register("individual", lambda: creator.TnnIndividual(random.randint(0, b) for b in bounds))
    toolbox.register("population", tools.initRepeat, list, toolbox.individual)
    toolbox.register("evaluate", problem.evaluate)
    toolbox.register("mate", tools.cxUniform, indpb=0.5)
    toolbox.register("mutate", tools.mutUniformInt, low=[0] * n_genes, up=bounds, indpb=indpb)
    toolbox.register("select", tools.selNSGA2)

    pop = toolbox.population(n=cfg.population - 1)
    pop.insert(0, creator.TnnIndividual(problem.exact_genes()))
    for ind in pop:
        ind.fitness.values = toolbox.evaluate(ind)
    pop = toolbox.select(pop, len(pop))

    for gen in range(1, cfg.generations + 1):
        offspring = [toolbox.clone(ind) for ind in tools.selTournamentDCD(pop, len(pop))]
        for a, b in zip(offspring[::2], offspring[1::2]):
            if random.random() <= cfg.cxpb:
                toolbox.mate(a, b)
            toolbox.mutate(a)
            toolbox.mutate(b)
            del a.fitness.values, b.fitness.values
        for ind in offspring:
            if not ind.fitness.valid:
                ind.fitness.values = toolbox.evaluate(ind)
        pop = toolbox.select(pop + offspring, cfg.population)
        if gen % 10 == 0 or gen == cfg.generations:
            front = tools.sortNondominated(pop, len(pop), first_front_only=True)[0]
            logger.info("[NSGA-II] gen %d: %d rank-0 design(s), %d evaluated", gen, len(front), len(problem.cache))

    front = tools.sortNondominated(pop, len(pop), first_front_only=True)[0]
    designs = {}
    for ind in front:
        genes = tuple(ind)
        acc, cost = problem.evaluate(genes)
        designs[genes] = Design(genes, problem.assignment(genes), acc, cost)
    return sorted(designs.values(), key=lambda d: (d.area, -d.accuracy, d.genes))


@dataclass(frozen=True)
class ParetoPoint:
    accuracy: float
    est_area: float
    k: int
    interface: str
    classifier_area_mm2: float
    classifier_power_mw: float
    interface_area_mm2: float
    interface_power_mw: float
    assignment: ComponentAssignment
    assignment_id: str

    @property
    def total_area(self) -> float:
        return self.classifier_area_mm2 + self.interface_area_mm2

    @property
    def total_power(self) -> float:
        return self.classifier_power_mw + self.interface_power_mw

    def row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "est_area": self.est_area,
            "classifier_area_mm2": self.classifier_area_mm2,
            "interface_area_mm2": self.interface_area_mm2,
            "total_area": self.total_area,
            "total_power": self.total_power,
            "k": self.k,
            "interface": self.interface,
            "assignment_id": self.assignment_id,
        }


def system_point(accuracy: float, est_area: float, assignment: ComponentAssignment, assignment_id: str, *,
                 k: int, n_features: int, lib: CellLibrary, table: InterfaceCostTable,
                 converter: str = "Flash") -> ParetoPoint:
    """Classifier cost in mm^2/mW plus ``n_features`` converters of precision ``k``."""
    kind = converter_for_precision(k, converter)
    conv_area, conv_power = interface_cost(table, kind, k)
    return ParetoPoint(
        accuracy=accuracy,
        est_area=est_area,
        k=k,
        interface=kind,
        classifier_area_mm2=lib.to_mm2(est_area),
        classifier_power_mw=estimate_power(lib, est_area),
        interface_area_mm2=n_features * conv_area,
        interface_power_mw=n_features * conv_power,
        assignment=assignment,
        assignment_id=assignment_id,
    )


def non_dominated(points: Iterable[ParetoPoint]) -> list[ParetoPoint]:
    """Mutually non-dominated subset in (accuracy up, total area down); exact duplicates keep the first."""
    ordered = sorted(points, key=lambda p: (p.total_area, -p.accuracy, p.k, p.assignment_id))
    kept: list[ParetoPoint] = []
    best_accuracy = -1.0
    for p in ordered:
        if p.accuracy > best_accuracy:
            kept.append(p)
            best_accuracy = p.accuracy
    return kept


def system_pareto(fronts: dict[int, list[ParetoPoint]]) -> list[ParetoPoint]:
    """Merge per-precision fronts and drop every point another precision dominates."""
    merged = non_dominated(p for points in fronts.values() for p in points)
    present = sorted({p.k for p in merged})
    absent = sorted(set(fronts) - set(present))
    if absent:
        logger.info("[Pareto] precision(s) %s contribute only dominated designs", absent)
    return merged


def normalize_front(points: Sequence[tuple[float, float]], x_ref: float, y_ref: float) -> list[tuple[float, float]]:
    """Scale both objectives by their reference; a zero reference maps that axis to 0."""
    return [(x / x_ref if x_ref else 0.0, y / y_ref if y_ref else 0.0) for x, y in points]


def inverted_hypervolume(front: Sequence[tuple[float, float]]) -> float:
    """Area of the union of boxes [0, p] over the (normalized, minimized) points; lower is better."""
    if len(front) == 0:
        raise ContractViolation("inverted hypervolume of an empty front")
    points = np.asarray(front, dtype=float)
    if (points < 0).any():
        raise ContractViolation("inverted hypervolume expects non-negative normalized objectives")
    boxes = points[(points > 0).all(axis=1)]
    if len(boxes) == 0:
        return 0.0
    # boxes anchored at the origin are the region dominated by -p under a zero reference
    return float(HV(ref_point=np.zeros(points.shape[1]))(-boxes))


def select_within_loss(points: Sequence[ParetoPoint], exact_accuracy: float, max_loss: float) -> ParetoPoint | None:
    """Smallest total area among designs losing at most ``max_loss`` accuracy."""
    eligible = [p for p in points if exact_accuracy - p.accuracy <= max_loss + 1e-12]
    return min(eligible, key=lambda p: (p.total_area, -p.accuracy), default=None)


def battery_feasible(power_mw: float, budget_mw: float = BATTERY_BUDGET_MW) -> bool:
    return power_mw <= budget_mw


def error_accuracy_sweep(model: TnnModel, library: "ComponentLibrary", split: Split, metric: str = "mde") -> list[dict]:
    """Accuracy when every hidden neuron takes its largest-error component not above a common level."""
    keys = model.hidden_keys()
    library.require(keys)
    options = {key: [c for c in library.get(key) if c.metric in (None, metric)] for key in set(keys)}
    levels = sorted({float(c.error(metric)) for comps in options.values() for c in comps})
    exact_outputs = tuple(library.exact(key).id for key in model.output_keys())
    evaluator = ApproxEvaluator(model, library, split.codes)
    rows = []
    for level in levels:
        chosen = []
        for key in keys:
            within = [c for c in options[key] if float(c.error(metric)) <= level]
            chosen.append(max(within, key=lambda c: (float(c.error(metric)), -c.area, c.id)))
        assignment = ComponentAssignment(tuple(c.id for c in chosen), exact_outputs)
        predicted = np.argmax(evaluator.encoded(assignment), axis=1)
        rows.append({
            "level": level,
            "accuracy": float(np.mean(predicted == split.labels)),
            "mean_error": float(np.mean([float(c.error(metric)) for c in chosen])),
        })
    return rows


def compare_library_modes(model: TnnModel, library: "ComponentLibrary", split: Split, cfg: NsgaConfig,
                          lib: CellLibrary, modes: Sequence[str] = ("pareto", "all", "mde", "wcde")) -> dict[str, dict]:
    """Same seed and budget per library mode; fronts scored by inverted hypervolume.

    Area is normalized to the all-exact surrogate area, accuracy loss to the
    largest loss seen over every mode.
    """
    exact_area = surrogate_area(ComponentAssignment.all_exact(model, library), library, model, lib)
    exact_problem = _Problem(model, library, split, lib)
    exact_accuracy = exact_problem.evaluate(exact_problem.exact_genes())[0]
    fronts = {mode: nsga2(model, library.with_mode(mode), split, cfg, lib) for mode in modes}
    max_loss = max((max(exact_accuracy - d.accuracy, 0.0) for front in fronts.values() for d in front), default=0.0)
    summary = {}
    for mode, front in fronts.items():
        points = normalize_front([(d.area, max(exact_accuracy - d.accuracy, 0.0)) for d in front], exact_area, max_loss)
        summary[mode] = {"designs": len(front), "inverted_hypervolume": inverted_hypervolume(points), "front": front}
        logger.info("[NSGA-II] library mode %s: %d design(s), inverted HV %.4f", mode, len(front),
                    summary[mode]["inverted_hypervolume"])
    return summary
