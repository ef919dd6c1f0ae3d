"""Exact error analysis of approximate circuits with BDDs.

Both circuits of a pair are composed into a miter netlist that exposes their
disagreement as arithmetic bits (distance for LTGs, |P - P'| for popcounts);
the miter is converted to reduced ordered BDDs and the statistics are
obtained by weighted satisfying-assignment counts, so every figure is an
exact rational over the full input domain.
"""
import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Literal, Sequence

import numpy as np
from dd import autoref

from circuitgen import LtgSpec, Word, gen_weighted_sum_magnitude, negate_on_sign, subtract_borrow
from errors import BddBudgetExceeded, ContractViolation, GenerationRefused
from netlist import Netlist, NetlistBuilder, bits_to_int, exhaustive_stimuli, simulate_batch

logger = logging.getLogger(__name__)

DEFAULT_NODE_BUDGET = 2_000_000
BRUTE_FORCE_MAX_INPUTS = 24

ErrorMode = Literal["ltg", "popcount"]
LTG_METRICS = ("ep", "mde", "wcde", "epmde")
POPCOUNT_METRICS = ("ep", "mae", "wcae")


def _frac(value) -> Fraction | None:
    return None if value is None else Fraction(value)


@dataclass(frozen=True)
class ErrorReport:
    """Error statistics of an approximate circuit against its exact reference.

    Probabilities and means are exact rationals; worst cases are integers.
    """

    mode: ErrorMode
    domain_size: int
    ep: Fraction
    mde: Fraction | None = None
    wcde: int | None = None
    epmde: Fraction | None = None
    mae: Fraction | None = None
    wcae: int | None = None

    def __post_init__(self):
        if not 0 <= self.ep <= 1:
            raise ContractViolation(f"error probability out of range: {self.ep}")
        if self.mde is not None and self.wcde is not None and self.mde > self.wcde:
            raise ContractViolation("mean distance error exceeds the worst case")
        if self.mae is not None and self.wcae is not None and self.mae > self.wcae:
            raise ContractViolation("mean arithmetic error exceeds the worst case")

    def metric(self, name: str) -> Fraction:
        value = getattr(self, name, None)
        if name not in LTG_METRICS + POPCOUNT_METRICS or (value is None and name != "epmde"):
            raise ContractViolation(f"metric '{name}' is not defined for {self.mode} reports")
        return Fraction(0) if value is None else Fraction(value)

    @property
    def is_exact_match(self) -> bool:
        return self.ep == 0

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("ep", "mde", "epmde", "mae"):
            if data[key] is not None:
                data[key] = str(data[key])
                data[f"{key}_decimal"] = float(getattr(self, key))
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ErrorReport":
        return cls(
            mode=data["mode"],
            domain_size=int(data["domain_size"]),
            ep=Fraction(data["ep"]),
            mde=_frac(data.get("mde")),
            wcde=data.get("wcde"),
            epmde=_frac(data.get("epmde")),
            mae=_frac(data.get("mae")),
            wcae=data.get("wcae"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def ltg_report(domain: int, mismatches: int, distance_sum: int, worst: int) -> ErrorReport:
    ep = Fraction(mismatches, domain)
    mde = Fraction(distance_sum, domain)
    return ErrorReport(
        mode="ltg",
        domain_size=domain,
        ep=ep,
        mde=mde,
        wcde=worst,
        epmde=mde / ep if mismatches else None,
    )


def popcount_report(domain: int, mismatches: int, abs_sum: int, worst: int) -> ErrorReport:
    return ErrorReport(
        mode="popcount",
        domain_size=domain,
        ep=Fraction(mismatches, domain),
        mae=Fraction(abs_sum, domain),
        wcae=worst,
    )


_WORD_BIT = re.compile(r"^(.*)_(\d+)$")


def default_order(names: Sequence[str]) -> list[str]:
    """Variable order: input words in first-appearance order, MSB to LSB within a word."""
    groups: dict[str, list[tuple[int, str]]] = {}
    for name in names:
        match = _WORD_BIT.match(name)
        prefix, bit = (match.group(1), int(match.group(2))) if match else (name, 0)
        groups.setdefault(prefix, []).append((bit, name))
    return [name for members in groups.values() for _, name in sorted(members, reverse=True)]


def _check_interface(exact: Netlist, approx: Netlist) -> None:
    if exact.inputs != approx.inputs:
        raise ContractViolation("exact and approximate circuits must share the same primary inputs")


def build_ltg_miter(exact: Netlist, approx: Netlist, spec: LtgSpec) -> Netlist:
    """Outputs: [mismatch, |S|_0, |S|_1, ...] over the shared inputs."""
    _check_interface(exact, approx)
    if exact.n_outputs != 1 or approx.n_outputs != 1:
        raise ContractViolation("LTG circuits have exactly one output")
    reference = gen_weighted_sum_magnitude(spec)
    if reference.inputs != exact.inputs:
        raise ContractViolation(f"circuit inputs do not match the interface of {spec.key}")
    b = NetlistBuilder(exact.inputs)
    signals = list(range(exact.n_inputs))
    y = b.instantiate(exact, signals)[0]
    y_hat = b.instantiate(approx, signals)[0]
    magnitude = b.instantiate(reference, signals)
    return b.build([b.xor_(y, y_hat), *magnitude])


def build_popcount_miter(exact: Netlist, approx: Netlist) -> Netlist:
    """Outputs: the bits of |P - P'| (two's-complement negate on the borrow)."""
    _check_interface(exact, approx)
    b = NetlistBuilder(exact.inputs)
    signals = list(range(exact.n_inputs))
    p = b.instantiate(exact, signals)
    p_hat = b.instantiate(approx, signals)
    diff, borrow = subtract_borrow(b, Word(p, (1 << len(p)) - 1), Word(p_hat, (1 << len(p_hat)) - 1))
    return b.build(negate_on_sign(b, diff, borrow))


@dataclass
class AnalysisStats:
    evaluations: int = 0
    seconds: float = 0.0
    peak_nodes: int = 0

    @property
    def rate(self) -> float:
        return self.evaluations / self.seconds if self.seconds > 0 else 0.0


@dataclass
class ErrorAnalyzer:
    """One BDD store per analysis; instances are not shared between workers."""

    node_budget: int = DEFAULT_NODE_BUDGET
    stats: AnalysisStats = field(default_factory=AnalysisStats)

    def _manager(self, order: Sequence[str]) -> autoref.BDD:
        bdd = autoref.BDD()
        bdd.configure(reordering=False)
        bdd.declare(*order)
        return bdd

    def build_bdds(self, net: Netlist, order: Sequence[str] | None = None,
                   bdd: autoref.BDD | None = None) -> list[autoref.Function]:
        order = list(order) if order is not None else default_order(net.inputs)
        if sorted(order) != sorted(net.inputs):
            raise ContractViolation("variable order must be a permutation of the netlist inputs")
        if bdd is None:
            bdd = self._manager(order)

        last_use = [-1] * net.signal_count
        for g in net.gates:
            for f in g.fanins:
                last_use[f] = g.id
        keep = set(net.outputs)

        values: list[autoref.Function | None] = [bdd.var(name) for name in net.inputs]
        for g in net.gates:
            args = [values[f] for f in g.fanins]
            match g.kind:
                case "CONST0":
                    out = bdd.false
                case "CONST1":
                    out = bdd.true
                case "BUF":
                    out = args[0]
                case "NOT":
                    out = ~args[0]
                case "AND2":
                    out = args[0] & args[1]
                case "OR2":
                    out = args[0] | args[1]
                case "NAND2":
                    out = ~(args[0] & args[1])
                case "NOR2":
                    out = ~(args[0] | args[1])
                case "XOR2":
                    out = args[0] ^ args[1]
                case "XNOR2":
                    out = ~(args[0] ^ args[1])
                case _:
                    raise ContractViolation(f"unknown gate kind '{g.kind}'")
            values.append(out)
            for f in g.fanins:
                if last_use[f] == g.id and f not in keep:
                    values[f] = None
            self._check_budget(bdd)
        return [values[o] for o in net.outputs]

    def _check_budget(self, bdd: autoref.BDD) -> None:
        if len(bdd) <= self.node_budget:
            return
        bdd.collect_garbage()
        nodes = len(bdd)
        self.stats.peak_nodes = max(self.stats.peak_nodes, nodes)
        if nodes > self.node_budget:
            raise BddBudgetExceeded(f"BDD grew to {nodes} nodes, budget is {self.node_budget}")

    @staticmethod
    def _descend(bdd: autoref.BDD, care: autoref.Function, bits: Sequence[autoref.Function]) -> int:
        """Largest unsigned value the ``bits`` word takes inside ``care`` (MSB-first greedy)."""
        value = 0
        for i in reversed(range(len(bits))):
            narrowed = care & bits[i]
            if narrowed != bdd.false:
                care = narrowed
                value |= 1 << i
        return value

    def ltg_error(self, exact: Netlist, approx: Netlist, spec: LtgSpec) -> ErrorReport:
        started = time.perf_counter()
        miter = build_ltg_miter(exact, approx, spec)
        order = default_order(miter.inputs)
        bdd = self._manager(order)
        mismatch, *magnitude = self.build_bdds(miter, order, bdd)
        nvars = len(order)
        mismatches = bdd.count(mismatch, nvars=nvars)
        distance = mismatches + sum(
            (1 << i) * bdd.count(bit & mismatch, nvars=nvars) for i, bit in enumerate(magnitude)
        )
        worst = self._descend(bdd, mismatch, magnitude) + 1 if mismatches else 0
        self._tick(started, bdd)
        return ltg_report(1 << nvars, mismatches, distance, worst)

    def popcount_error(self, exact: Netlist, approx: Netlist) -> ErrorReport:
        started = time.perf_counter()
        miter = build_popcount_miter(exact, approx)
        order = default_order(miter.inputs)
        bdd = self._manager(order)
        magnitude = self.build_bdds(miter, order, bdd)
        nvars = len(order)
        nonzero = bdd.false
        for bit in magnitude:
            nonzero = nonzero | bit
        mismatches = bdd.count(nonzero, nvars=nvars)
        abs_sum = sum((1 << i) * bdd.count(bit, nvars=nvars) for i, bit in enumerate(magnitude))
        worst = self._descend(bdd, bdd.true, magnitude)
        self._tick(started, bdd)
        return popcount_report(1 << nvars, mismatches, abs_sum, worst)

    def _tick(self, started: float, bdd: autoref.BDD) -> None:
        self.stats.evaluations += 1
        self.stats.seconds += time.perf_counter() - started
        self.stats.peak_nodes = max(self.stats.peak_nodes, len(bdd))


def build_bdds(net: Netlist, order: Sequence[str] | None = None,
               node_budget: int = DEFAULT_NODE_BUDGET) -> list[autoref.Function]:
    return ErrorAnalyzer(node_budget).build_bdds(net, order)


def ltg_error(exact: Netlist, approx: Netlist, spec: LtgSpec,
              node_budget: int = DEFAULT_NODE_BUDGET) -> ErrorReport:
    return ErrorAnalyzer(node_budget).ltg_error(exact, approx, spec)


def popcount_error(exact: Netlist, approx: Netlist, node_budget: int = DEFAULT_NODE_BUDGET) -> ErrorReport:
    return ErrorAnalyzer(node_budget).popcount_error(exact, approx)


def _weighted_sums(stimuli: np.ndarray, spec: LtgSpec) -> np.ndarray:
    k = spec.k
    total = np.zeros(stimuli.shape[0], dtype=np.int64)
    for word, i in enumerate(spec.nonzero):
        total += spec.weights[i] * bits_to_int(stimuli[:, word * k:(word + 1) * k])
    return total


def _stats_from_samples(exact: Netlist, approx: Netlist, mode: ErrorMode, spec: LtgSpec | None,
                        stimuli: np.ndarray) -> tuple[int, int, int]:
    y = simulate_batch(exact, stimuli)
    y_hat = simulate_batch(approx, stimuli)
    if mode == "ltg":
        if spec is None:
            raise ContractViolation("LTG error analysis needs the LTG spec")
        wrong = y[:, 0] != y_hat[:, 0]
        distance = np.where(wrong, np.abs(_weighted_sums(stimuli, spec)) + 1, 0)
        return int(wrong.sum()), int(distance.sum()), int(distance.max(initial=0))
    if mode == "popcount":
        diff = np.abs(bits_to_int(y) - bits_to_int(y_hat))
        return int((diff != 0).sum()), int(diff.sum()), int(diff.max(initial=0))
    raise ContractViolation(f"unknown error mode '{mode}'")


def brute_force_error(exact: Netlist, approx: Netlist, mode: ErrorMode,
                      spec: LtgSpec | None = None) -> ErrorReport:
    """Exhaustive simulation oracle for small circuits."""
    _check_interface(exact, approx)
    if exact.n_inputs > BRUTE_FORCE_MAX_INPUTS:
        raise GenerationRefused(
            f"exhaustive enumeration of {exact.n_inputs} inputs refused (limit {BRUTE_FORCE_MAX_INPUTS})"
        )
    stimuli = exhaustive_stimuli(exact.n_inputs)
    mismatches, total, worst = _stats_from_samples(exact, approx, mode, spec, stimuli)
    domain = 1 << exact.n_inputs
    if mode == "ltg":
        return ltg_report(domain, mismatches, total, worst)
    return popcount_report(domain, mismatches, total, worst)

