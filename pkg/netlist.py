"""Gate-level combinational netlists.

A :class:`Netlist` is an immutable DAG over the 2-input cell set of
:mod:`tech`. Signal ids ``0..n_inputs-1`` are the primary inputs; gate ``i``
in ``gates`` drives signal ``n_inputs + i``. Gates are stored in topological
order, so every fanin id is smaller than the consuming gate's id. Multi-bit
outputs are listed LSB first.
"""
import hashlib
import re
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import networkx as nx
import numpy as np

from errors import ConfigurationError, ContractViolation, CycleError, NetlistSyntaxError
from tech import GATE_ARITY, CellLibrary, gate_area

FORMAT_HEADER = "# gnl v1"
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_\[\].]*$")
_GATE_LINE = re.compile(r"^(\S+)\s*=\s*([A-Z0-9]+)\s*\((.*)\)\s*$")


class Gate(NamedTuple):
    id: int
    kind: str
    fanins: tuple[int, ...]


@dataclass(frozen=True)
class Netlist:
    inputs: tuple[str, ...]
    gates: tuple[Gate, ...]
    outputs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "gates", tuple(Gate(g.id, g.kind, tuple(g.fanins)) for g in self.gates))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        if len(set(self.inputs)) != len(self.inputs):
            raise ContractViolation("primary input names must be unique")
        n = len(self.inputs)
        for index, g in enumerate(self.gates):
            if g.id != n + index:
                raise ContractViolation(f"gate {g.id} out of topological position (expected id {n + index})")
            if g.kind not in GATE_ARITY:
                raise ContractViolation(f"unknown gate kind '{g.kind}'")
            if len(g.fanins) != GATE_ARITY[g.kind]:
                raise ContractViolation(f"{g.kind} gate {g.id} has {len(g.fanins)} fanins")
            for f in g.fanins:
                if not 0 <= f < g.id:
                    raise ContractViolation(f"gate {g.id} references signal {f} that does not precede it")
        if not self.outputs:
            raise ContractViolation("a netlist needs at least one output")
        for o in self.outputs:
            if not 0 <= o < self.signal_count:
                raise ContractViolation(f"output references unknown signal {o}")

    @property
    def n_inputs(self) -> int:
        return len(self.inputs)

    @property
    def n_outputs(self) -> int:
        return len(self.outputs)

    @property
    def signal_count(self) -> int:
        return len(self.inputs) + len(self.gates)

    def gate_of(self, signal: int) -> Gate | None:
        if signal < self.n_inputs:
            return None
        return self.gates[signal - self.n_inputs]

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for g in self.gates:
            counts[g.kind] = counts.get(g.kind, 0) + 1
        return counts

    def prune(self) -> "Netlist":
        """Drop gates that no output depends on."""
        return compact(self.inputs, [(g.kind, g.fanins) for g in self.gates], self.outputs)

    def live_inputs(self) -> frozenset[int]:
        """Indices of the primary inputs that some output depends on structurally."""
        n = self.n_inputs
        seen: set[int] = set()
        stack = list(self.outputs)
        while stack:
            s = stack.pop()
            if s in seen:
                continue
            seen.add(s)
            if s >= n:
                stack.extend(self.gates[s - n].fanins)
        return frozenset(s for s in seen if s < n)

    def digest(self) -> str:
        return hashlib.sha256(export_structural(self).encode("utf-8")).hexdigest()


def compact(inputs: Sequence[str], gates: Sequence[tuple[str, Sequence[int]]], outputs: Sequence[int]) -> Netlist:
    """Build a netlist from raw (kind, fanins) gates keeping only live logic, renumbered densely."""
    n = len(inputs)
    live = [False] * (n + len(gates))
    stack = list(outputs)
    while stack:
        s = stack.pop()
        if live[s]:
            continue
        live[s] = True
        if s >= n:
            stack.extend(gates[s - n][1])
    remap = list(range(n)) + [-1] * len(gates)
    kept: list[Gate] = []
    for index, (kind, fanins) in enumerate(gates):
        sig = n + index
        if not live[sig]:
            continue
        new_id = n + len(kept)
        remap[sig] = new_id
        kept.append(Gate(new_id, kind, tuple(remap[f] for f in fanins)))
    return Netlist(tuple(inputs), tuple(kept), tuple(remap[o] for o in outputs))


_BATCH_OPS = {
    "BUF": lambda a: a,
    "NOT": np.logical_not,
    "AND2": np.logical_and,
    "OR2": np.logical_or,
    "NAND2": lambda a, b: ~np.logical_and(a, b),
    "NOR2": lambda a, b: ~np.logical_or(a, b),
    "XOR2": np.logical_xor,
    "XNOR2": lambda a, b: ~np.logical_xor(a, b),
}


def simulate_batch(net: Netlist, stimuli: np.ndarray) -> np.ndarray:
    """Bit-parallel evaluation of many stimuli.

    ``stimuli`` is a (samples, n_inputs) 0/1 array; returns a (samples,
    n_outputs) bool array.
    """
    stimuli = np.asarray(stimuli)
    if stimuli.ndim != 2 or stimuli.shape[1] != net.n_inputs:
        raise ContractViolation(
            f"stimulus matrix must be (samples, {net.n_inputs}), got {stimuli.shape}"
        )
    samples = stimuli.shape[0]
    values: list[np.ndarray] = [stimuli[:, i].astype(bool) for i in range(net.n_inputs)]
    zeros = np.zeros(samples, dtype=bool)
    ones = np.ones(samples, dtype=bool)
    for g in net.gates:
        if g.kind == "CONST0":
            values.append(zeros)
        elif g.kind == "CONST1":
            values.append(ones)
        else:
            values.append(_BATCH_OPS[g.kind](*(values[f] for f in g.fanins)))
    if not net.outputs:
        return np.zeros((samples, 0), dtype=bool)
    return np.stack([values[o] for o in net.outputs], axis=1)


def simulate(net: Netlist, stimulus: Sequence[int]) -> tuple[int, ...]:
    if len(stimulus) != net.n_inputs:
        raise ContractViolation(f"stimulus has {len(stimulus)} bits, netlist has {net.n_inputs} inputs")
    row = simulate_batch(net, np.asarray([stimulus], dtype=bool))[0]
    return tuple(int(b) for b in row)


def exhaustive_stimuli(n_inputs: int) -> np.ndarray:
    """All 2^n stimuli; row r holds the bits of r with input 0 as the LSB."""
    if n_inputs > 24:
        raise ContractViolation(f"refusing to enumerate 2^{n_inputs} stimuli")
    codes = np.arange(1 << n_inputs, dtype=np.uint32)
    return ((codes[:, None] >> np.arange(n_inputs, dtype=np.uint32)) & 1).astype(bool)


def bits_to_int(bits: np.ndarray) -> np.ndarray:
    """Interpret the last axis of a bool array as an LSB-first unsigned integer."""
    bits = np.asarray(bits, dtype=np.int64)
    weights = np.left_shift(np.int64(1), np.arange(bits.shape[-1], dtype=np.int64))
    return bits @ weights


def area(net: Netlist, lib: CellLibrary) -> float:
    return float(sum(gate_area(lib, g.kind) for g in net.gates))


def check_library(net: Netlist, lib: CellLibrary) -> None:
    missing = sorted({g.kind for g in net.gates} - set(lib.entries))
    if missing:
        raise ConfigurationError(f"technology file {lib.source} lacks areas for {missing}")


def disjoint_union(a: Netlist, b: Netlist, prefixes: tuple[str, str] = ("a_", "b_")) -> Netlist:
    """Side-by-side composition with renamed inputs; outputs of ``a`` come first."""
    inputs = [prefixes[0] + name for name in a.inputs] + [prefixes[1] + name for name in b.inputs]
    na, nb = a.n_inputs, b.n_inputs
    n = na + nb

    def map_a(s: int) -> int:
        return s if s < na else n + (s - na)

    def map_b(s: int) -> int:
        return na + s if s < nb else n + len(a.gates) + (s - nb)

    gates = [Gate(map_a(g.id), g.kind, tuple(map_a(f) for f in g.fanins)) for g in a.gates]
    gates += [Gate(map_b(g.id), g.kind, tuple(map_b(f) for f in g.fanins)) for g in b.gates]
    outputs = [map_a(o) for o in a.outputs] + [map_b(o) for o in b.outputs]
    return Netlist(tuple(inputs), tuple(gates), tuple(outputs))


def _signal_names(net: Netlist) -> list[str]:
    return list(net.inputs) + [f"g{g.id}" for g in net.gates]


def export_structural(net: Netlist) -> str:
    """Gate-per-line text: ``.inputs``/``.outputs`` headers then ``name = KIND(fanins)``."""
    if not net.outputs:
        raise ContractViolation("cannot export a netlist without outputs")
    names = _signal_names(net)
    if len(set(names)) != len(names):
        raise ContractViolation("input names collide with generated gate names")
    lines = [FORMAT_HEADER, ".inputs " + " ".join(net.inputs), ".outputs " + " ".join(names[o] for o in net.outputs)]
    for g in net.gates:
        lines.append(f"{names[g.id]} = {g.kind}({', '.join(names[f] for f in g.fanins)})")
    return "\n".join(lines) + "\n"


def parse_structural(text: str) -> Netlist:
    inputs: list[str] | None = None
    output_names: list[str] | None = None
    output_line = 0
    gate_lines: list[tuple[int, str, str, list[str]]] = []

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith(".inputs"):
            if inputs is not None:
                raise NetlistSyntaxError(line_no, "duplicate .inputs declaration")
            inputs = line.split()[1:]
            for name in inputs:
                if not _NAME.match(name):
                    raise NetlistSyntaxError(line_no, f"bad input name '{name}'")
            continue
        if line.startswith(".outputs"):
            if output_names is not None:
                raise NetlistSyntaxError(line_no, "duplicate .outputs declaration")
            output_names, output_line = line.split()[1:], line_no
            continue
        match = _GATE_LINE.match(line)
        if not match:
            raise NetlistSyntaxError(line_no, f"cannot parse '{line}'")
        name, kind, args = match.groups()
        if not _NAME.match(name):
            raise NetlistSyntaxError(line_no, f"bad signal name '{name}'")
        if kind not in GATE_ARITY:
            raise NetlistSyntaxError(line_no, f"unknown gate kind '{kind}'")
        fanins = [a.strip() for a in args.split(",") if a.strip()]
        if len(fanins) != GATE_ARITY[kind]:
            raise NetlistSyntaxError(line_no, f"{kind} expects {GATE_ARITY[kind]} fanin(s), got {len(fanins)}")
        gate_lines.append((line_no, name, kind, fanins))

    if inputs is None:
        raise NetlistSyntaxError(1, "missing .inputs declaration")
    if not output_names:
        raise NetlistSyntaxError(output_line or 1, "missing or empty .outputs declaration")

    defined: dict[str, int] = {}
    for name in inputs:
        if name in defined:
            raise NetlistSyntaxError(1, f"duplicate input '{name}'")
        defined[name] = -1
    for index, (line_no, name, _, _) in enumerate(gate_lines):
        if name in defined:
            raise NetlistSyntaxError(line_no, f"signal '{name}' defined twice")
        defined[name] = index

    graph = nx.DiGraph()
    graph.add_nodes_from(range(len(gate_lines)))
    for index, (line_no, _, _, fanins) in enumerate(gate_lines):
        for f in fanins:
            if f not in defined:
                raise NetlistSyntaxError(line_no, f"undefined signal '{f}'")
            if defined[f] >= 0:
                graph.add_edge(defined[f], index)
    try:
        order = list(nx.lexicographical_topological_sort(graph, key=lambda node: node))
    except nx.NetworkXUnfeasible:
        cycle = nx.find_cycle(graph)
        names = " -> ".join(gate_lines[u][1] for u, _ in cycle)
        raise CycleError(f"combinational loop through {names}") from None

    ids = {name: i for i, name in enumerate(inputs)}
    gates: list[Gate] = []
    for index in order:
        _, name, kind, fanins = gate_lines[index]
        gid = len(inputs) + len(gates)
        ids[name] = gid
        gates.append(Gate(gid, kind, tuple(ids[f] for f in fanins)))
    for name in output_names:
        if name not in ids:
            raise NetlistSyntaxError(output_line, f"undefined output '{name}'")
    return Netlist(tuple(inputs), tuple(gates), tuple(ids[name] for name in output_names))


_COMMUTATIVE = {"AND2", "OR2", "NAND2", "NOR2", "XOR2", "XNOR2"}


class NetlistBuilder:
    """Incremental netlist construction with constant folding and structural hashing.

    Folding only applies to constants the builder itself created; logic pulled
    in through :meth:`instantiate` stays opaque so component areas remain
    additive when components are composed.
    """

    def __init__(self, input_names: Iterable[str]):
        self.inputs = list(input_names)
        self._gates: list[tuple[str, tuple[int, ...]]] = []
        self._consts: dict[int, int] = {}
        self._const_ids: dict[int, int] = {}
        self._hash: dict[tuple, int] = {}
        self._inverse: dict[int, int] = {}

    @property
    def n_inputs(self) -> int:
        return len(self.inputs)

    def input(self, index: int) -> int:
        return index

    def scope(self) -> None:
        """Forget structural hashes and constants so later logic is built independently."""
        self._hash.clear()
        self._inverse.clear()
        self._consts.clear()
        self._const_ids.clear()

    def raw(self, kind: str, *fanins: int) -> int:
        self._gates.append((kind, tuple(fanins)))
        return self.n_inputs + len(self._gates) - 1

    def const(self, value: int) -> int:
        value = 1 if value else 0
        if value not in self._const_ids:
            sig = self.raw("CONST1" if value else "CONST0")
            self._const_ids[value] = sig
            self._consts[sig] = value
        return self._const_ids[value]

    def const_value(self, sig: int) -> int | None:
        return self._consts.get(sig)

    def _hashed(self, kind: str, *fanins: int) -> int:
        key = (kind, tuple(sorted(fanins)) if kind in _COMMUTATIVE else fanins)
        if key not in self._hash:
            self._hash[key] = self.raw(kind, *fanins)
        return self._hash[key]

    def _complements(self, a: int, b: int) -> bool:
        return self._inverse.get(a) == b or self._inverse.get(b) == a

    def not_(self, a: int) -> int:
        if a in self._consts:
            return self.const(1 - self._consts[a])
        if a in self._inverse:
            return self._inverse[a]
        out = self._hashed("NOT", a)
        self._inverse[out] = a
        self._inverse.setdefault(a, out)
        return out

    def buf(self, a: int) -> int:
        return self._hashed("BUF", a)

    def and_(self, a: int, b: int) -> int:
        ca, cb = self._consts.get(a), self._consts.get(b)
        if ca == 0 or cb == 0:
            return self.const(0)
        if ca == 1:
            return b
        if cb == 1 or a == b:
            return a
        if self._complements(a, b):
            return self.const(0)
        return self._hashed("AND2", a, b)

    def or_(self, a: int, b: int) -> int:
        ca, cb = self._consts.get(a), self._consts.get(b)
        if ca == 1 or cb == 1:
            return self.const(1)
        if ca == 0:
            return b
        if cb == 0 or a == b:
            return a
        if self._complements(a, b):
            return self.const(1)
        return self._hashed("OR2", a, b)

    def xor_(self, a: int, b: int) -> int:
        ca, cb = self._consts.get(a), self._consts.get(b)
        if ca is not None and cb is not None:
            return self.const(ca ^ cb)
        if ca is not None:
            return b if ca == 0 else self.not_(b)
        if cb is not None:
            return a if cb == 0 else self.not_(a)
        if a == b:
            return self.const(0)
        if self._complements(a, b):
            return self.const(1)
        return self._hashed("XOR2", a, b)

    def xnor_(self, a: int, b: int) -> int:
        ca, cb = self._consts.get(a), self._consts.get(b)
        if ca is not None or cb is not None or a == b or self._complements(a, b):
            return self.not_(self.xor_(a, b))
        return self._hashed("XNOR2", a, b)

    def mux(self, sel: int, when_true: int, when_false: int) -> int:
        cs = self._consts.get(sel)
        if cs is not None:
            return when_true if cs else when_false
        if when_true == when_false:
            return when_true
        return self.or_(self.and_(sel, when_true), self.and_(self.not_(sel), when_false))

    def instantiate(self, net: Netlist, input_signals: Sequence[int]) -> list[int]:
        """Copy ``net`` gate by gate onto ``input_signals``; returns its output signals."""
        if len(input_signals) != net.n_inputs:
            raise ContractViolation(
                f"instance needs {net.n_inputs} input signals, got {len(input_signals)}"
            )
        mapping = list(input_signals)
        for g in net.gates:
            mapping.append(self.raw(g.kind, *(mapping[f] for f in g.fanins)))
        return [mapping[o] for o in net.outputs]

    def build(self, outputs: Sequence[int]) -> Netlist:
        return compact(self.inputs, self._gates, list(outputs))
