"""Exact bespoke circuit generators for ternary neural networks.

Hidden neurons are linear threshold gates (LTGs) ``y = [sum w_i x_i >= 0]``;
output neurons are popcounts of the (possibly inverted) hidden activations
followed by the hardwired ``2P + Z`` correction; the class is picked by an
exact argmax. Everything is built from the 2-input cell set in :mod:`tech`.
"""
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, Sequence

from errors import ContractViolation, GenerationRefused
from netlist import Netlist, NetlistBuilder

if TYPE_CHECKING:
    from tnn import TnnModel

logger = logging.getLogger(__name__)

DEFAULT_MAX_INPUT_BITS = 90
LtgStyle = Literal["one_tree", "two_tree"]
LTG_STYLES: tuple[LtgStyle, ...] = ("one_tree", "two_tree")


@dataclass(frozen=True)
class LtgSpec:
    weights: tuple[int, ...]
    k: int
    max_input_bits: int = DEFAULT_MAX_INPUT_BITS

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(int(w) for w in self.weights))
        if any(w not in (-1, 0, 1) for w in self.weights):
            raise ContractViolation(f"LTG weights must be ternary, got {self.weights}")
        if not any(self.weights):
            raise ContractViolation("an LTG needs at least one nonzero weight")
        if not 1 <= self.k <= 4:
            raise ContractViolation(f"input precision must be 1..4 bits, got {self.k}")

    @property
    def n_pos(self) -> int:
        return sum(1 for w in self.weights if w == 1)

    @property
    def n_neg(self) -> int:
        return sum(1 for w in self.weights if w == -1)

    @property
    def nonzero(self) -> tuple[int, ...]:
        return tuple(i for i, w in enumerate(self.weights) if w)

    @property
    def input_bits(self) -> int:
        return len(self.nonzero) * self.k

    @property
    def max_magnitude(self) -> int:
        """Largest |sum w_i x_i| over the input domain."""
        return max(self.n_pos, self.n_neg) * ((1 << self.k) - 1)

    @property
    def key(self) -> str:
        return f"ltg-p{self.n_pos}-n{self.n_neg}-k{self.k}"

    def canonical(self) -> "LtgSpec":
        """Positive weights first, then negative; zero weights dropped."""
        return LtgSpec((1,) * self.n_pos + (-1,) * self.n_neg, self.k, self.max_input_bits)

    def input_names(self) -> list[str]:
        return [f"x{i}_{b}" for i in self.nonzero for b in range(self.k)]

    def check_size(self) -> None:
        if self.input_bits > self.max_input_bits:
            raise GenerationRefused(
                f"{self.key} needs {self.input_bits} input bits, above the supported maximum of "
                f"{self.max_input_bits}; exact generation and approximation are refused"
            )


@dataclass(frozen=True)
class PopcountSpec:
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ContractViolation(f"popcount needs m >= 1, got {self.m}")

    @property
    def width(self) -> int:
        return self.m.bit_length()

    @property
    def key(self) -> str:
        return f"pc-m{self.m}"

    def input_names(self) -> list[str]:
        return [f"p{j}" for j in range(self.m)]


@dataclass(frozen=True)
class OutputNeuronSpec:
    weights: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(int(w) for w in self.weights))
        if any(w not in (-1, 0, 1) for w in self.weights):
            raise ContractViolation(f"output weights must be ternary, got {self.weights}")

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def z(self) -> int:
        return sum(1 for w in self.weights if w == 0)

    @property
    def nonzero(self) -> tuple[int, ...]:
        return tuple(j for j, w in enumerate(self.weights) if w)

    def popcount_spec(self) -> PopcountSpec:
        return PopcountSpec(len(self.nonzero))


@dataclass
class Word:
    """Unsigned bus, LSB first, with a bound on the value it can carry."""

    bits: list[int]
    max_value: int


def _word(b: NetlistBuilder, signals: Sequence[int]) -> Word:
    return Word(list(signals), (1 << len(signals)) - 1)


def add_words(b: NetlistBuilder, x: Word, y: Word) -> Word:
    """Ripple-carry adder of half/full adders, trimmed to the reachable width."""
    width = (x.max_value + y.max_value).bit_length()
    out: list[int] = []
    carry: int | None = None
    for i in range(width):
        terms = [s for s in (
            x.bits[i] if i < len(x.bits) else None,
            y.bits[i] if i < len(y.bits) else None,
            carry,
        ) if s is not None]
        if not terms:
            out.append(b.const(0))
            carry = None
        elif len(terms) == 1:
            out.append(terms[0])
            carry = None
        elif len(terms) == 2:
            p, q = terms
            out.append(b.xor_(p, q))
            carry = b.and_(p, q)
        else:
            p, q, c = terms
            t = b.xor_(p, q)
            out.append(b.xor_(t, c))
            carry = b.or_(b.and_(p, q), b.and_(c, t))
    return Word(out, x.max_value + y.max_value)


def sum_words(b: NetlistBuilder, words: list[Word]) -> Word:
    """Balanced adder tree: operands are paired level by level."""
    if not words:
        return Word([], 0)
    level = list(words)
    while len(level) > 1:
        paired = [add_words(b, level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]


def ge_const(b: NetlistBuilder, x: Word, threshold: int) -> int:
    """Single signal ``x >= threshold``."""
    if threshold <= 0:
        return b.const(1)
    if threshold > x.max_value:
        return b.const(0)
    ge = b.const(1)
    for i, bit in enumerate(x.bits):
        ge = b.and_(bit, ge) if (threshold >> i) & 1 else b.or_(bit, ge)
    if threshold >> len(x.bits):
        return b.const(0)
    return ge


def _operand(bits: list[int], i: int, b: NetlistBuilder) -> int:
    return bits[i] if i < len(bits) else b.const(0)


def subtract_borrow(b: NetlistBuilder, x: Word, y: Word) -> tuple[list[int], int]:
    """Ripple borrow subtractor: returns (difference bits, final borrow) of ``x - y``."""
    width = max(len(x.bits), len(y.bits), 1)
    borrow = b.const(0)
    diff: list[int] = []
    for i in range(width):
        a, c = _operand(x.bits, i, b), _operand(y.bits, i, b)
        t = b.xor_(a, c)
        diff.append(b.xor_(t, borrow))
        borrow = b.or_(b.and_(b.not_(a), c), b.and_(b.not_(t), borrow))
    return diff, borrow


def negate_on_sign(b: NetlistBuilder, bits: list[int], sign: int) -> list[int]:
    """Two's-complement magnitude: ``(bits XOR sign) + sign``."""
    carry = sign
    out = []
    for bit in bits:
        flipped = b.xor_(bit, sign)
        out.append(b.xor_(flipped, carry))
        carry = b.and_(flipped, carry)
    return out


def _ltg_words(spec: LtgSpec) -> tuple[list[list[int]], list[list[int]]]:
    pos, neg = [], []
    signal = 0
    for i in spec.nonzero:
        word = list(range(signal, signal + spec.k))
        signal += spec.k
        (pos if spec.weights[i] == 1 else neg).append(word)
    return pos, neg


def gen_ltg_exact(spec: LtgSpec, style: LtgStyle = "two_tree") -> Netlist:
    """Exact LTG ``[sum w_i x_i >= 0]`` (sign(0) = 1).

    ``one_tree`` adds the positive words and the bitwise-inverted negative
    words in one tree and compares against the constant ``N(2^k - 1)``;
    ``two_tree`` sums both signs separately and takes the inverted borrow of
    their difference.
    """
    spec.check_size()
    b = NetlistBuilder(spec.input_names())
    pos, neg = _ltg_words(spec)
    if style == "one_tree":
        words = [_word(b, w) for w in pos]
        words += [_word(b, [b.not_(s) for s in w]) for w in neg]
        total = sum_words(b, words)
        y = ge_const(b, total, len(neg) * ((1 << spec.k) - 1))
    elif style == "two_tree":
        plus = sum_words(b, [_word(b, w) for w in pos])
        minus = sum_words(b, [_word(b, w) for w in neg])
        _, borrow = subtract_borrow(b, plus, minus)
        y = b.not_(borrow)
    else:
        raise ContractViolation(f"unknown LTG style '{style}'")
    net = b.build([y])
    logger.debug("[Gen] %s %s: %d gates", spec.key, style, len(net.gates))
    return net


def gen_weighted_sum_magnitude(spec: LtgSpec) -> Netlist:
    """Reference circuit for error analysis: the bits of ``|sum w_i x_i|``, LSB first."""
    b = NetlistBuilder(spec.input_names())
    pos, neg = _ltg_words(spec)
    plus = sum_words(b, [_word(b, w) for w in pos])
    minus = sum_words(b, [_word(b, w) for w in neg])
    diff, sign = subtract_borrow(b, plus, minus)
    magnitude = negate_on_sign(b, diff, sign)
    width = max(spec.max_magnitude.bit_length(), 1)
    return b.build(magnitude[:width])


def gen_popcount_exact(spec: PopcountSpec) -> Netlist:
    b = NetlistBuilder(spec.input_names())
    total = sum_words(b, [Word([j], 1) for j in range(spec.m)])
    return b.build(total.bits[:spec.width])


TruncationMode = Literal["inputs", "lsb"]


def gen_popcount_truncated(spec: PopcountSpec, t: int, mode: TruncationMode = "inputs") -> Netlist:
    """Truncation baseline: drop the last ``t`` inputs, or force ``t`` output LSBs to zero.

    The result keeps the full popcount interface (m inputs, g outputs).
    """
    b = NetlistBuilder(spec.input_names())
    if mode == "inputs":
        if not 0 <= t < spec.m:
            raise ContractViolation(f"input-drop truncation needs 0 <= t < {spec.m}, got {t}")
        total = sum_words(b, [Word([j], 1) for j in range(spec.m - t)])
        bits = [_operand(total.bits, i, b) for i in range(spec.width)]
    elif mode == "lsb":
        if not 0 <= t < spec.width:
            raise ContractViolation(f"LSB truncation needs 0 <= t < {spec.width}, got {t}")
        total = sum_words(b, [Word([j], 1) for j in range(spec.m)])
        bits = [b.const(0) if i < t else total.bits[i] for i in range(spec.width)]
    else:
        raise ContractViolation(f"unknown truncation mode '{mode}'")
    return b.build(bits)


def output_width(spec: OutputNeuronSpec, pc: Netlist) -> int:
    """Bits of ``o = 2P + Z`` when P may take any value the popcount can emit."""
    return (2 * ((1 << pc.n_outputs) - 1) + spec.z).bit_length()


def _add_constant(b: NetlistBuilder, bits: list[int | None], value: int, width: int) -> list[int]:
    # Raw gates only: the structure depends on (value, width), never on which
    # signals the popcount instance happens to drive. None marks a known-zero bit.
    out: list[int] = []
    carry: int | None = None
    for i in range(width):
        a = bits[i] if i < len(bits) else None
        c = (value >> i) & 1
        if a is None:
            if carry is None:
                out.append(b.const(c))
            elif c:
                # 1 + carry: sum is the inverted carry, carry-out is the carry itself
                out.append(b.raw("NOT", carry))
            else:
                out.append(carry)
                carry = None
            continue
        if carry is None:
            if c:
                out.append(b.raw("NOT", a))
                carry = a
            else:
                out.append(a)
        elif c:
            out.append(b.raw("XNOR2", a, carry))
            carry = b.raw("OR2", a, carry)
        else:
            out.append(b.raw("XOR2", a, carry))
            carry = b.raw("AND2", a, carry)
    return out


def gen_output_neuron(spec: OutputNeuronSpec, pc: Netlist) -> Netlist:
    """Output neuron ``o = 2 P(p) + Z`` around a (possibly approximate) popcount ``pc``.

    Inputs are ``y<j>`` for the hidden activations with nonzero weight; a -1
    weight costs one NOT gate. The popcount is copied verbatim.
    """
    if not spec.nonzero:
        raise ContractViolation("an output neuron with only zero weights has no popcount inputs")
    if pc.n_inputs != len(spec.nonzero):
        raise ContractViolation(
            f"popcount has {pc.n_inputs} inputs but the neuron has {len(spec.nonzero)} nonzero weights"
        )
    b = NetlistBuilder([f"y{j}" for j in spec.nonzero])
    p = [s if spec.weights[j] == 1 else b.not_(s) for s, j in enumerate(spec.nonzero)]
    b.scope()
    count = b.instantiate(pc, p)
    b.scope()
    shifted: list[int | None] = [None, *count]
    return b.build(_add_constant(b, shifted, spec.z, output_width(spec, pc)))


def index_width(c: int) -> int:
    return max(1, math.ceil(math.log2(c)))


def _greater_than(b: NetlistBuilder, x: list[int], y: list[int]) -> int:
    gt = b.const(0)
    for xi, yi in zip(x, y):
        gt = b.or_(b.and_(xi, b.not_(yi)), b.and_(b.xnor_(xi, yi), gt))
    return gt


def gen_argmax(c: int, width: int) -> Netlist:
    """Index of the largest of ``c`` unsigned operands; ties go to the lowest index."""
    if c < 2:
        raise ContractViolation(f"argmax needs at least 2 operands, got {c}")
    if width < 1:
        raise ContractViolation("operand width must be >= 1")
    b = NetlistBuilder([f"a{i}_{bit}" for i in range(c) for bit in range(width)])
    operands = [list(range(i * width, (i + 1) * width)) for i in range(c)]
    iw = index_width(c)
    best = operands[0]
    index = [b.const(0)] * iw
    for i in range(1, c):
        take = _greater_than(b, operands[i], best)
        best = [b.mux(take, o, cur) for o, cur in zip(operands[i], best)]
        index = [b.mux(take, b.const((i >> bit) & 1), cur) for bit, cur in enumerate(index)]
    return b.build(index)


def hidden_neuron_spec(weights: Sequence[int], k: int, max_input_bits: int = DEFAULT_MAX_INPUT_BITS) -> LtgSpec:
    """Canonical LTG spec for a hidden-neuron weight row."""
    return LtgSpec(tuple(int(w) for w in weights), k, max_input_bits).canonical()


def hidden_neuron_columns(weights: Sequence[int]) -> list[int]:
    """Feature indices feeding the canonical LTG: positive weights first, then negative."""
    pos = [i for i, w in enumerate(weights) if w == 1]
    neg = [i for i, w in enumerate(weights) if w == -1]
    return pos + neg


def assemble_tnn(model: "TnnModel", hidden: Sequence[Netlist], output: Sequence[Netlist]) -> Netlist:
    """Compose per-neuron netlists into one classifier from quantized features to class index.

    Inputs are ``f<feature>_<bit>`` (LSB first); outputs are the class index
    bits. ``output[j]`` must be the output-neuron netlist of class ``j``.
    Components are copied verbatim so the assembled area is the sum of theirs.
    """
    w1, w2, k = model.w1, model.w2, model.k
    if len(hidden) == 0 or w1.shape[0] == 0:
        raise ContractViolation("a TNN needs at least one hidden neuron")
    if len(hidden) != w1.shape[0] or len(output) != w2.shape[0]:
        raise ContractViolation(
            f"model has {w1.shape[0]} hidden / {w2.shape[0]} output neurons, got "
            f"{len(hidden)} / {len(output)} netlists"
        )
    n_features = w1.shape[1]
    b = NetlistBuilder([f"f{i}_{bit}" for i in range(n_features) for bit in range(k)])

    activations: list[int] = []
    for i, net in enumerate(hidden):
        columns = hidden_neuron_columns(w1[i])
        if net.n_inputs != len(columns) * k or net.n_outputs != 1:
            raise ContractViolation(
                f"hidden neuron {i}: netlist interface {net.n_inputs}->{net.n_outputs} does not match "
                f"{len(columns)} inputs of {k} bit(s)"
            )
        signals = [f * k + bit for f in columns for bit in range(k)]
        activations.append(b.instantiate(net, signals)[0])

    values: list[list[int]] = []
    for j, net in enumerate(output):
        used = [i for i, w in enumerate(w2[j]) if w]
        if net.n_inputs != len(used):
            raise ContractViolation(f"output neuron {j}: netlist has {net.n_inputs} inputs, expected {len(used)}")
        values.append(b.instantiate(net, [activations[i] for i in used]))

    width = max(len(v) for v in values)
    zero = b.const(0)
    operands = [v + [zero] * (width - len(v)) for v in values]
    selector = gen_argmax(len(output), width)
    index = b.instantiate(selector, [s for v in operands for s in v])
    return b.build(index)


def assemble_exact_tnn(model: "TnnModel", style: LtgStyle = "two_tree") -> Netlist:
    """Exact bespoke classifier: exact LTGs, exact popcounts, Z-adders and argmax."""
    hidden = [gen_ltg_exact(hidden_neuron_spec(row, model.k), style) for row in model.w1]
    output = []
    for row in model.w2:
        spec = OutputNeuronSpec(tuple(row))
        output.append(gen_output_neuron(spec, gen_popcount_exact(spec.popcount_spec())))
    return assemble_tnn(model, hidden, output)
