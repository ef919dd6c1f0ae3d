"""Technology and analog-interface cost models.

Gate areas come from a versioned technology file (``tech/default.json``). The
shipped values are synthetic NAND2-equivalent figures that keep relative
results reproducible; a calibrated printed PDK can be dropped in later.
Converter costs default to the published EGFET Flash/SAR/ABC measurements.
"""
import json
import logging
import math
import pathlib
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import pandas as pd

from errors import ConfigurationError, ContractViolation, InterfaceLookupError

logger = logging.getLogger(__name__)

DEFAULT_TECH_FILE = pathlib.Path(__file__).with_name("tech") / "default.json"

GATE_ARITY: Mapping[str, int] = MappingProxyType({
    "CONST0": 0,
    "CONST1": 0,
    "BUF": 1,
    "NOT": 1,
    "AND2": 2,
    "OR2": 2,
    "NAND2": 2,
    "NOR2": 2,
    "XOR2": 2,
    "XNOR2": 2,
})
GATE_KINDS = tuple(GATE_ARITY)

CONVERTER_KINDS = ("Flash", "SAR", "ABC")

# (kind, bits) -> (area mm^2, power mW); EGFET measurements at 0.6 V.
DEFAULT_INTERFACE_ROWS: Mapping[tuple[str, int], tuple[float, float]] = MappingProxyType({
    ("Flash", 2): (5.3, 0.04),
    ("Flash", 3): (9.9, 0.13),
    ("Flash", 4): (24.2, 0.32),
    ("SAR", 2): (19.0, 0.43),
    ("SAR", 3): (30.1, 0.76),
    ("SAR", 4): (35.8, 1.03),
    ("ABC", 1): (0.005, 0.001),
})


@dataclass(frozen=True)
class CellLibrary:
    """Per-gate areas in technology units plus the area-proportional power model."""

    entries: Mapping[str, float]
    power_coefficient: float
    area_unit_mm2: float = 1.0
    source: str = "<memory>"

    def __post_init__(self):
        for kind, area in self.entries.items():
            if kind not in GATE_ARITY:
                raise ConfigurationError(f"unknown gate kind '{kind}' in {self.source}")
            if area < 0 or not math.isfinite(area):
                raise ConfigurationError(f"area of {kind} must be a finite value >= 0, got {area}")
        for const in ("CONST0", "CONST1"):
            if self.entries.get(const, 0.0) != 0.0:
                raise ConfigurationError(f"{const} is wiring and must have area 0")
        if self.power_coefficient < 0:
            raise ConfigurationError("power_coefficient must be >= 0")
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    def missing_kinds(self, kinds=GATE_KINDS) -> list[str]:
        return [k for k in kinds if k not in self.entries]

    def to_mm2(self, area: float) -> float:
        return area * self.area_unit_mm2

    def to_dict(self) -> dict:
        return {
            "areas": dict(self.entries),
            "power_coefficient": self.power_coefficient,
            "area_unit_mm2": self.area_unit_mm2,
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CellLibrary":
        return cls(
            {k: float(v) for k, v in data["areas"].items()},
            float(data.get("power_coefficient", 0.0)),
            float(data.get("area_unit_mm2", 1.0)),
            data.get("source", "<memory>"),
        )


def gate_area(lib: CellLibrary, kind: str) -> float:
    try:
        return lib.entries[kind]
    except KeyError:
        raise ConfigurationError(f"gate kind '{kind}' has no area in technology file {lib.source}") from None


def estimate_power(lib: CellLibrary, area: float) -> float:
    """Leakage-dominated power: proportional to area."""
    if area < 0:
        raise ContractViolation(f"area must be >= 0, got {area}")
    return area * lib.power_coefficient


def load_cell_library(path: str | pathlib.Path | None = None) -> CellLibrary:
    """Load a technology file.

    Two formats are accepted: JSON (``areas`` map, ``power_coefficient`` and
    optional ``area_unit_mm2``), or a line-oriented ``KEY VALUE`` file where the
    keys are gate kinds plus ``power_coefficient``/``area_unit_mm2``.
    """
    path = pathlib.Path(path) if path else DEFAULT_TECH_FILE
    if not path.exists():
        raise ConfigurationError(f"technology file not found: {path}")
    text = path.read_text(encoding="utf-8")

    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: {e}") from e
        areas = {k: float(v) for k, v in data.get("areas", {}).items()}
        coefficient = float(data.get("power_coefficient", 0.0))
        unit = float(data.get("area_unit_mm2", 1.0))
    else:
        areas, coefficient, unit = {}, 0.0, 1.0
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").split()
            if len(parts) != 2:
                raise ConfigurationError(f"{path}:{line_no}: expected 'KEY VALUE'")
            key, value = parts[0], float(parts[1])
            if key == "power_coefficient":
                coefficient = value
            elif key == "area_unit_mm2":
                unit = value
            else:
                areas[key] = value

    lib = CellLibrary(areas, coefficient, unit, source=str(path))
    logger.debug("[Tech] loaded %d gate areas from %s", len(areas), path)
    return lib


@dataclass(frozen=True)
class InterfaceCostTable:
    rows: Mapping[tuple[str, int], tuple[float, float]] = field(
        default_factory=lambda: DEFAULT_INTERFACE_ROWS
    )

    def __post_init__(self):
        for (kind, bits), (area, power) in self.rows.items():
            if kind not in CONVERTER_KINDS:
                raise ConfigurationError(f"unknown converter kind '{kind}'")
            if not 1 <= bits <= 4:
                raise ConfigurationError(f"converter bits must be in 1..4, got {bits}")
            if kind == "ABC" and bits != 1:
                raise ConfigurationError("ABC is a 1-bit converter")
            if area < 0 or power < 0:
                raise ConfigurationError(f"negative cost for ({kind}, {bits})")
        object.__setattr__(self, "rows", MappingProxyType(dict(self.rows)))


def interface_cost(table: InterfaceCostTable, kind: str, bits: int) -> tuple[float, float]:
    """Return (area mm^2, power mW) of one converter."""
    try:
        return table.rows[(kind, bits)]
    except KeyError:
        raise InterfaceLookupError(f"no interface cost for {kind} at {bits} bit(s)") from None


def converter_for_precision(bits: int, preferred: str = "Flash") -> str:
    """1-bit inputs use the analog-to-binary converter, wider inputs the preferred ADC."""
    return "ABC" if bits == 1 else preferred


def load_interface_table(path: str | pathlib.Path | None = None) -> InterfaceCostTable:
    """Embedded defaults, overridden row by row from a CSV (kind, bits, area_mm2, power_mw)."""
    rows = dict(DEFAULT_INTERFACE_ROWS)
    if path is None:
        return InterfaceCostTable(rows)
    path = pathlib.Path(path)
    if not path.exists():
        raise ConfigurationError(f"interface table not found: {path}")
    frame = pd.read_csv(path, comment="#", skipinitialspace=True)
    expected = {"kind", "bits", "area_mm2", "power_mw"}
    if not expected.issubset(frame.columns):
        raise ConfigurationError(f"{path}: columns must be {sorted(expected)}")
    for row in frame.itertuples(index=False):
        rows[(str(row.kind), int(row.bits))] = (float(row.area_mm2), float(row.power_mw))
    logger.info("[Tech] interface table: %d override row(s) from %s", len(frame), path)
    return InterfaceCostTable(rows)
