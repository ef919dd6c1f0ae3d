import itertools
import os
import pathlib

import numpy as np
import pytest

from bdderr import ErrorAnalyzer
from circuitgen import LtgSpec, PopcountSpec, gen_popcount_truncated
from complib import ApproxComponent, ComponentLibrary, exact_component, spec_from_key
from netlist import Gate, Netlist, area
from tech import load_cell_library
from tnn import TnnModel

DATA_DIR = os.getenv("TNN_DATA_DIR")


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    for var in ("TNN_SEED", "TNN_JOBS", "TNN_OUT", "TNN_TECH", "TNN_INTERFACE_TABLE"):
        monkeypatch.delenv(var, raising=False)


@pytest.fixture(scope="session")
def lib():
    return load_cell_library()


def constant_netlist(inputs, value: int, n_outputs: int = 1) -> Netlist:
    n = len(inputs)
    kind = "CONST1" if value else "CONST0"
    return Netlist(tuple(inputs), (Gate(n, kind, ()),), (n,) * n_outputs)


def all_codes(n_features: int, k: int) -> np.ndarray:
    return np.array(list(itertools.product(range(2 ** k), repeat=n_features)), dtype=np.int64)


@pytest.fixture
def small_model() -> TnnModel:
    # hidden neuron 3 has an all-zero output column and never reaches the classifier
    w1 = [[1, -1, 0], [0, 1, 1], [-1, 0, 1], [1, 1, -1]]
    w2 = [[1, -1, 0, 0], [-1, 1, 1, 0], [1, 0, -1, 0]]
    return TnnModel(2, np.array(w1), np.array(w2))


def _approx_ltgs(spec: LtgSpec, lib, analyzer) -> list[ApproxComponent]:
    exact = exact_component(spec, lib)
    out = []
    for value in (0, 1):
        net = constant_netlist(spec.input_names(), value)
        report = analyzer.ltg_error(exact.netlist, net, spec)
        if report.ep:
            out.append(ApproxComponent(spec.key, "ltg", net, report, area(net, lib), metric="mde",
                                       tau=float(report.mde), run_id=f"const{value}"))
    return out


def _approx_popcounts(spec: PopcountSpec, lib, analyzer) -> list[ApproxComponent]:
    exact = exact_component(spec, lib)
    out = []
    for t in range(1, spec.m):
        net = gen_popcount_truncated(spec, t, "inputs")
        report = analyzer.popcount_error(exact.netlist, net)
        out.append(ApproxComponent(spec.key, "popcount", net, report, area(net, lib), metric="mae",
                                   tau=float(report.mae), run_id=f"drop{t}"))
    return out


def make_library(model: TnnModel, lib, approximate: bool = True) -> ComponentLibrary:
    analyzer = ErrorAnalyzer()
    library = ComponentLibrary()
    for key in sorted(set(model.hidden_keys() + model.output_keys())):
        spec = spec_from_key(key)
        library.add(exact_component(spec, lib))
        if not approximate:
            continue
        extra = _approx_ltgs(spec, lib, analyzer) if isinstance(spec, LtgSpec) else _approx_popcounts(spec, lib, analyzer)
        for c in extra:
            library.add(c)
    return library


@pytest.fixture
def small_library(small_model, lib) -> ComponentLibrary:
    return make_library(small_model, lib)


@pytest.fixture
def exact_library(small_model, lib) -> ComponentLibrary:
    return make_library(small_model, lib, approximate=False)


def write_toy_csv(path: pathlib.Path, rows: int = 60, seed: int = 0) -> pathlib.Path:
    """Two well-separated classes: class a sits at high f0/low f1, class b the reverse."""
    rng = np.random.default_rng(seed)
    lines = ["f0,f1,f2,label"]
    for i in range(rows):
        noise = rng.uniform(0.0, 0.2, size=3)
        if i % 2 == 0:
            f0, f1, label = 0.8 + noise[0], 0.0 + noise[1], "a"
        else:
            f0, f1, label = 0.0 + noise[0], 0.8 + noise[1], "b"
        lines.append(f"{f0:.4f},{f1:.4f},{noise[2]:.4f},{label}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@pytest.fixture
def toy_csv(tmp_path) -> pathlib.Path:
    return write_toy_csv(tmp_path / "toy.csv")


def uci_csv(name: str) -> pathlib.Path:
    if not DATA_DIR or not (pathlib.Path(DATA_DIR) / f"{name}.csv").exists():
        pytest.skip(f"{name}.csv not found in TNN_DATA_DIR")
    return pathlib.Path(DATA_DIR) / f"{name}.csv"

