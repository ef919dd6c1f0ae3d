"""Ternary neural networks: data ingest, quantization, training and inference.

A model has one hidden layer of sign neurons (``sign(0) = 1``) and an argmax
output layer; both weight matrices are ternary. Inference works on integer
input codes only, which is what the bespoke circuits see. Output neurons are
evaluated in encoded form, ``o = 2P + Z``, where ``P`` is the popcount of the
hidden activations (inverted for -1 weights) and ``Z`` the zero-weight count;
``o`` equals the true ternary dot product plus the hidden-layer size.
"""
import json
import logging
import pathlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, NamedTuple, Sequence

import numpy as np
import pandas as pd

from circuitgen import OutputNeuronSpec, hidden_neuron_columns, hidden_neuron_spec
from errors import ContractViolation
from netlist import bits_to_int, simulate_batch
from pipeline import atomic_write_json

if TYPE_CHECKING:
    from complib import ComponentLibrary

logger = logging.getLogger(__name__)

SPLITS = ("fit", "eval", "train", "test")


class Split(NamedTuple):
    codes: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    """Min-max normalized features (train statistics) with a seeded 70/30 split.

    ``eval_idx`` is a held-out slice of the training rows used for model and
    design selection; ``fit`` is the rest of the training rows.
    """

    x: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    eval_idx: np.ndarray
    feature_min: np.ndarray
    feature_max: np.ndarray
    classes: list[str]
    feature_names: list[str] = field(default_factory=list)
    name: str = "dataset"

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def indices(self, split: str) -> np.ndarray:
        match split:
            case "train":
                return self.train_idx
            case "test":
                return self.test_idx
            case "eval":
                return self.eval_idx
            case "fit":
                return np.setdiff1d(self.train_idx, self.eval_idx)
        raise ContractViolation(f"unknown split '{split}', expected one of {SPLITS}")

    def split(self, name: str, k: int) -> Split:
        idx = self.indices(name)
        return Split(quantize(self.x[idx], k), self.y[idx])


def ingest_csv(path: str | pathlib.Path, label_column: str | int = -1, *, seed: int = 0,
               test_fraction: float = 0.3, eval_fraction: float = 0.2, header: bool = True) -> Dataset:
    frame = pd.read_csv(path, header=0 if header else None, skipinitialspace=True)
    if frame.empty:
        raise ContractViolation(f"{path}: no rows")
    label_name = frame.columns[label_column] if isinstance(label_column, int) else label_column
    if label_name not in frame.columns:
        raise ContractViolation(f"{path}: no label column '{label_name}'")
    features = frame.drop(columns=[label_name])
    try:
        x = features.apply(pd.to_numeric, errors="raise").to_numpy(dtype=float)
    except (ValueError, TypeError) as e:
        raise ContractViolation(f"{path}: non-numeric feature cell ({e})") from e
    if np.isnan(x).any():
        raise ContractViolation(f"{path}: missing feature values")
    codes, uniques = pd.factorize(frame[label_name], sort=True)
    y = codes.astype(np.int64)

    n = len(frame)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = min(int(round(n * test_fraction)), n - 1)
    test_idx = np.sort(order[:n_test])
    train_idx = np.sort(order[n_test:])
    n_eval = min(int(round(len(train_idx) * eval_fraction)), max(len(train_idx) - 1, 0))
    eval_idx = np.sort(rng.permutation(train_idx)[:n_eval])

    lo = x[train_idx].min(axis=0)
    hi = x[train_idx].max(axis=0)
    span = hi - lo
    scaled = np.divide(x - lo, span, out=np.zeros_like(x), where=span > 0)
    dataset = Dataset(
        x=np.clip(scaled, 0.0, 1.0),
        y=y,
        train_idx=train_idx,
        test_idx=test_idx,
        eval_idx=eval_idx,
        feature_min=lo,
        feature_max=hi,
        classes=[str(c) for c in uniques],
        feature_names=[str(c) for c in features.columns],
        name=pathlib.Path(path).stem,
    )
    logger.info("[Data] %s: %d rows, %d features, %d classes (train %d / test %d / eval %d)",
                dataset.name, n, dataset.n_features, dataset.n_classes, len(train_idx), len(test_idx), n_eval)
    return dataset


def nominal_thresholds(k: int) -> np.ndarray:
    """Reference levels i/2^k of a 2^k-level Flash converter."""
    if not 1 <= k <= 4:
        raise ContractViolation(f"input precision must be 1..4 bits, got {k}")
    return np.arange(1, 2 ** k) / 2 ** k


def quantize(x, k: int):
    """``min(floor(x * 2^k), 2^k - 1)`` after clamping ``x`` to [0, 1]."""
    if not 1 <= k <= 4:
        raise ContractViolation(f"input precision must be 1..4 bits, got {k}")
    levels = 2 ** k
    codes = np.minimum(np.floor(np.clip(np.asarray(x, dtype=float), 0.0, 1.0) * levels), levels - 1).astype(np.int64)
    return int(codes) if codes.ndim == 0 else codes


def quantize_with_thresholds(x: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Flash semantics: the code is the number of reference levels at or below ``x``."""
    return np.searchsorted(np.sort(thresholds), np.asarray(x, dtype=float), side="right").astype(np.int64)


@dataclass
class TnnModel:
    k: int
    w1: np.ndarray
    w2: np.ndarray
    feature_min: np.ndarray | None = None
    feature_max: np.ndarray | None = None
    classes: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.int64)
        self.w2 = np.asarray(self.w2, dtype=np.int64)
        if not 1 <= self.k <= 4:
            raise ContractViolation(f"input precision must be 1..4 bits, got {self.k}")
        if self.w1.ndim != 2 or self.w2.ndim != 2 or self.w2.shape[1] != self.w1.shape[0]:
            raise ContractViolation(f"weight shapes {self.w1.shape} / {self.w2.shape} do not chain")
        for name, w in (("W1", self.w1), ("W2", self.w2)):
            if not np.isin(w, (-1, 0, 1)).all():
                raise ContractViolation(f"{name} is not ternary")
        if self.w1.shape[0] == 0:
            raise ContractViolation("a TNN needs at least one hidden neuron")
        for name, w in (("W1", self.w1), ("W2", self.w2)):
            if (empty := np.flatnonzero(~w.any(axis=1))).size:
                raise ContractViolation(f"{name} row(s) {empty.tolist()} have no nonzero weight")
        if not self.classes:
            self.classes = [str(c) for c in range(self.w2.shape[0])]

    @property
    def m(self) -> int:
        return self.w1.shape[0]

    @property
    def n_features(self) -> int:
        return self.w1.shape[1]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    @property
    def z(self) -> np.ndarray:
        return (self.w2 == 0).sum(axis=1)

    def hidden_keys(self) -> list[str]:
        return [hidden_neuron_spec(row, self.k).key for row in self.w1]

    def output_keys(self) -> list[str]:
        return [OutputNeuronSpec(row).popcount_spec().key for row in self.w2]

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        if self.feature_min is None or self.feature_max is None:
            raise ContractViolation("model carries no normalization constants")
        span = self.feature_max - self.feature_min
        scaled = np.divide(raw - self.feature_min, span, out=np.zeros_like(raw, dtype=float), where=span > 0)
        return np.clip(scaled, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "m": self.m,
            "w1": self.w1.tolist(),
            "w2": self.w2.tolist(),
            "z": self.z.tolist(),
            "feature_min": None if self.feature_min is None else self.feature_min.tolist(),
            "feature_max": None if self.feature_max is None else self.feature_max.tolist(),
            "classes": self.classes,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TnnModel":
        model = cls(
            k=int(data["k"]),
            w1=np.asarray(data["w1"]),
            w2=np.asarray(data["w2"]),
            feature_min=None if data.get("feature_min") is None else np.asarray(data["feature_min"], dtype=float),
            feature_max=None if data.get("feature_max") is None else np.asarray(data["feature_max"], dtype=float),
            classes=list(data.get("classes", [])),
            meta=dict(data.get("meta", {})),
        )
        if "z" in data and list(data["z"]) != model.z.tolist():
            raise ContractViolation("stored Z counts disagree with W2")
        return model

    def save(self, path: str | pathlib.Path) -> None:
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | pathlib.Path) -> "TnnModel":
        return cls.from_dict(json.loads(pathlib.Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ComponentAssignment:
    """Library component ids per hidden neuron and per output-neuron popcount."""

    hidden: tuple[str, ...]
    output: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"hidden": list(self.hidden), "output": list(self.output)}

    @classmethod
    def from_dict(cls, data: dict) -> "ComponentAssignment":
        return cls(tuple(data["hidden"]), tuple(data["output"]))

    @classmethod
    def all_exact(cls, model: TnnModel, library: "ComponentLibrary") -> "ComponentAssignment":
        return cls(
            tuple(library.exact(key).id for key in model.hidden_keys()),
            tuple(library.exact(key).id for key in model.output_keys()),
        )

    def check(self, model: TnnModel) -> None:
        if len(self.hidden) != model.m or len(self.output) != model.n_classes:
            raise ContractViolation(
                f"assignment covers {len(self.hidden)}/{len(self.output)} neurons, model has "
                f"{model.m}/{model.n_classes}"
            )


def hidden_activations(model: TnnModel, codes: np.ndarray) -> np.ndarray:
    """(samples, m) 0/1 activations; a zero sum counts as positive."""
    codes = _check_codes(model, codes)
    return (codes @ model.w1.T >= 0).astype(np.int64)


def _check_codes(model: TnnModel, codes) -> np.ndarray:
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    if codes.shape[1] != model.n_features:
        raise ContractViolation(f"expected {model.n_features} input codes per sample, got {codes.shape[1]}")
    if codes.size and (codes.min() < 0 or codes.max() >= 2 ** model.k):
        raise ContractViolation(f"input codes must lie in 0..{2 ** model.k - 1}")
    return codes


def _popcount_inputs(w_row: np.ndarray, h: np.ndarray) -> np.ndarray:
    used = np.flatnonzero(w_row)
    p = h[:, used]
    return np.where(w_row[used] == 1, p, 1 - p)


def code_bits(codes: np.ndarray, columns: Sequence[int], k: int) -> np.ndarray:
    """LSB-first k-bit words of the selected feature columns, concatenated."""
    selected = codes[:, list(columns)]
    bits = (selected[:, :, None] >> np.arange(k)) & 1
    return bits.reshape(codes.shape[0], -1).astype(bool)


class ApproxEvaluator:
    """Inference with library components, caching per-neuron hidden outputs for one input batch."""

    def __init__(self, model: TnnModel, library: "ComponentLibrary", codes: np.ndarray):
        self.model = model
        self.library = library
        self.codes = _check_codes(model, codes)
        self.hidden_keys = model.hidden_keys()
        self.output_keys = model.output_keys()
        self._columns = [hidden_neuron_columns(row) for row in model.w1]
        self._hidden_cache: dict[tuple[int, str], np.ndarray] = {}

    def hidden(self, i: int, component_id: str) -> np.ndarray:
        cached = self._hidden_cache.get((i, component_id))
        if cached is None:
            net = self.library.resolve(self.hidden_keys[i], component_id).netlist
            stimuli = code_bits(self.codes, self._columns[i], self.model.k)
            cached = simulate_batch(net, stimuli)[:, 0].astype(np.int64)
            self._hidden_cache[(i, component_id)] = cached
        return cached

    def encoded(self, assignment: ComponentAssignment) -> np.ndarray:
        assignment.check(self.model)
        h = np.stack([self.hidden(i, cid) for i, cid in enumerate(assignment.hidden)], axis=1)
        out = np.empty((self.codes.shape[0], self.model.n_classes), dtype=np.int64)
        for j, cid in enumerate(assignment.output):
            row = self.model.w2[j]
            net = self.library.resolve(self.output_keys[j], cid).netlist
            count = bits_to_int(simulate_batch(net, _popcount_inputs(row, h).astype(bool)))
            out[:, j] = 2 * count + int((row == 0).sum())
        return out


def encoded_outputs(model: TnnModel, codes: np.ndarray, assignment: ComponentAssignment | None = None,
                    library: "ComponentLibrary | None" = None) -> np.ndarray:
    """(samples, classes) encoded output values ``2P + Z``."""
    if assignment is not None:
        if library is None:
            raise ContractViolation("an assignment needs the component library to resolve against")
        return ApproxEvaluator(model, library, codes).encoded(assignment)
    h = hidden_activations(model, codes)
    out = np.empty((h.shape[0], model.n_classes), dtype=np.int64)
    for j, row in enumerate(model.w2):
        out[:, j] = 2 * _popcount_inputs(row, h).sum(axis=1) + int((row == 0).sum())
    return out


def true_outputs(model: TnnModel, codes: np.ndarray) -> np.ndarray:
    """Ternary dot products of the output layer over +-1 hidden activations."""
    s = 2 * hidden_activations(model, codes) - 1
    return s @ model.w2.T


def predict(model: TnnModel, codes: np.ndarray, assignment: ComponentAssignment | None = None,
            library: "ComponentLibrary | None" = None) -> np.ndarray:
    # argmax keeps the first maximum, i.e. ties resolve to the lowest class index
    return np.argmax(encoded_outputs(model, codes, assignment, library), axis=1)


def infer_exact(model: TnnModel, sample: Sequence[int]) -> int:
    return int(predict(model, np.asarray([sample]))[0])


def infer_approx(model: TnnModel, assignment: ComponentAssignment, library: "ComponentLibrary",
                 sample: Sequence[int]) -> int:
    return int(predict(model, np.asarray([sample]), assignment, library)[0])


def accuracy(model: TnnModel, split: Split, assignment: ComponentAssignment | None = None,
             library: "ComponentLibrary | None" = None) -> float:
    if len(split.labels) == 0:
        raise ContractViolation("accuracy of an empty split is undefined")
    return float(np.mean(predict(model, split.codes, assignment, library) == split.labels))


def confidence_margin(model: TnnModel, split: Split, assignment: ComponentAssignment | None = None,
                      library: "ComponentLibrary | None" = None) -> int:
    """Smallest gap between the two largest encoded outputs over the split."""
    if model.n_classes < 2:
        raise ContractViolation("a confidence margin needs at least two classes")
    if len(split.labels) == 0:
        raise ContractViolation("confidence margin of an empty split is undefined")
    out = np.sort(encoded_outputs(model, split.codes, assignment, library), axis=1)
    return int((out[:, -1] - out[:, -2]).min())


@dataclass
class TrainParams:
    epochs: int = 30
    batch_size: int = 32
    learning_rates: tuple[float, ...] = (0.001, 0.003, 0.01)
    patience: int = 5
    delta_factor: float = 0.7
    seed: int = 0
    restarts: int = 1

    def __post_init__(self):
        if not 1 <= self.epochs <= 30:
            raise ContractViolation(f"epochs must be in 1..30, got {self.epochs}")
        if self.restarts < 1:
            raise ContractViolation(f"restarts must be >= 1, got {self.restarts}")
        self.learning_rates = tuple(self.learning_rates)


def ternarize(w: np.ndarray, delta_factor: float = 0.7) -> np.ndarray:
    """Entries above ``delta_factor * mean|w|`` in magnitude keep their sign, the rest become 0."""
    delta = delta_factor * np.abs(w).mean()
    return np.where(np.abs(w) > delta, np.sign(w), 0.0)


def _ensure_nonzero_rows(t: np.ndarray, w: np.ndarray) -> np.ndarray:
    t = t.copy()
    for i in np.flatnonzero(~t.any(axis=1)):
        j = int(np.argmax(np.abs(w[i])))
        t[i, j] = 1.0 if w[i, j] >= 0 else -1.0
    return t


class _Adam:
    def __init__(self, shapes, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _freeze(w1: np.ndarray, w2: np.ndarray, params: TrainParams, k: int) -> TnnModel:
    t1 = _ensure_nonzero_rows(ternarize(w1, params.delta_factor), w1)
    t2 = _ensure_nonzero_rows(ternarize(w2, params.delta_factor), w2)
    return TnnModel(k, t1.astype(np.int64), t2.astype(np.int64))


def _train_once(fit: Split, held_out: Split, n_classes: int, k: int, m: int, lr: float,
                params: TrainParams, rng: np.random.Generator) -> tuple[TnnModel, tuple[float, float]]:
    """Best checkpoint by held-out accuracy, ties broken by accuracy on the fit slice."""
    n = fit.codes.shape[1]
    x_all = fit.codes / (2 ** k - 1)
    onehot = np.eye(n_classes)[fit.labels]
    w1 = rng.normal(0.0, 0.5, size=(m, n))
    w2 = rng.normal(0.0, 0.5, size=(n_classes, m))
    adam = _Adam([w1.shape, w2.shape], lr)
    in_scale = 1.0 / np.sqrt(max(n, 1))
    out_scale = 2.0 / np.sqrt(m)

    best = _freeze(w1, w2, params, k)
    best_score = (accuracy(best, held_out), accuracy(best, fit))
    stale = 0
    for epoch in range(params.epochs):
        order = rng.permutation(len(x_all))
        for start in range(0, len(order), params.batch_size):
            batch = order[start:start + params.batch_size]
            x, target = x_all[batch], onehot[batch]
            t1 = _ensure_nonzero_rows(ternarize(w1, params.delta_factor), w1)
            t2 = _ensure_nonzero_rows(ternarize(w2, params.delta_factor), w2)
            pre = x @ t1.T
            s = np.where(pre >= 0, 1.0, -1.0)
            logits = (s @ t2.T) * out_scale
            logits -= logits.max(axis=1, keepdims=True)
            prob = np.exp(logits)
            prob /= prob.sum(axis=1, keepdims=True)
            d_logits = (prob - target) / len(batch) * out_scale
            g2 = d_logits.T @ s
            d_s = d_logits @ t2
            # sign STE: pass the gradient where the scaled pre-activation is inside [-1, 1]
            d_pre = d_s * (np.abs(pre * in_scale) <= 1.0) * in_scale
            g1 = d_pre.T @ x
            # weight STE: no gradient for shadow weights that left [-1, 1]
            g1[np.abs(w1) > 1] = 0.0
            g2[np.abs(w2) > 1] = 0.0
            adam.step([w1, w2], [g1, g2])
        if not (np.isfinite(w1).all() and np.isfinite(w2).all()):
            logger.warning("[Train] diverged at epoch %d (lr=%g); keeping best checkpoint", epoch, lr)
            break
        candidate = _freeze(w1, w2, params, k)
        score = (accuracy(candidate, held_out), accuracy(candidate, fit))
        if score > best_score:
            best, best_score, stale = candidate, score, 0
        else:
            stale += 1
            if stale >= params.patience:
                break
    return best, best_score


def train(dataset: Dataset, k: int, m: int, params: TrainParams | None = None) -> TnnModel:
    """STE training of a ternary network; learning rate and restart are picked on the eval slice."""
    params = params or TrainParams()
    if not 1 <= m <= 50:
        raise ContractViolation(f"hidden size must be in 1..50, got {m}")
    fit = dataset.split("fit", k)
    held_out = dataset.split("eval", k)
    if len(held_out.labels) == 0:
        held_out = fit
    best, best_score, best_lr = None, (-1.0, -1.0), None
    for index, lr in enumerate(params.learning_rates):
        for restart in range(params.restarts):
            rng = np.random.default_rng([params.seed, m, k, index, restart])
            model, score = _train_once(fit, held_out, dataset.n_classes, k, m, lr, params, rng)
            logger.debug("[Train] k=%d m=%d lr=%g restart=%d eval/fit accuracy %.4f/%.4f",
                         k, m, lr, restart, *score)
            if score > best_score:
                best, best_score, best_lr = model, score, lr
    best.feature_min, best.feature_max = dataset.feature_min, dataset.feature_max
    best.classes = list(dataset.classes)
    best.meta = {"dataset": dataset.name, "lr": best_lr, "eval_accuracy": best_score[0],
                 "fit_accuracy": best_score[1], "seed": params.seed, "epochs": params.epochs}
    logger.info("[Train] %s k=%d m=%d: eval accuracy %.4f (lr=%g)", dataset.name, k, m, best_score[0], best_lr)
    return best


DEFAULT_HIDDEN_GRID = (2, 4, 6, 8, 10, 15, 20, 30, 40, 50)


def select_hidden_size(dataset: Dataset, k: int, grid: Sequence[int] = DEFAULT_HIDDEN_GRID,
                       params: TrainParams | None = None, tolerance: float = 0.005) -> tuple[TnnModel, list[dict]]:
    """Smallest hidden size whose eval accuracy is within ``tolerance`` of the best on the grid."""
    if not grid:
        raise ContractViolation("hidden-size grid is empty")
    models = {m: train(dataset, k, m, params) for m in sorted(set(grid))}
    table = [{"m": m, "eval_accuracy": model.meta["eval_accuracy"]} for m, model in models.items()]
    best = max(row["eval_accuracy"] for row in table)
    chosen = min(row["m"] for row in table if row["eval_accuracy"] >= best - tolerance)
    logger.info("[Train] %s k=%d: hidden size %d selected (best eval accuracy %.4f)", dataset.name, k, chosen, best)
    return models[chosen], table
