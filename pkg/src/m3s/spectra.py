"""Spectral data model, file ingestion, splitting, preprocessing and a
synthetic Gaussian-peak generator.

History flags always use the order ``PCI, EH, DM, ACI, SM``; class indices
always follow ``AMI, CAD, AF, CON``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    ConstantSequence,
    EmptyInput,
    EmptySplit,
    InvalidConfig,
    InvalidGroups,
    NonFinite,
    ParseError,
    SchemaError,
)

DEFAULT_LENGTH = 1024


class Subtype(IntEnum):
    AMI = 0
    CAD = 1
    AF = 2
    CON = 3


N_CLASSES = len(Subtype)
HISTORY_FLAGS = ("PCI", "EH", "DM", "ACI", "SM")
N_FLAGS = len(HISTORY_FLAGS)


def parse_label(text):
    """Map a label string to a Subtype; ``NA`` or empty means unlabeled."""
    text = str(text).strip().upper()
    if text in ("", "NA"):
        return None
    try:
        return Subtype[text]
    except KeyError:
        raise ValueError(f"unknown label {text!r}") from None


@dataclass(frozen=True)
class RamanSpectrum:
    id: str
    values: np.ndarray
    label: Subtype | None = None
    history: tuple = (False,) * N_FLAGS

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise SchemaError(f"spectrum {self.id!r}: values must be one-dimensional")
        if not np.all(np.isfinite(values)):
            raise NonFinite(f"spectrum {self.id!r} contains NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        history = tuple(bool(h) for h in self.history)
        if len(history) != N_FLAGS:
            raise SchemaError(f"spectrum {self.id!r}: history needs {N_FLAGS} flags, got {len(history)}")
        object.__setattr__(self, "history", history)
        if self.label is not None:
            object.__setattr__(self, "label", Subtype(self.label))


@dataclass
class Dataset:
    samples: list
    source: str = ""
    seed: int | None = None

    def __post_init__(self):
        if not self.samples:
            raise EmptyInput("dataset has no samples")
        lengths = {len(s.values) for s in self.samples}
        if len(lengths) != 1:
            raise SchemaError(f"samples have differing lengths {sorted(lengths)}")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def length(self):
        return len(self.samples[0].values)

    @property
    def ids(self):
        return [s.id for s in self.samples]

    def labels(self):
        return np.array([-1 if s.label is None else int(s.label) for s in self.samples])

    def histories(self):
        return np.array([s.history for s in self.samples], dtype=bool).reshape(len(self), N_FLAGS)

    def values(self):
        return np.stack([s.values for s in self.samples])


# ---------------------------------------------------------------- preprocessing

def rescale(seq):
    """Linearly map ``seq`` onto [-1, 1] so that min -> -1 and max -> +1."""
    x = np.asarray(seq, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("rescale needs a 1-D sequence of length >= 2")
    if not np.all(np.isfinite(x)):
        raise NonFinite("sequence contains NaN or Inf")
    hi, lo = x.max(), x.min()
    if hi == lo:
        raise ConstantSequence("cannot rescale a constant sequence")
    out = ((x - hi) + (x - lo)) / (hi - lo)
    # guard the endpoints against rounding so they are attained exactly
    out[x == hi] = 1.0
    out[x == lo] = -1.0
    return np.clip(out, -1.0, 1.0)


def paa(seq, groups):
    """Piecewise aggregate approximation: block means over ``groups`` segments.

    Block ``b`` covers ``[floor(b*L/groups), floor((b+1)*L/groups))``.
    """
    x = np.asarray(seq, dtype=np.float64)
    n = x.shape[-1]
    if isinstance(groups, bool) or int(groups) != groups or groups < 1 or groups > n:
        raise InvalidGroups(f"groups must be in [1, {n}], got {groups}")
    groups = int(groups)
    if n % groups == 0:
        return x.reshape(x.shape[:-1] + (groups, n // groups)).mean(axis=-1)
    bounds = (np.arange(groups + 1) * n) // groups
    return np.stack([x[..., a:b].mean(axis=-1) for a, b in zip(bounds[:-1], bounds[1:])], axis=-1)


# ---------------------------------------------------------------------- file io

def _csv_header(length):
    return ["id", "label"] + [f.lower() for f in HISTORY_FLAGS] + [f"v{k}" for k in range(length)]


def _parse_flag(text, row):
    text = str(text).strip()
    if text not in ("0", "1"):
        raise ParseError(f"history flag must be 0 or 1, got {text!r}", row)
    return text == "1"


def _load_csv(path, length):
    samples = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyInput(f"{path} is empty") from None
        expected = _csv_header(length)
        if len(header) != len(expected):
            raise SchemaError(f"header has {len(header)} columns, expected {len(expected)}", 0)
        if [h.strip().lower() for h in header[:7]] != expected[:7]:
            raise SchemaError(f"header must start with {','.join(expected[:7])}", 0)
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(expected):
                raise SchemaError(f"{len(row)} columns, expected {len(expected)}", row_no)
            try:
                label = parse_label(row[1])
            except ValueError as exc:
                raise ParseError(str(exc), row_no) from None
            history = tuple(_parse_flag(v, row_no) for v in row[2:7])
            try:
                values = np.array([float(v) for v in row[7:]])
            except ValueError as exc:
                raise ParseError(f"bad intensity value ({exc})", row_no) from None
            if not np.all(np.isfinite(values)):
                raise ParseError("intensity values must be finite", row_no)
            samples.append(RamanSpectrum(row[0], values, label, history))
    return samples


def _load_json(path, length):
    try:
        records = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON ({exc})") from None
    if not isinstance(records, list):
        raise SchemaError("top level must be an array of records")
    samples = []
    for row_no, rec in enumerate(records, start=1):
        if not isinstance(rec, dict) or not {"id", "label", "history", "values"} <= rec.keys():
            raise SchemaError("record needs id, label, history and values", row_no)
        values, history = rec["values"], rec["history"]
        if not isinstance(values, list) or len(values) != length:
            raise SchemaError(f"values must hold {length} numbers", row_no)
        if not isinstance(history, list) or len(history) != N_FLAGS:
            raise SchemaError(f"history must hold {N_FLAGS} flags", row_no)
        try:
            label = parse_label("NA" if rec["label"] is None else rec["label"])
        except ValueError as exc:
            raise ParseError(str(exc), row_no) from None
        try:
            arr = np.array(values, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError("values must be numbers", row_no) from None
        if not np.all(np.isfinite(arr)):
            raise ParseError("intensity values must be finite", row_no)
        flags = tuple(_parse_flag(h, row_no) for h in history)
        samples.append(RamanSpectrum(str(rec["id"]), arr, label, flags))
    return samples


def load_dataset(path, format=None, length=DEFAULT_LENGTH):
    """Read a CSV or JSON spectrum file; ``format`` defaults to the suffix."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        samples = _load_csv(path, length)
    elif fmt == "json":
        samples = _load_json(path, length)
    else:
        raise ParseError(f"unsupported format {fmt!r}")
    return Dataset(samples, source=str(path))


def save_dataset(dataset, path, format=None):
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(_csv_header(dataset.length))
            for s in dataset:
                label = "NA" if s.label is None else s.label.name
                writer.writerow([s.id, label] + [int(h) for h in s.history] + [repr(float(v)) for v in s.values])
    elif fmt == "json":
        records = [
            {
                "id": s.id,
                "label": "NA" if s.label is None else s.label.name,
                "history": [int(h) for h in s.history],
                "values": [float(v) for v in s.values],
            }
            for s in dataset
        ]
        path.write_text(json.dumps(records))
    else:
        raise ParseError(f"unsupported format {fmt!r}")


# -------------------------------------------------------------------- splitting

def patient_of(sample_id):
    """Patient key of a spectrum id: the part before the last ``-``.

    ``P07-3`` and ``P07-4`` belong to patient ``P07``; ids without a dash are
    their own patient.
    """
    head, sep, _ = sample_id.rpartition("-")
    return head if sep else sample_id


def split_dataset(d: Dataset, train_fraction: float, seed: int,
                  group_key: Callable[[str], str] | None = None):
    """Deterministically shuffle and split into (train, test).

    The train side receives ``ceil(train_fraction * N)`` records. With
    ``group_key`` whole groups move together and the train side takes
    shuffled groups until it holds at least that many records.
    """
    if not 0.0 < train_fraction < 1.0:
        raise InvalidConfig("must lie strictly between 0 and 1", "train_fraction")
    n = len(d)
    n_train = math.ceil(round(train_fraction * n, 9))
    rng = np.random.default_rng(seed)
    if group_key is None:
        order = rng.permutation(n)
        train_idx, test_idx = order[:n_train], order[n_train:]
    else:
        groups = {}
        for k, s in enumerate(d.samples):
            groups.setdefault(group_key(s.id), []).append(k)
        keys = list(groups)
        train_idx, test_idx = [], []
        for g in rng.permutation(len(keys)):
            target = train_idx if len(train_idx) < n_train else test_idx
            target.extend(groups[keys[g]])
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise EmptySplit(f"split of {n} samples at {train_fraction} leaves one side empty")
    pick = lambda idx: Dataset([d.samples[k] for k in idx], source=d.source, seed=seed)
    return pick(train_idx), pick(test_idx)


# -------------------------------------------------------------------- synthesis

def _default_templates():
    return {
        "AMI": [[350.0, 12.0, 0.6]],
        "CAD": [[450.0, 12.0, 0.6]],
        "AF": [[650.0, 12.0, 0.6]],
        "CON": [[900.0, 12.0, 0.6]],
    }


def _default_history():
    #        PCI   EH    DM    ACI   SM
    return {
        "AMI": [0.60, 0.50, 0.30, 0.10, 0.60],
        "CAD": [0.40, 0.60, 0.40, 0.10, 0.40],
        "AF": [0.05, 0.50, 0.20, 0.30, 0.20],
        "CON": [0.02, 0.10, 0.05, 0.00, 0.15],
    }


@dataclass
class SynthConfig:
    """Recipe for a synthetic labeled spectrum set.

    Every spectrum is ``shared_peaks + templates[label]`` evaluated as Gaussians
    ``amplitude * exp(-(x - center)^2 / (2 width^2))`` on ``x = 0..length-1``,
    each peak amplitude scaled by ``1 + N(0, amplitude_jitter^2)``, plus white
    noise of standard deviation ``noise``. History flags are independent
    Bernoulli draws with ``history[label][flag]`` success probability.
    """

    counts: dict = field(default_factory=lambda: {name: 100 for name in Subtype.__members__})
    templates: dict = field(default_factory=_default_templates)
    shared_peaks: list = field(default_factory=lambda: [[200.0, 30.0, 1.0], [520.0, 40.0, 0.8], [780.0, 25.0, 0.7]])
    history: dict = field(default_factory=_default_history)
    noise: float = 0.05
    amplitude_jitter: float = 0.05
    length: int = DEFAULT_LENGTH

    def validate(self):
        if not isinstance(self.length, int) or self.length < 2:
            raise InvalidConfig("must be an integer >= 2", "length")
        if not (self.noise >= 0):
            raise InvalidConfig(f"noise standard deviation must be >= 0, got {self.noise}", "noise")
        if not (self.amplitude_jitter >= 0):
            raise InvalidConfig("must be >= 0", "amplitude_jitter")
        if not self.counts:
            raise InvalidConfig("at least one class is required", "counts")
        for name, count in self.counts.items():
            if name not in Subtype.__members__:
                raise InvalidConfig(f"unknown class {name!r}", "counts")
            if not isinstance(count, int) or count < 1:
                raise InvalidConfig(f"count for {name} must be an integer >= 1", "counts")
            probs = self.history.get(name)
            if probs is None or len(probs) != N_FLAGS:
                raise InvalidConfig(f"{name} needs {N_FLAGS} probabilities", "history")
            if any(not (0.0 <= p <= 1.0) for p in probs):
                raise InvalidConfig(f"{name} probabilities must lie in [0, 1]", "history")
        for group, peaks in [("shared_peaks", self.shared_peaks)] + [
            (f"templates.{k}", v) for k, v in self.templates.items()
        ]:
            for peak in peaks:
                if len(peak) != 3 or peak[1] <= 0:
                    raise InvalidConfig("peaks are [center, width>0, amplitude]", group)
        return self

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown keys {sorted(unknown)}", "synth_config")
        return cls(**data).validate()

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"invalid JSON ({exc})", "synth_config") from None
        return cls.from_dict(data)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def class_prior(self):
        total = sum(self.counts.values())
        return {name: n / total for name, n in self.counts.items()}


def _peaks(grid, peaks, scale):
    out = np.zeros_like(grid)
    for (center, width, amp), s in zip(peaks, scale):
        out += amp * s * np.exp(-((grid - center) ** 2) / (2.0 * width ** 2))
    return out


def synth_generate(config: SynthConfig, seed: int) -> Dataset:
    """Draw a labeled dataset from ``config``; bitwise-reproducible per seed."""
    config.validate()
    rng = np.random.default_rng(seed)
    grid = np.arange(config.length, dtype=np.float64)
    samples = []
    for name in Subtype.__members__:
        count = config.counts.get(name, 0)
        peaks = list(config.shared_peaks) + list(config.templates.get(name, []))
        probs = np.asarray(config.history[name], dtype=np.float64) if count else None
        for k in range(count):
            scale = 1.0 + config.amplitude_jitter * rng.standard_normal(len(peaks))
            values = _peaks(grid, peaks, scale)
            values = values + config.noise * rng.standard_normal(config.length)
            flags = tuple(bool(f) for f in rng.random(N_FLAGS) < probs)
            samples.append(RamanSpectrum(f"{name}{k:04d}", values, Subtype[name], flags))
    return Dataset(samples, source=f"synth(seed={seed})", seed=seed)


def shared_template_config(per_class=100, **overrides):
    """AMI and CAD share one spectral template but never share PCI/EH flags.

    Spectra alone cannot tell the pair apart; the history flags can.
    """
    templates = _default_templates()
    templates["CAD"] = [list(p) for p in templates["AMI"]]
    history = _default_history()
    history["AMI"] = [1.0, 0.0, 0.30, 0.10, 0.60]
    history["CAD"] = [0.0, 1.0, 0.40, 0.10, 0.40]
    history["AF"] = [0.0, 0.20, 0.20, 0.30, 0.20]
    history["CON"] = [0.0, 0.10, 0.05, 0.00, 0.15]
    data = dict(counts={name: per_class for name in Subtype.__members__}, templates=templates, history=history)
    data.update(overrides)
    return SynthConfig(**data).validate()
