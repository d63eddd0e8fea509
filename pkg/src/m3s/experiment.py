"""Split/train/evaluate runs and ablation grids over scale sets, weight modes
and fusion policies."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import replace

import numpy as np

from .gaf import encode_many
from .metrics import compute_metrics, confusion, count_flops, count_params
from .model import TrainConfig, train
from .spectra import Dataset, patient_of, split_dataset

log = logging.getLogger(__name__)

TABLE_SCALE_SETS = ([32], [64], [128], [32, 64], [32, 128], [64, 128])


class ImageCache:
    """GASF images of one dataset, encoded once per scale and looked up by id."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._index = {s.id: k for k, s in enumerate(dataset.samples)}
        if len(self._index) != len(dataset):
            raise ValueError("sample ids must be unique")
        self._stacks = {}

    def stack(self, scale):
        if scale not in self._stacks:
            self._stacks[scale] = encode_many(self.dataset.samples, scale)[:, None]
        return self._stacks[scale]

    def images(self, subset: Dataset, scales):
        idx = np.array([self._index[i] for i in subset.ids])
        return [self.stack(s)[idx] for s in scales]


def run_once(dataset: Dataset, config: TrainConfig, split_seed=None, cache=None, group_by_patient=False):
    """Split, train on the train side, evaluate on the test side.

    Returns ``(model, report)``; the report carries FLOPs and Params.
    """
    cache = cache or ImageCache(dataset)
    seed = config.seed if split_seed is None else split_seed
    train_set, test_set = split_dataset(dataset, config.train_fraction, seed,
                                        group_key=patient_of if group_by_patient else None)
    model = train(train_set, config, images=cache.images(train_set, config.scales))
    probs = model.predict_proba(cache.images(test_set, config.scales), test_set.histories())
    report = compute_metrics(confusion(probs.argmax(axis=1), test_set.labels()))
    report.params = count_params(model)
    report.flops = count_flops(model)
    return model, report


def ablation_grid(scale_sets=TABLE_SCALE_SETS, weight_modes=("fixed", "adaptive"), fusions=("masked",)):
    return [
        {"scales": list(s), "weights": w, "fusion": f}
        for s, w, f in itertools.product(scale_sets, weight_modes, fusions)
    ]


ABLATION_FIELDS = ["scales", "weights", "fusion", "seeds", "accuracy", "precision", "recall",
                   "specificity", "f1", "accuracy_std", "params", "flops"]


def run_ablation(dataset: Dataset, base: TrainConfig, cells, seeds=(1, 2, 3, 4, 5), progress=None):
    """Mean metrics over ``seeds`` for every grid cell; one dict per cell."""
    cache = ImageCache(dataset)
    rows = []
    for cell in cells:
        scales = cell["scales"]
        config = replace(base, scales=scales, kernel_sizes=cell.get("kernel_sizes"),
                         weights=cell.get("weights", base.weights), fusion=cell.get("fusion", base.fusion))
        reports = []
        for seed in seeds:
            _, report = run_once(dataset, replace(config, seed=seed), cache=cache)
            reports.append(report)
            if progress is not None:
                progress(cell, seed, report)
        acc = [r.accuracy for r in reports]
        rows.append({
            "scales": "+".join(str(s) for s in scales),
            "weights": config.weights,
            "fusion": config.fusion,
            "seeds": " ".join(str(s) for s in seeds),
            "accuracy": float(np.mean(acc)),
            "precision": float(np.mean([r.precision for r in reports])),
            "recall": float(np.mean([r.recall for r in reports])),
            "specificity": float(np.mean([r.specificity for r in reports])),
            "f1": float(np.mean([r.f1 for r in reports])),
            "accuracy_std": float(np.std(acc)),
            "params": reports[0].params,
            "flops": reports[0].flops,
        })
    return rows


def write_rows(rows, path, fields=ABLATION_FIELDS):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
