"""Generation quality (FID) and continual-learning aggregates.

``MetricMatrix`` holds m(f^(t), T^(i)) for i <= t. Row and task indices are
0-based in storage; :func:`aq` takes the 1-based task count ``t`` so that
``aq(matrix, t)`` reads as AQ^(t).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from clog.domain import MetricDirection, TaskSpec
from clog.errors import InsufficientSamplesError, InvalidInputError, QualityError

NA = float("nan")


# -- Frechet distance -----------------------------------------------------------


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((matrix + matrix.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid_from_stats(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    Tr((S1 S2)^(1/2)) is evaluated as the sum of square roots of the
    eigenvalues of S1^(1/2) S2 S1^(1/2), which is symmetric PSD.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    sigma1, sigma2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    root1 = _sqrt_psd(sigma1)
    middle = root1 @ sigma2 @ root1
    eig = np.linalg.eigvalsh((middle + middle.T) / 2)
    tr_sqrt = float(np.sqrt(np.clip(eig, 0.0, None)).sum())
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_sqrt)


def feature_stats(features) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    return x.mean(axis=0), np.atleast_2d(np.cov(x, rowvar=False))


def fid(real_features, gen_features) -> float:
    real = np.asarray(real_features, dtype=np.float64)
    gen = np.asarray(gen_features, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1] or real.shape[1] < 1:
        raise InvalidInputError("feature sets must be n x d matrices with equal d >= 1")
    if len(real) < 2 or len(gen) < 2:
        raise InsufficientSamplesError("FID needs at least 2 samples per set")
    d = real.shape[1]
    if len(real) < d + 1 or len(gen) < d + 1:
        warnings.warn(f"fewer than d+1={d + 1} samples; covariance is singular", RuntimeWarning, stacklevel=2)
    return fid_from_stats(*feature_stats(real), *feature_stats(gen))


# -- feature extractor ----------------------------------------------------------


class RandomConvEmbedder(nn.Module):
    """Frozen randomly initialised conv net mapping images to ``dim`` features."""

    def __init__(self, channels: int = 1, dim: int = 64, seed: int = 0, width: int = 32):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.body = nn.Sequential(
                nn.Conv2d(channels, width, 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.AdaptiveAvgPool2d(2),
                nn.Flatten(),
                nn.Linear(8 * width, dim),
            )
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        self.extractor_id = f"randconv-c{channels}-d{dim}-s{seed}"
        self.dim = dim

    def forward(self, x):
        return self.body(x)

    def embed(self, images: torch.Tensor, batch_size: int = 1024) -> np.ndarray:
        with torch.no_grad():
            out = [self(images[i : i + batch_size].float()) for i in range(0, len(images), batch_size)]
        return torch.cat(out).double().numpy()


FeatureExtractor = RandomConvEmbedder


def quality(
    model_view,
    task: TaskSpec,
    reference_features: np.ndarray,
    n_gen: int,
    extractor: RandomConvEmbedder,
    generator: torch.Generator,
    steps: int | None = None,
    batch_size: int = 500,
) -> float:
    """FID between ``n_gen`` samples spread evenly over the task's classes and the reference set."""
    classes = torch.tensor(task.class_labels, dtype=torch.int64)
    labels = classes[torch.arange(n_gen) % len(classes)]
    chunks = []
    for i in range(0, n_gen, batch_size):
        images = model_view.sample(labels[i : i + batch_size], generator, steps)
        if not bool(torch.isfinite(images).all()):
            raise QualityError(f"non-finite pixels generated for task {task.task_index}")
        chunks.append(images)
    return fid(reference_features, extractor.embed(torch.cat(chunks)))


# -- metric matrix --------------------------------------------------------------


@dataclass
class MetricMatrix:
    num_tasks: int
    direction: MetricDirection = MetricDirection.LOWER_BETTER
    metric_id: str = "fid"
    extractor_id: str = ""
    values: np.ndarray = field(default=None)
    rows_filled: int = 0

    def __post_init__(self):
        if self.num_tasks < 1:
            raise InvalidInputError("a metric matrix needs at least one task")
        if self.values is None:
            self.values = np.full((self.num_tasks, self.num_tasks), NA)
        self.direction = MetricDirection(self.direction)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float | None]], direction=MetricDirection.LOWER_BETTER, **kw) -> "MetricMatrix":
        m = cls(len(rows), direction, **kw)
        for t, row in enumerate(rows):
            m.set_row(t, row)
        return m

    def set_row(self, t: int, row: Sequence[float | None]) -> None:
        if len(row) != t + 1:
            raise InvalidInputError(f"row {t} needs {t + 1} entries, got {len(row)}")
        if t != self.rows_filled:
            raise InvalidInputError(f"rows must be filled in order; next row is {self.rows_filled}")
        self.values[t, : t + 1] = [NA if v is None else float(v) for v in row]
        self.rows_filled += 1

    def row(self, t: int) -> np.ndarray:
        if not 0 <= t < self.rows_filled:
            raise InvalidInputError(f"row {t} is undefined")
        return self.values[t, : t + 1]

    @property
    def complete(self) -> bool:
        return self.rows_filled == self.num_tasks

    @property
    def na_mask(self) -> np.ndarray:
        mask = np.zeros_like(self.values, dtype=bool)
        for t in range(self.rows_filled):
            mask[t, : t + 1] = np.isnan(self.values[t, : t + 1])
        return mask

    def to_json(self) -> dict:
        flat, mask = [], []
        for t in range(self.rows_filled):
            for v in self.values[t, : t + 1]:
                na = bool(np.isnan(v))
                flat.append(None if na else float(v))
                mask.append(na)
        return {
            "T": self.num_tasks,
            "direction": self.direction.value,
            "metric_id": self.metric_id,
            "extractor_id": self.extractor_id,
            "values": flat,
            "na_mask": mask,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetricMatrix":
        m = cls(doc["T"], MetricDirection(doc["direction"]), doc.get("metric_id", "fid"), doc.get("extractor_id", ""))
        flat = doc["values"]
        mask = doc.get("na_mask") or [v is None for v in flat]
        pos = 0
        t = 0
        while pos < len(flat):
            row = [None if mask[pos + i] else flat[pos + i] for i in range(t + 1)]
            m.set_row(t, row)
            pos += t + 1
            t += 1
        return m


def aq(matrix: MetricMatrix, t: int) -> float:
    """Mean quality over tasks 1..t of the model after task t (``t`` is 1-based)."""
    if not 1 <= t <= matrix.num_tasks:
        raise InvalidInputError(f"t must lie in 1..{matrix.num_tasks}")
    return float(np.mean(matrix.row(t - 1)))


def aq_curve(matrix: MetricMatrix) -> list[float]:
    return [aq(matrix, t) for t in range(1, matrix.num_tasks + 1)]


def aiq(matrix: MetricMatrix) -> float:
    return float(np.mean(aq_curve(matrix)))


def afq(matrix: MetricMatrix) -> float:
    return aq(matrix, matrix.num_tasks)


def fr(matrix: MetricMatrix) -> float:
    """Mean change of each earlier task's quality between learning it and the end.

    Positive values mean forgetting in either metric direction.
    """
    T = matrix.num_tasks
    if T < 2:
        raise InvalidInputError("forgetting rate needs at least two tasks")
    final = matrix.row(T - 1)
    first = np.array([matrix.row(t)[t] for t in range(T - 1)])
    delta = final[: T - 1] - first
    if matrix.direction is MetricDirection.HIGHER_BETTER:
        delta = -delta
    return float(np.mean(delta))


# -- reports ----------------------------------------------------------------------


METRIC_NAMES = ("aiq", "afq", "fr")


@dataclass
class EvalReport:
    aq: list[float]
    aiq: float
    afq: float
    fr: float
    order_id: int | None = None
    per_order: dict[int, dict[str, float]] = field(default_factory=dict)
    mean_std: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.aq:
            _check_close(self.afq, self.aq[-1], "afq != aq[T]")
            _check_close(self.aiq, float(np.mean(self.aq)), "aiq != mean(aq)")

    @classmethod
    def from_matrix(cls, matrix: MetricMatrix, order_id: int | None = None) -> "EvalReport":
        curve = aq_curve(matrix)
        forgetting = fr(matrix) if matrix.num_tasks >= 2 else NA
        report = cls(curve, float(np.mean(curve)), curve[-1], forgetting, order_id)
        report.mean_std = {k: (getattr(report, k), 0.0) for k in METRIC_NAMES}
        if order_id is not None:
            report.per_order = {order_id: {k: getattr(report, k) for k in METRIC_NAMES}}
        return report

    def to_json(self) -> dict:
        return {
            "aq": [_json_float(v) for v in self.aq],
            "aiq": _json_float(self.aiq),
            "afq": _json_float(self.afq),
            "fr": _json_float(self.fr),
            "order_id": self.order_id,
            "per_order": {str(k): {m: _json_float(v) for m, v in d.items()} for k, d in self.per_order.items()},
            "mean_std": {k: [_json_float(m), _json_float(s)] for k, (m, s) in self.mean_std.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        f = lambda v: NA if v is None else float(v)  # noqa: E731
        report = cls([f(v) for v in doc["aq"]], f(doc["aiq"]), f(doc["afq"]), f(doc["fr"]), doc.get("order_id"))
        report.per_order = {int(k): {m: f(v) for m, v in d.items()} for k, d in doc.get("per_order", {}).items()}
        report.mean_std = {k: (f(m), f(s)) for k, (m, s) in doc.get("mean_std", {}).items()}
        return report


def _json_float(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def _check_close(a: float, b: float, message: str) -> None:
    if math.isnan(a) and math.isnan(b):
        return
    if not math.isclose(a, b, rel_tol=1e-12, abs_tol=1e-12):
        raise InvalidInputError(message)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    if len(arr) == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1))


def aggregate_orders(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean and sample standard deviation over class orders; NA poisons."""
    if not reports:
        raise InvalidInputError("no reports to aggregate")
    lengths = {len(r.aq) for r in reports}
    if len(lengths) != 1:
        raise InvalidInputError("reports cover different task counts")
    ordered = sorted(reports, key=lambda r: (r.order_id is None, r.order_id or 0))
    aq_mean = [float(np.mean([r.aq[i] for r in ordered])) for i in range(lengths.pop())]
    out = EvalReport(aq_mean, float(np.mean(aq_mean)), aq_mean[-1], float(np.mean([r.fr for r in ordered])))
    out.mean_std = {k: _mean_std([getattr(r, k) for r in ordered]) for k in METRIC_NAMES}
    for i, r in enumerate(ordered):
        key = r.order_id if r.order_id is not None else i + 1
        out.per_order[key] = {k: getattr(r, k) for k in METRIC_NAMES}
    return out


def format_mean_std(mean: float, std: float, digits: int = 2) -> str:
    """Render as ``12.34$^{\\pm 0.56}$`` (superscripted deviation), ``NA`` when undefined."""
    if math.isnan(mean):
        return "NA"
    return f"{mean:.{digits}f}$^{{\\pm {std:.{digits}f}}}$"
