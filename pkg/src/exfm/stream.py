"""Synthetic drifting CTR streams, streaming metrics and the one-pass trainer.

Streams are stored column-wise (:class:`Stream`) so training can run on
mini-batches; :meth:`Stream.examples` yields the per-impression view.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.stats import rankdata

from .distill import AHConfig, DistillMode, StudentAdapter, vm_train_step
from .errors import DegenerateWindow
from .models import VMArch, forward
from .numerics import seeded_rng, sigmoid

DAY_MS = 86_400_000
PRED_CLIP = 1e-9

TRACE_HEADER = [
    "step",
    "examples_seen",
    "traffic_id",
    "mode",
    "ne",
    "auc",
    "logloss",
    "calibration",
    "ne_gain_pct",
]


@dataclass(frozen=True)
class Example:
    id: int
    features: np.ndarray
    label: int
    timestamp: int
    traffic_id: int
    domain_id: int


@dataclass
class Stream:
    ids: np.ndarray
    timestamps: np.ndarray
    traffic_ids: np.ndarray
    domain_ids: np.ndarray
    labels: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def days(self) -> np.ndarray:
        """Zero-based day index of each impression."""
        return self.timestamps // DAY_MS

    def take(self, idx) -> "Stream":
        return Stream(
            self.ids[idx],
            self.timestamps[idx],
            self.traffic_ids[idx],
            self.domain_ids[idx],
            self.labels[idx],
            self.features[idx],
        )

    def examples(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield Example(
                int(self.ids[i]),
                self.features[i],
                int(self.labels[i]),
                int(self.timestamps[i]),
                int(self.traffic_ids[i]),
                int(self.domain_ids[i]),
            )

    @classmethod
    def empty(cls, feature_dim: int) -> "Stream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, np.zeros((0, feature_dim)))

    @classmethod
    def concat(cls, streams: Sequence["Stream"]) -> "Stream":
        """Merge streams into one ordered by timestamp (stable, ties by id)."""
        parts = [s for s in streams if len(s)]
        if not parts:
            return streams[0] if streams else cls.empty(0)
        merged = cls(
            *(np.concatenate([getattr(s, f) for s in parts]) for f in _FIELDS)
        )
        order = np.lexsort((merged.ids, merged.timestamps))
        return merged.take(order)


_FIELDS = ("ids", "timestamps", "traffic_ids", "domain_ids", "labels", "features")


# ---------------------------------------------------------------------------
# Generation


@dataclass(frozen=True)
class DriftGenConfig:
    feature_dim: int = 16
    n_traffics: int = 3
    rho: float = 0.9
    innovation: float = 0.3
    weight_scale: float = 2.0
    domain_offset_scale: float = 1.0
    domain_bias_scale: float = 0.0
    churn: float = 0.2
    base_logit: float = -1.2
    examples_per_day: int = 2000
    n_days: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rho <= 1:
            raise ValueError("rho must be in (0, 1]")
        if not 0 <= self.churn <= 1:
            raise ValueError("churn must be in [0, 1]")
        if self.feature_dim < 1 or self.n_traffics < 1 or self.n_days < 1:
            raise ValueError("dimensions must be positive")


def weight_path(cfg: DriftGenConfig, rng: np.random.Generator) -> np.ndarray:
    """Shared ground-truth weights for each day, shape ``(n_days, feature_dim)``.

    AR(1) in the weights, then a fraction ``churn`` of coordinates is redrawn
    from the stationary distribution at every day boundary.
    """
    F = cfg.feature_dim
    sd = cfg.weight_scale / math.sqrt(F)
    w = rng.standard_normal(F) * sd
    out = np.empty((cfg.n_days, F))
    n_churn = int(round(cfg.churn * F))
    for day in range(cfg.n_days):
        if day > 0:
            w = cfg.rho * w + cfg.innovation * sd * rng.standard_normal(F)
            if n_churn:
                idx = rng.choice(F, size=n_churn, replace=False)
                w[idx] = rng.standard_normal(n_churn) * sd
        out[day] = w
    return out


def generate_stream(cfg: DriftGenConfig) -> list[Stream]:
    """One time-ordered stream per traffic; traffic ``i`` is domain ``i``.

    Labels on day ``t`` are Bernoulli with logit
    ``base + bias_domain + (w(t) + offset_domain) . x``. Example ids are unique across all
    traffics.
    """
    rng = seeded_rng(cfg.seed)
    F = cfg.feature_dim
    path = weight_path(cfg, rng)
    offsets = rng.standard_normal((cfg.n_traffics, F)) * (
        cfg.domain_offset_scale / math.sqrt(F)
    )
    biases = np.zeros(cfg.n_traffics)
    if cfg.domain_bias_scale:
        biases = rng.standard_normal(cfg.n_traffics) * cfg.domain_bias_scale
    n = cfg.examples_per_day
    streams = []
    for traffic in range(cfg.n_traffics):
        ts = []
        xs = []
        ys = []
        for day in range(cfg.n_days):
            t = np.sort(rng.integers(0, DAY_MS, size=n)) + day * DAY_MS
            X = rng.standard_normal((n, F))
            logit = cfg.base_logit + biases[traffic] + X @ (path[day] + offsets[traffic])
            y = (rng.random(n) < sigmoid(logit)).astype(np.int64)
            ts.append(t)
            xs.append(X)
            ys.append(y)
        total = n * cfg.n_days
        ids = np.arange(total, dtype=np.int64) + traffic * total
        tid = np.full(total, traffic, dtype=np.int64)
        streams.append(
            Stream(ids, np.concatenate(ts), tid, tid.copy(), np.concatenate(ys), np.vstack(xs))
        )
    return streams


def dump_stream(stream: Stream, fh) -> None:
    """Write ``id,timestamp,traffic_id,domain_id,label,f1,...,fn`` lines."""
    writer = csv.writer(fh, lineterminator="\n")
    F = stream.features.shape[1]
    writer.writerow(["id", "timestamp", "traffic_id", "domain_id", "label"] + [f"f{j + 1}" for j in range(F)])
    for i in range(len(stream)):
        writer.writerow(
            [int(stream.ids[i]), int(stream.timestamps[i]), int(stream.traffic_ids[i]),
             int(stream.domain_ids[i]), int(stream.labels[i])]
            + [repr(float(v)) for v in stream.features[i]]
        )


def load_stream(fh) -> Stream:
    """Inverse of :func:`dump_stream`; a header line is optional."""
    rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][0] == "id":
        rows = rows[1:]
    if not rows:
        return Stream.empty(0)
    ints = np.array([[int(v) for v in r[:5]] for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[5:]] for r in rows], dtype=np.float64)
    if np.any(np.diff(ints[:, 1]) < 0):
        raise ValueError("stream timestamps must be nondecreasing")
    if not np.isin(ints[:, 4], (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return Stream(ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3], ints[:, 4], feats)


# ---------------------------------------------------------------------------
# Metrics


@dataclass
class MetricsWindow:
    """Accumulates predictions for progressive-validation metrics."""

    logloss_sum: float = 0.0
    positives: int = 0
    total: int = 0
    pred_sum: float = 0.0
    scores: list = field(default_factory=list)
    labels: list = field(default_factory=list)

    def add(self, preds, labels) -> None:
        p = np.clip(np.atleast_1d(np.asarray(preds, dtype=np.float64)), PRED_CLIP, 1 - PRED_CLIP)
        y = np.atleast_1d(np.asarray(labels, dtype=np.float64))
        self.logloss_sum += float(-np.sum(y * np.log(p) + (1 - y) * np.log1p(-p)))
        self.positives += int(y.sum())
        self.total += len(y)
        self.pred_sum += float(p.sum())
        self.scores.append(p)
        self.labels.append(y)

    def merge(self, other: "MetricsWindow") -> None:
        self.logloss_sum += other.logloss_sum
        self.positives += other.positives
        self.total += other.total
        self.pred_sum += other.pred_sum
        self.scores.extend(other.scores)
        self.labels.extend(other.labels)

    @property
    def ctr(self) -> float:
        return self.positives / self.total

    def _require_both(self):
        if self.total == 0 or self.positives in (0, self.total):
            raise DegenerateWindow("window needs both positive and negative labels")


def logloss(window: MetricsWindow) -> float:
    if window.total == 0:
        raise DegenerateWindow("empty window")
    return window.logloss_sum / window.total


def ne(window: MetricsWindow) -> float:
    window._require_both()
    p = window.ctr
    entropy = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    return logloss(window) / entropy


def auc(window: MetricsWindow) -> float:
    """Mann-Whitney statistic; tied scores count one half."""
    window._require_both()
    s = np.concatenate(window.scores)
    y = np.concatenate(window.labels).astype(bool)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def calibration(window: MetricsWindow) -> float:
    if window.positives == 0:
        raise DegenerateWindow("calibration needs at least one positive")
    return window.pred_sum / window.positives


def ne_gain_pct(candidate_ne: float, baseline_ne: float) -> float:
    if baseline_ne <= 0:
        raise ValueError("baseline NE must be positive")
    return 100.0 * (baseline_ne - candidate_ne) / baseline_ne


# ---------------------------------------------------------------------------
# Progressive-validation training


@dataclass
class TraceRow:
    step: int
    examples_seen: int
    traffic_id: int
    mode: str
    ne: float
    auc: float
    logloss: float
    calibration: float
    ne_gain_pct: float | None = None

    def as_list(self) -> list:
        gain = "" if self.ne_gain_pct is None else _fmt(self.ne_gain_pct)
        return [self.step, self.examples_seen, self.traffic_id, self.mode,
                _fmt(self.ne), _fmt(self.auc), _fmt(self.logloss), _fmt(self.calibration), gain]


def _fmt(v: float) -> str:
    return "nan" if v is None or not math.isfinite(v) else f"{v:.10g}"


def _safe(fn, window) -> float:
    try:
        return fn(window)
    except DegenerateWindow:
        return float("nan")


@dataclass
class StreamingResult:
    vm: VMArch
    sa: StudentAdapter | None
    trace: list[TraceRow]
    windows: dict[int, MetricsWindow]  # per-day progressive windows
    order: list[tuple[str, int]] = field(default_factory=list)

    def window(self, days: Iterable[int] | None = None) -> MetricsWindow:
        out = MetricsWindow()
        for day, w in sorted(self.windows.items()):
            if days is None or day in days:
                out.merge(w)
        return out


def run_streaming_eval(
    vm: VMArch,
    sa: StudentAdapter | None,
    stream: Stream,
    mode,
    cfg: AHConfig,
    lr: float,
    y_f: np.ndarray | None = None,
    batch_size: int = 1,
    sa_lr: float | None = None,
    sa_warmup: int = 100,
    trace_every: int = 1,
    train_days: Iterable[int] | None = None,
    record_order: bool = False,
) -> StreamingResult:
    """Score-then-train over a time-ordered stream, one pass.

    Each mini-batch is scored by the current VM before the VM takes one
    training step on it. ``y_f`` holds the teacher pseudo-label per example
    (NaN where missing). Examples on days outside ``train_days`` are scored
    but not trained on. The trace holds cumulative metrics every
    ``trace_every`` steps and at the end.
    """
    mode = DistillMode.parse(mode)
    traffic = int(stream.traffic_ids[0]) if len(stream) else -1
    window = MetricsWindow()
    days_w: dict[int, MetricsWindow] = {}
    trace: list[TraceRow] = []
    order: list[tuple[str, int]] = []
    train_days = None if train_days is None else set(train_days)
    days = stream.days
    n = len(stream)
    step = 0
    for start in range(0, n, batch_size):
        sl = slice(start, min(start + batch_size, n))
        X = stream.features[sl]
        y = stream.labels[sl]
        p = sigmoid(np.atleast_1d(forward(vm, X).y_s))
        window.add(p, y)
        for day in np.unique(days[sl]):
            m = days[sl] == day
            days_w.setdefault(int(day), MetricsWindow()).add(p[m], y[m])
        if record_order:
            order.extend(("score", int(i)) for i in stream.ids[sl])
        if train_days is None:
            keep = slice(None)
        else:
            keep = np.isin(days[sl], list(train_days))
        yf = None if y_f is None else y_f[sl][keep]
        if np.size(y[keep]):
            vm, sa, _ = vm_train_step(
                vm, sa, X[keep], y[keep], yf, mode, cfg, lr, sa_lr=sa_lr, sa_warmup=sa_warmup
            )
            if record_order:
                order.extend(("train", int(i)) for i in stream.ids[sl][keep])
        step += 1
        if step % trace_every == 0 or sl.stop == n:
            trace.append(
                TraceRow(step, window.total, traffic, mode.value, _safe(ne, window),
                         _safe(auc, window), _safe(logloss, window), _safe(calibration, window))
            )
    return StreamingResult(vm, sa, trace, days_w, order)


def attach_gain(trace: list[TraceRow], baseline: list[TraceRow]) -> None:
    """Fill ``ne_gain_pct`` against a baseline trace aligned by step."""
    base = {r.step: r.ne for r in baseline}
    for row in trace:
        b = base.get(row.step)
        if b is not None and math.isfinite(b) and b > 0 and math.isfinite(row.ne):
            row.ne_gain_pct = ne_gain_pct(row.ne, b)


def write_trace(rows: Iterable[TraceRow], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for r in rows:
        writer.writerow(r.as_list())


def trace_csv(rows: Iterable[TraceRow]) -> str:
    buf = io.StringIO()
    write_trace(rows, buf)
    return buf.getvalue()


class SplitRole(str, enum.Enum):
    FM_TRAIN = "FMTrain"
    VM_TRAIN = "VMTrain"
    VM_TEST = "VMTest"


@dataclass(frozen=True)
class DaySplit:
    day: int
    role: SplitRole


def rolling_splits(n_days: int, fm_days: int) -> list[list[DaySplit]]:
    """Rounds of the rolling protocol.

    Round ``r`` trains the teacher on days ``1..fm_days+r``, trains VMs on
    day ``fm_days+r+1`` and tests on the following day, until the horizon.
    Days are one-based here.
    """
    rounds = []
    r = 0
    while fm_days + r + 2 <= n_days:
        fm = [DaySplit(d, SplitRole.FM_TRAIN) for d in range(1, fm_days + r + 1)]
        rounds.append(fm + [DaySplit(fm_days + r + 1, SplitRole.VM_TRAIN),
                            DaySplit(fm_days + r + 2, SplitRole.VM_TEST)])
        r += 1
    return rounds


