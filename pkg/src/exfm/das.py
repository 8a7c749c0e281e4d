"""Simulated Data Augmentation Service.

Impressions from every vertical traffic are joined into one shared dataset,
labels attach once feedback arrives inside the row's window, and the teacher
(FM) logs a pseudo-label for each row. Teacher snapshots are published to an
append-only store (SPD); a linearizable register with a lease names the
latest snapshot; every DAS task runs the same updater, loader and
supervision handlers, driven by a discrete-event scheduler on a virtual
clock.

A lapsed lease is treated as revocation: a loader that finds no live
register entry releases its snapshot, since garbage collection may reclaim
it. Keeping the lease alive is therefore what keeps supervision available.
"""

from __future__ import annotations

import copy
import csv
import enum
import itertools
import json
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CasLost, LateFeedback, NoSnapshotInstalled
from .models import Mlp, deserialize_snapshot, fm_forward
from .numerics import seeded_rng

MINUTE_MS = 60_000

TRACE_HEADER = ["time", "task_id", "event", "version"]
INVARIANTS = ("availability", "load_once", "monotonicity", "gc_safety", "freshness_tag")
GLOBAL_TASK = -1


# ---------------------------------------------------------------------------
# Shared dataset


@dataclass(frozen=True)
class SupervisionRecord:
    example_id: int
    y_f: float
    fm_version: int
    logged_at: int

    def __post_init__(self):
        if not 0.0 < self.y_f < 1.0:
            raise ValueError(f"pseudo-label {self.y_f} outside (0, 1)")

    def to_json(self) -> str:
        return json.dumps(
            {
                "example_id": self.example_id,
                "logged_at": self.logged_at,
                "fm_version": self.fm_version,
                "y_f": self.y_f,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "SupervisionRecord":
        d = json.loads(line)
        return cls(int(d["example_id"]), float(d["y_f"]), int(d["fm_version"]), int(d["logged_at"]))


def write_supervision_log(records: Iterable[SupervisionRecord], fh) -> None:
    for rec in records:
        fh.write(rec.to_json() + "\n")


def read_supervision_log(fh) -> list[SupervisionRecord]:
    return [SupervisionRecord.from_json(line) for line in fh if line.strip()]


class LabelStatus(str, enum.Enum):
    PENDING = "Pending"
    ARRIVED = "Arrived"


@dataclass
class SharedDatasetRow:
    example_id: int
    features: np.ndarray
    timestamp: int
    feedback_deadline: int
    traffic_ids: tuple[int, ...]
    label: int | None = None
    label_arrival: int | None = None
    supervision: SupervisionRecord | None = None
    released: bool = False

    @property
    def label_status(self) -> LabelStatus:
        return LabelStatus.PENDING if self.label is None else LabelStatus.ARRIVED

    def attach_label(self, label: int, at: int) -> None:
        if at > self.feedback_deadline:
            raise LateFeedback(f"row {self.example_id}: feedback at {at} after {self.feedback_deadline}")
        self.label = int(label)
        self.label_arrival = at

    def attach_supervision(self, record: SupervisionRecord) -> None:
        if self.released:
            raise ValueError(f"row {self.example_id} already released to VMs")
        self.supervision = record

    def release(self) -> None:
        if self.label is None:
            raise ValueError(f"row {self.example_id} has no label yet")
        self.released = True


@dataclass(frozen=True)
class WindowConfig:
    """Feedback windows and the delay distribution of label arrival.

    Delays follow an exponential with mean ``mean_delay_ms`` truncated at
    ``max_delay_ms``; a row whose delay exceeds its window is dropped.
    """

    windows_ms: dict = field(default_factory=lambda: {"ctr": 90 * MINUTE_MS})
    mean_delay_ms: float = 15 * MINUTE_MS
    max_delay_ms: float = 120 * MINUTE_MS
    feedback_type: str = "ctr"

    @property
    def window_ms(self) -> int:
        return int(self.windows_ms[self.feedback_type])

    def released_fraction(self) -> float:
        """Probability that feedback lands inside the window."""
        w, m, t = self.window_ms, self.mean_delay_ms, self.max_delay_ms
        if m == 0:
            return 1.0
        if w >= t:
            return 1.0
        return (1 - math.exp(-w / m)) / (1 - math.exp(-t / m))

    def sample_delays(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.mean_delay_ms == 0:
            return np.zeros(n, dtype=np.int64)
        m, t = self.mean_delay_ms, self.max_delay_ms
        u = rng.random(n)
        d = -m * np.log1p(-u * (1 - math.exp(-t / m)))
        return np.floor(d).astype(np.int64)


@dataclass
class JoinResult:
    rows: list[SharedDatasetRow]  # released, ordered by label arrival
    late: int = 0
    duplicates: int = 0


def join_and_window(streams, window_cfg: WindowConfig, seed: int = 0) -> JoinResult:
    """Join impressions across traffics and attach labels within the window.

    ``streams`` are :class:`~exfm.stream.Stream` objects, one per traffic.
    Impressions sharing an example id are merged into one row (so the teacher
    scores them once). Rows whose feedback misses the deadline are dropped
    and counted in ``late``.
    """
    rng = seeded_rng(seed)
    rows: dict[int, SharedDatasetRow] = {}
    labels: dict[int, int] = {}
    duplicates = 0
    impressions = []
    for s in streams:
        for i in range(len(s)):
            impressions.append((int(s.timestamps[i]), int(s.ids[i]), s, i))
    impressions.sort(key=lambda t: (t[0], t[1]))
    window = window_cfg.window_ms
    for ts, eid, s, i in impressions:
        traffic = int(s.traffic_ids[i])
        row = rows.get(eid)
        if row is not None:
            duplicates += 1
            if traffic not in row.traffic_ids:
                row.traffic_ids = row.traffic_ids + (traffic,)
            continue
        rows[eid] = SharedDatasetRow(eid, s.features[i], ts, ts + window, (traffic,))
        labels[eid] = int(s.labels[i])
    ordered = list(rows.values())
    delays = window_cfg.sample_delays(rng, len(ordered))
    released = []
    late = 0
    for row, d in zip(ordered, delays):
        try:
            row.attach_label(labels[row.example_id], row.timestamp + int(d))
        except LateFeedback:
            late += 1
            continue
        released.append(row)
    released.sort(key=lambda r: (r.label_arrival, r.example_id))
    return JoinResult(released, late, duplicates)


# ---------------------------------------------------------------------------
# Snapshot store, metadata register, snapshot cache


class SnapshotPublishingDb:
    """Append-only ``version -> (blob, published_at)`` map."""

    def __init__(self):
        self._entries: dict[int, tuple[bytes, int]] = {}
        self._max: int | None = None

    def publish(self, version: int, blob: bytes, now: int) -> None:
        if self._max is not None and version <= self._max:
            raise ValueError(f"version {version} not greater than {self._max}")
        self._entries[version] = (bytes(blob), now)
        self._max = version

    def max_version(self) -> int | None:
        return self._max

    def get(self, version: int) -> tuple[bytes, int]:
        return self._entries[version]

    def versions(self) -> list[int]:
        return sorted(self._entries)


@dataclass(frozen=True)
class Lease:
    version: int
    expires_at: int


class MetadataStore:
    """Single linearizable register holding the latest version under a lease."""

    def __init__(self):
        self._value: Lease | None = None
        self._lock = threading.Lock()
        self._expiry: dict[int, int] = {}

    def __deepcopy__(self, memo):
        other = MetadataStore()
        other._value = self._value
        other._expiry = dict(self._expiry)
        return other

    def read(self) -> Lease | None:
        with self._lock:
            return self._value

    def live_version(self, now: int) -> int | None:
        v = self.read()
        return v.version if v is not None and v.expires_at > now else None

    def lease_expiry(self, version: int) -> int | None:
        with self._lock:
            return self._expiry.get(version)

    def compare_and_set(self, expected: Lease | None, new: Lease, now: int) -> bool:
        if new.expires_at <= now:
            raise ValueError("lease must expire strictly in the future")
        with self._lock:
            if self._value != expected:
                return False
            if self._value is not None and new.version < self._value.version:
                raise ValueError("register version may not decrease")
            self._value = new
            self._expiry[new.version] = new.expires_at
            return True


class SnapshotCache:
    """Locally installed snapshot copies, shared by the tasks on a host."""

    def __init__(self):
        self._models: dict[int, Mlp | None] = {}

    def install(self, version: int, model: Mlp | None) -> None:
        self._models[version] = model

    def get(self, version: int) -> Mlp | None:
        if version not in self._models:
            raise KeyError(version)
        return self._models[version]

    def __contains__(self, version: int) -> bool:
        return version in self._models

    def versions(self) -> list[int]:
        return sorted(self._models)

    def collect(self, version: int) -> None:
        del self._models[version]


@dataclass
class DasTask:
    task_id: int
    loaded_version: int | None = None
    loading: tuple[int, int] | None = None  # (version, completes_at)
    loads_begun: Counter = field(default_factory=Counter)
    loads_done: Counter = field(default_factory=Counter)
    pending_write: tuple | None = None


@dataclass(frozen=True)
class TraceEvent:
    time: int
    task_id: int
    event: str
    version: int | None

    def as_list(self) -> list:
        return [self.time, self.task_id, self.event, "" if self.version is None else self.version]


# ---------------------------------------------------------------------------
# Handlers


def _emit(trace, checker, ev: TraceEvent) -> None:
    if trace is not None:
        trace.append(ev)
    if checker is not None:
        checker.feed(ev)


def updater_read(task: DasTask, spd: SnapshotPublishingDb, meta: MetadataStore, now: int,
                 lease_ms: int, skip_extension: bool = False) -> None:
    """First half of an updater tick: observe SPD and the register."""
    latest = spd.max_version()
    cur = meta.read()
    task.pending_write = None
    if latest is None:
        return
    if cur is None or latest > cur.version:
        task.pending_write = ("register_write", cur, Lease(latest, now + lease_ms))
    elif not skip_extension and now + lease_ms > cur.expires_at:
        task.pending_write = ("lease_extend", cur, Lease(cur.version, now + lease_ms))


def updater_write(task: DasTask, meta: MetadataStore, now: int, trace=None, checker=None) -> Lease | None:
    """Second half of an updater tick: compare-and-set what was observed."""
    pending, task.pending_write = task.pending_write, None
    if pending is None:
        return None
    kind, expected, new = pending
    if new.expires_at <= now:
        return None
    if not meta.compare_and_set(expected, new, now):
        _emit(trace, checker, TraceEvent(now, task.task_id, "cas_lost", new.version))
        raise CasLost(f"task {task.task_id} lost the race for version {new.version}")
    _emit(trace, checker, TraceEvent(now, task.task_id, kind, new.version))
    return new


def updater_tick(task, spd, meta, now, lease_ms, skip_extension=False, trace=None, checker=None):
    """Both halves back to back: detect a newer snapshot or extend the lease."""
    updater_read(task, spd, meta, now, lease_ms, skip_extension)
    return updater_write(task, meta, now, trace, checker)


def _complete_load(task, spd, cache, now, trace, checker, materialize):
    version, done_at = task.loading
    if now < done_at:
        return
    task.loading = None
    if version not in cache:
        blob, _ = spd.get(version)
        cache.install(version, deserialize_snapshot(blob)[1] if materialize else None)
    task.loaded_version = version
    task.loads_done[version] += 1
    _emit(trace, checker, TraceEvent(now, task.task_id, "load_complete", version))


def advance(task, spd, cache, now, trace=None, checker=None, materialize=True) -> None:
    """Finish an in-flight load whose duration has elapsed."""
    if task.loading is not None:
        _complete_load(task, spd, cache, now, trace, checker, materialize)


def loader_tick(task, meta, spd, cache, now, load_ms, trace=None, checker=None,
                materialize=True) -> str | None:
    """Follow the register: start loading a new version, switching on completion.

    The old snapshot keeps serving until the new one is installed. A version
    is loaded at most once per task.
    """
    advance(task, spd, cache, now, trace, checker, materialize)
    target = meta.live_version(now)
    if target is None:
        if task.loaded_version is not None and task.loading is None:
            v = task.loaded_version
            task.loaded_version = None
            _emit(trace, checker, TraceEvent(now, task.task_id, "unload", v))
            return "unload"
        return None
    if target == task.loaded_version or task.loading is not None:
        return None
    if task.loads_begun[target] or (task.loaded_version is not None and target < task.loaded_version):
        return None
    task.loading = (target, now + load_ms)
    task.loads_begun[target] += 1
    _emit(trace, checker, TraceEvent(now, task.task_id, "load_begin", target))
    if load_ms == 0:
        advance(task, spd, cache, now, trace, checker, materialize)
    return "load_begin"


def gc_tick(meta, cache: SnapshotCache, tasks: Sequence[DasTask], now, trace=None, checker=None,
            ignore_serving: bool = False) -> list[int]:
    """Collect local copies whose lease lapsed, unused and superseded."""
    installed = [t.loaded_version for t in tasks if t.loaded_version is not None]
    collected = []
    for v in cache.versions():
        expiry = meta.lease_expiry(v)
        expired = expiry is None or expiry <= now
        serving = v in installed
        newer = any(u > v for u in installed)
        if expired and newer and (ignore_serving or not serving):
            cache.collect(v)
            collected.append(v)
            _emit(trace, checker, TraceEvent(now, GLOBAL_TASK, "gc", v))
    return collected


def supervise(row: SharedDatasetRow | None, task: DasTask, spd, cache: SnapshotCache, now: int,
              trace=None, checker=None, materialize=True) -> SupervisionRecord | None:
    """Log the teacher's pseudo-label for ``row`` with the task's snapshot.

    With ``row=None`` only the availability bookkeeping runs (used by the
    protocol checker). Raises :class:`NoSnapshotInstalled` if nothing is
    installed or the installed copy has been collected.
    """
    advance(task, spd, cache, now, trace, checker, materialize)
    v = task.loaded_version
    if v is None:
        _emit(trace, checker, TraceEvent(now, task.task_id, "supervise_miss", None))
        raise NoSnapshotInstalled(f"task {task.task_id} has no snapshot at t={now}")
    _emit(trace, checker, TraceEvent(now, task.task_id, "supervise", v))
    if v not in cache:
        raise NoSnapshotInstalled(f"task {task.task_id}: version {v} was collected")
    if row is None:
        return None
    y_f = float(fm_forward(cache.get(v), row.features))
    y_f = min(max(y_f, 1e-12), 1 - 1e-12)
    rec = SupervisionRecord(row.example_id, y_f, v, now)
    row.attach_supervision(rec)
    return rec


def supervise_batch(rows: Sequence[SharedDatasetRow], task: DasTask, spd, cache: SnapshotCache,
                    now: int, trace=None, checker=None, featurize=None) -> list[SupervisionRecord]:
    """:func:`supervise` for many rows at one instant, one teacher call.

    Each record's ``logged_at`` is its row's own timestamp. ``featurize``
    maps the rows to the teacher's input matrix when the teacher sees more
    than the raw features.
    """
    if not rows:
        return []
    supervise(None, task, spd, cache, now, trace, checker)
    v = task.loaded_version
    X = np.vstack([r.features for r in rows]) if featurize is None else featurize(rows)
    y_f = np.clip(np.atleast_1d(fm_forward(cache.get(v), X)), 1e-12, 1 - 1e-12)
    out = []
    for row, p in zip(rows, y_f):
        rec = SupervisionRecord(row.example_id, float(p), v, row.timestamp)
        row.attach_supervision(rec)
        out.append(rec)
    return out


# ---------------------------------------------------------------------------
# Invariant checking


@dataclass
class TraceChecker:
    """Incremental checker for the protocol invariants over a trace."""

    loads: Counter = field(default_factory=Counter)
    installed: dict = field(default_factory=dict)
    ever_loaded: set = field(default_factory=set)
    collected: set = field(default_factory=set)
    last_register: int | None = None
    violations: list = field(default_factory=list)

    def feed(self, ev: TraceEvent) -> None:
        kind, task, v = ev.event, ev.task_id, ev.version
        if kind == "load_complete":
            self.loads[(task, v)] += 1
            if self.loads[(task, v)] > 1:
                self.violations.append(("load_once", ev))
            self.installed[task] = v
            self.ever_loaded.add(task)
            self.collected.discard(v)
        elif kind == "unload":
            self.installed[task] = None
        elif kind in ("register_write", "lease_extend"):
            if self.last_register is not None and v < self.last_register:
                self.violations.append(("monotonicity", ev))
            self.last_register = v
        elif kind == "gc":
            self.collected.add(v)
        elif kind == "supervise":
            if v in self.collected:
                self.violations.append(("gc_safety", ev))
            if self.installed.get(task) != v:
                self.violations.append(("freshness_tag", ev))
        elif kind == "supervise_miss":
            if task in self.ever_loaded:
                self.violations.append(("availability", ev))

    def summary(self) -> dict[str, bool]:
        kinds = {k for k, _ in self.violations}
        return {name: name not in kinds for name in INVARIANTS}


def check_trace(events: Iterable[TraceEvent]) -> TraceChecker:
    checker = TraceChecker()
    for ev in events:
        checker.feed(ev)
    return checker


def write_trace(events: Iterable[TraceEvent], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TRACE_HEADER)
    for ev in events:
        writer.writerow(ev.as_list())


def read_trace(fh) -> list[TraceEvent]:
    reader = csv.reader(fh)
    header = next(reader)
    if header != TRACE_HEADER:
        raise ValueError(f"unexpected trace header {header}")
    return [
        TraceEvent(int(t), int(task), ev, None if v == "" else int(v)) for t, task, ev, v in reader
    ]


# ---------------------------------------------------------------------------
# Discrete-event simulator


@dataclass(frozen=True)
class DasConfig:
    n_tasks: int = 2
    updater_period: int = 5 * MINUTE_MS
    loader_period: int = 5 * MINUTE_MS
    gc_period: int = 5 * MINUTE_MS
    lease_ms: int | None = None  # default 3 x updater period
    load_ms: int | None = None  # default 2 x loader period
    skip_lease_extension: bool = False  # injected bug
    gc_ignores_serving: bool = False  # injected bug

    @property
    def lease(self) -> int:
        return 3 * self.updater_period if self.lease_ms is None else self.lease_ms

    @property
    def load(self) -> int:
        return 2 * self.loader_period if self.load_ms is None else self.load_ms


@dataclass
class DasSimulator:
    """All DAS state plus the handlers, advanced tick by tick.

    Events due at the same instant run in an order chosen by the caller, so a
    driver can enumerate or randomize interleavings. Each task's updater read
    precedes its own write; everything else is unconstrained.
    """

    cfg: DasConfig
    phases: tuple = ()
    materialize: bool = True
    keep_trace: bool = True

    def __post_init__(self):
        self.spd = SnapshotPublishingDb()
        self.meta = MetadataStore()
        self.cache = SnapshotCache()
        self.tasks = [DasTask(i) for i in range(self.cfg.n_tasks)]
        if not self.phases:
            self.phases = tuple((0, 0) for _ in range(self.cfg.n_tasks))
        self.trace: list[TraceEvent] | None = [] if self.keep_trace else None
        self.checker = TraceChecker()
        self.publish_queue: list[tuple[int, int, bytes]] = []
        self.now = 0
        self.last_tick: int | None = None

    def clone(self) -> "DasSimulator":
        """Independent copy; snapshot blobs and models are shared read-only."""
        other = copy.copy(self)
        other.spd = copy.copy(self.spd)
        other.spd._entries = dict(self.spd._entries)
        other.meta = copy.deepcopy(self.meta)
        other.cache = SnapshotCache()
        other.cache._models = dict(self.cache._models)
        other.tasks = [
            DasTask(t.task_id, t.loaded_version, t.loading, Counter(t.loads_begun), Counter(t.loads_done),
                    t.pending_write)
            for t in self.tasks
        ]
        other.trace = None if self.trace is None else list(self.trace)
        ck = self.checker
        other.checker = TraceChecker(Counter(ck.loads), dict(ck.installed), set(ck.ever_loaded),
                                     set(ck.collected), ck.last_register, list(ck.violations))
        other.publish_queue = list(self.publish_queue)
        return other

    def schedule_publish(self, at: int, version: int, blob: bytes) -> None:
        self.publish_queue.append((at, version, blob))
        self.publish_queue.sort(key=lambda t: (t[0], t[1]))

    def due_events(self, t: int) -> list[tuple[str, int]]:
        cfg = self.cfg
        events = []
        if any(at == t for at, _, _ in self.publish_queue):
            events.append(("publish", GLOBAL_TASK))
        for task in self.tasks:
            up, lo = self.phases[task.task_id]
            if (t - up) % cfg.updater_period == 0:
                events.append(("updater_read", task.task_id))
                events.append(("updater_write", task.task_id))
            if (t - lo) % cfg.loader_period == 0:
                events.append(("loader", task.task_id))
        if t % cfg.gc_period == 0:
            events.append(("gc", GLOBAL_TASK))
        return events

    def next_event_time(self, after: int) -> int:
        """Smallest time > ``after`` at which any event is due."""
        cands = [at for at, _, _ in self.publish_queue if at > after]
        cfg = self.cfg
        for up, lo in self.phases:
            for period, phase in ((cfg.updater_period, up), (cfg.loader_period, lo)):
                k = (after - phase) // period + 1
                cands.append(phase + k * period)
        cands.append((after // cfg.gc_period + 1) * cfg.gc_period)
        for task in self.tasks:
            if task.loading is not None and task.loading[1] > after:
                cands.append(task.loading[1])
        return min(cands)

    def execute(self, event: tuple[str, int], t: int) -> None:
        kind, tid = event
        cfg = self.cfg
        trace, checker = self.trace, self.checker
        if kind == "publish":
            while self.publish_queue and self.publish_queue[0][0] == t:
                _, version, blob = self.publish_queue.pop(0)
                self.spd.publish(version, blob, t)
                _emit(trace, checker, TraceEvent(t, GLOBAL_TASK, "publish", version))
        elif kind == "updater_read":
            updater_read(self.tasks[tid], self.spd, self.meta, t, cfg.lease, cfg.skip_lease_extension)
        elif kind == "updater_write":
            try:
                updater_write(self.tasks[tid], self.meta, t, trace, checker)
            except CasLost:
                pass
        elif kind == "loader":
            loader_tick(self.tasks[tid], self.meta, self.spd, self.cache, t, cfg.load, trace, checker,
                        self.materialize)
        elif kind == "gc":
            gc_tick(self.meta, self.cache, self.tasks, t, trace, checker, cfg.gc_ignores_serving)
        elif kind == "supervise":
            try:
                supervise(None, self.tasks[tid], self.spd, self.cache, t, trace, checker, self.materialize)
            except NoSnapshotInstalled:
                pass
        else:
            raise ValueError(f"unknown event {kind!r}")

    def run_tick(self, t: int, order: Sequence[tuple[str, int]] | None = None) -> None:
        self.now = t
        for task in self.tasks:
            advance(task, self.spd, self.cache, t, self.trace, self.checker, self.materialize)
        for ev in order if order is not None else self.due_events(t):
            self.execute(ev, t)

    def advance_to(self, t: int) -> None:
        """Run every tick up to and including ``t`` in the default order."""
        while True:
            nxt = 0 if self.last_tick is None else self.next_event_time(self.last_tick)
            if nxt > t:
                break
            self.run_tick(nxt)
            self.last_tick = nxt
        self.now = max(self.now, t)
        for task in self.tasks:
            advance(task, self.spd, self.cache, t, self.trace, self.checker, self.materialize)

    def state_key(self, canonical: bool = False):
        """Hashable summary of everything that influences future behaviour.

        With ``canonical`` the task tuples are sorted, so states that differ
        only by a renaming of task ids compare equal.
        """
        ck = self.checker
        tasks = [
            (
                t.loaded_version,
                t.loading,
                tuple(sorted(t.loads_begun.items())),
                tuple(sorted(t.loads_done.items())),
                t.pending_write,
                self.phases[t.task_id],
                t.task_id in ck.ever_loaded,
            )
            for t in self.tasks
        ]
        if canonical:
            tasks.sort(key=repr)
        return (
            self.meta.read(),
            tuple(sorted(self.meta._expiry.items())),
            tuple(self.cache.versions()),
            self.spd.max_version(),
            tuple(tasks),
            len(self.publish_queue),
            tuple(sorted(ck.collected)),
            ck.last_register,
            tuple(sorted({k for k, _ in ck.violations})),
        )


@dataclass
class ProtocolReport:
    invariants: dict[str, bool]
    schedules: int
    states: int = 0
    violating_trace: list[TraceEvent] | None = None

    @property
    def passed(self) -> bool:
        return all(self.invariants.values())


def _tiny_blob(version: int) -> bytes:
    from .models import Layer, serialize_snapshot

    return serialize_snapshot(Mlp([Layer(np.zeros((1, 1)), np.zeros(1), "identity")]), version)


def protocol_schedule(n_versions: int, period: int, gap: int, horizon_extra: int):
    """Publish times for a verification run and its end time."""
    publish = [(1 + i * gap) * period for i in range(n_versions)]
    return publish, publish[-1] + horizon_extra * period


def _interleavings(sim: "DasSimulator", t: int, events: Sequence[tuple[str, int]]):
    """Yield every distinct state reachable by running ``events`` at ``t`` in any order.

    Events are applied one at a time; intermediate states are merged on
    (state, events done), so orders that commute are explored once. Returns
    the final states and the number of single-event transitions taken.
    """
    sim = sim.clone()
    sim.now = t
    for task in sim.tasks:
        advance(task, sim.spd, sim.cache, t, sim.trace, sim.checker, sim.materialize)
    layer = {(sim.state_key(), frozenset()): sim}
    steps = 0
    for _ in range(len(events)):
        nxt = {}
        for (_, done), s in layer.items():
            for i, ev in enumerate(events):
                if i in done:
                    continue
                if ev[0] == "updater_write" and events.index(("updater_read", ev[1])) not in done:
                    continue
                child = s.clone()
                child.execute(ev, t)
                steps += 1
                nd = done | {i}
                nxt.setdefault((child.state_key(), nd), child)
        layer = nxt
    return list(layer.values()), steps


def explore_exhaustive(cfg: DasConfig, n_versions: int = 3, gap: int = 6, tail: int = 12,
                       phase_choices: Sequence[int] | None = None) -> ProtocolReport:
    """Every interleaving of same-instant events, for every task phase assignment.

    Time runs on a grid of half an updater period. Each handler's phase is
    chosen from ``phase_choices`` per task, and a supervision probe for every
    task joins the events at every grid point. Reachable states are
    deduplicated, so the search covers all states rather than all paths. Also
    checks that swapping task ids leaves the reachable state set unchanged.
    """
    unit = cfg.updater_period
    if cfg.loader_period != unit or cfg.gc_period != unit:
        raise ValueError("exhaustive search needs equal updater, loader and gc periods")
    if phase_choices is None:
        phase_choices = (0, unit // 2)
    publish, end = protocol_schedule(n_versions, unit, gap, tail)
    ok = {k: True for k in INVARIANTS}
    total_states = 0
    steps = 0
    canon_by_phase = {}
    bad: list[TraceEvent] | None = None
    for phases in itertools.product(itertools.product(phase_choices, repeat=2), repeat=cfg.n_tasks):
        sim = DasSimulator(cfg, phases=phases, materialize=False, keep_trace=False)
        for at, v in zip(publish, range(1, n_versions + 1)):
            sim.schedule_publish(at, v, _tiny_blob(v))
        frontier = {sim.state_key(): sim}
        reachable = set()
        for t in range(0, end + 1, unit // 2):
            nxt = {}
            for s in frontier.values():
                events = s.due_events(t) + [("supervise", task.task_id) for task in s.tasks]
                finals, n = _interleavings(s, t, events)
                steps += n
                for child in finals:
                    nxt.setdefault(child.state_key(), child)
            frontier = nxt
            reachable.update(s.state_key(canonical=True) for s in frontier.values())
        total_states += len(reachable)
        canon_by_phase[phases] = frozenset(reachable)
        for s in frontier.values():
            for name, good in s.checker.summary().items():
                ok[name] = ok[name] and good
            if s.checker.violations and bad is None:
                bad = [ev for _, ev in s.checker.violations]
    ok["symmetry"] = all(
        canon_by_phase.get(tuple(reversed(p)), states) == states for p, states in canon_by_phase.items()
    )
    return ProtocolReport(ok, steps, total_states, bad)


def run_random_schedule(cfg: DasConfig, n_versions: int, rng: np.random.Generator,
                        tail: int = 12) -> DasSimulator:
    """One randomized run: random task phases, publish gaps and event orders."""
    unit = cfg.updater_period
    phases = tuple(
        (int(rng.integers(0, cfg.updater_period)), int(rng.integers(0, cfg.loader_period)))
        for _ in range(cfg.n_tasks)
    )
    sim = DasSimulator(cfg, phases=phases, materialize=False)
    t = unit
    for v in range(1, n_versions + 1):
        sim.schedule_publish(t, v, _tiny_blob(v))
        t += int(rng.integers(1, 10)) * unit + int(rng.integers(0, unit))
    end = t + tail * unit
    probe_times = np.sort(rng.integers(0, end, size=20 * (n_versions + tail)))
    probes = {int(p) for p in probe_times}
    now = -1
    while True:
        nxt = sim.next_event_time(now)
        nxt_probe = min((p for p in probes if p > now), default=None)
        if nxt_probe is not None and nxt_probe < nxt:
            nxt = nxt_probe
        if nxt > end:
            break
        events = sim.due_events(nxt)
        if nxt in probes:
            events += [("supervise", task.task_id) for task in sim.tasks]
        order = list(events)
        rng.shuffle(order)
        # Restore read-before-write per task without disturbing the rest.
        fixed = []
        pending_writes = {}
        for ev in order:
            if ev[0] == "updater_write" and ("updater_read", ev[1]) not in fixed:
                pending_writes[ev[1]] = ev
                continue
            fixed.append(ev)
            if ev[0] == "updater_read" and ev[1] in pending_writes:
                fixed.append(pending_writes.pop(ev[1]))
        sim.run_tick(nxt, fixed)
        now = nxt
    return sim


def verify_random(cfg: DasConfig, n_versions: int, count: int, seed: int) -> ProtocolReport:
    rng = seeded_rng(seed)
    ok = {k: True for k in INVARIANTS}
    bad_trace = None
    for _ in range(count):
        sim = run_random_schedule(cfg, n_versions, rng)
        summary = sim.checker.summary()
        for k, v in summary.items():
            ok[k] = ok[k] and v
        if not all(summary.values()) and bad_trace is None:
            bad_trace = sim.trace
    return ProtocolReport(ok, count, violating_trace=bad_trace)
