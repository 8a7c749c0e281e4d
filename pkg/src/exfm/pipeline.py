"""End-to-end experiments: teacher training, DAS supervision, student training.

Each seed runs the same day loop. The FM trains on the union of every
traffic's released rows and publishes the snapshot trained through day
``t - delay`` at the end of day ``t``. The DAS joins impressions, logs
pseudo-labels with whatever snapshot its tasks have installed at impression
time, and each VM trains progressively on its own traffic in every
configured mode.

Config files are flat ``key = value`` lines. ``[section]`` headers prefix
the keys that follow (``[distill]`` then ``lr = 0.05`` means
``distill.lr``); dotted keys also work at top level. Unknown keys are an
error.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .das import (
    MINUTE_MS,
    DasConfig,
    DasSimulator,
    WindowConfig,
    join_and_window,
    supervise_batch,
    write_supervision_log,
    write_trace as write_das_trace,
)
from .distill import AHConfig, DistillMode, StudentAdapter, fm_train_step
from .errors import ConfigError, NoSnapshotInstalled
from .models import check_capacity, init_fm, init_student_adapter, init_vm, serialize_snapshot
from .numerics import child_seeds, seeded_rng
from .stream import (
    DAY_MS,
    DriftGenConfig,
    Stream,
    auc,
    calibration,
    generate_stream,
    ne,
    ne_gain_pct,
    run_streaming_eval,
    write_trace,
)

# ---------------------------------------------------------------------------
# Configuration


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _modes(text: str) -> tuple[DistillMode, ...]:
    return tuple(DistillMode.parse(v.strip()) for v in text.split(",") if v.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class ModelConfig:
    fm_hidden: tuple[int, ...] = (256, 256)
    fm_lr: float = 0.05
    fm_batch: int = 32
    vm_backbone: tuple[int, ...] = (64, 64)
    vm_head_hidden: int = 16
    sa_hidden: int = 8
    capacity_ratio: float = 4.0
    fm_traffic_input: bool = True  # teacher also sees which traffics logged the row


@dataclass(frozen=True)
class DistillConfig:
    modes: tuple[DistillMode, ...] = tuple(DistillMode)
    loss_weight: float = 1.0
    label_scale: float = 1.5
    grad_scale: float = 4.0
    lr: float = 0.05
    sa_lr: float = 1.0
    sa_warmup: int = 100
    batch_size: int = 32

    @property
    def ah(self) -> AHConfig:
        return AHConfig(self.loss_weight, self.label_scale, self.grad_scale)


@dataclass(frozen=True)
class DasSettings:
    enabled: bool = True
    n_tasks: int = 2
    updater_period_min: float = 5
    loader_period_min: float = 5
    gc_period_min: float = 5
    lease_min: float | None = None
    load_min: float | None = None
    window_min: float = 90
    mean_delay_min: float = 15
    max_delay_min: float = 120

    def das_config(self) -> DasConfig:
        def ms(v):
            return None if v is None else int(round(v * MINUTE_MS))

        return DasConfig(
            n_tasks=self.n_tasks,
            updater_period=ms(self.updater_period_min),
            loader_period=ms(self.loader_period_min),
            gc_period=ms(self.gc_period_min),
            lease_ms=ms(self.lease_min),
            load_ms=ms(self.load_min),
        )

    def window_config(self) -> WindowConfig:
        return WindowConfig(
            {"ctr": int(round(self.window_min * MINUTE_MS))},
            self.mean_delay_min * MINUTE_MS,
            self.max_delay_min * MINUTE_MS,
        )


@dataclass(frozen=True)
class ProtocolConfig:
    fm_days: int = 4
    delay_days: int = 0


def default_stream_config() -> DriftGenConfig:
    return DriftGenConfig(rho=0.95, churn=0.1, domain_offset_scale=2.0, domain_bias_scale=0.5)


@dataclass(frozen=True)
class ExperimentConfig:
    stream: DriftGenConfig = field(default_factory=default_stream_config)
    models: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    das: DasSettings = field(default_factory=DasSettings)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    seeds: tuple[int, ...] = tuple(range(10))
    out: str = "out"

    def validate(self) -> "ExperimentConfig":
        n, k, delay = self.stream.n_days, self.protocol.fm_days, self.protocol.delay_days
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if k < 1 or k > n - 2:
            raise ConfigError(f"protocol.fm_days={k} needs 1 <= fm_days <= n_days - 2 = {n - 2}")
        if delay < 0:
            raise ConfigError("protocol.delay_days must be nonnegative")
        if not self.distill.modes:
            raise ConfigError("distill.modes is empty")
        return self


_SECTIONS = {
    "stream": "stream",
    "models": "models",
    "distill": "distill",
    "das": "das",
    "protocol": "protocol",
}


def _coerce(cls, name: str, text: str):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[name]
    ftype = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    text = text.strip()
    if name == "modes":
        return _modes(text)
    if "tuple[int" in ftype:
        return _ints(text)
    if ftype.startswith("bool"):
        return _bool(text)
    if "None" in ftype and text.lower() in ("", "none"):
        return None
    if ftype.startswith("int"):
        return int(text)
    if "float" in ftype:
        return float(text)
    return text


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat config format. Raises :class:`ConfigError`."""
    cfg = ExperimentConfig()
    updates: dict[str, dict] = {k: {} for k in _SECTIONS}
    top: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS and section not in ("seeds", "output"):
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        head, _, rest = key.partition(".")
        try:
            if head in _SECTIONS and rest:
                target = getattr(cfg, _SECTIONS[head])
                if rest not in {f.name for f in dataclasses.fields(target)} or rest == "seed":
                    raise ConfigError(f"line {lineno}: unknown key {key!r}")
                updates[head][rest] = _coerce(type(target), rest, value)
            elif key in ("seeds", "seeds.seeds", "seeds.list"):
                top["seeds"] = _ints(value)
            elif key in ("out", "output.dir", "output.out"):
                top["out"] = value
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
    try:
        parts = {name: replace(getattr(cfg, name), **vals) for name, vals in updates.items() if vals}
        cfg = replace(cfg, **parts, **top)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


# ---------------------------------------------------------------------------
# One seed of the pipeline


@dataclass
class SeedData:
    streams: list[Stream]
    rows: list  # released SharedDatasetRow, label-arrival order
    day_of: dict  # example id -> day index
    snapshots: dict  # version -> serialized FM trained on days < version


@dataclass
class PipelineState:
    """Everything produced for one seed."""

    seed: int
    data: SeedData
    supervision: dict = field(default_factory=dict)  # example id -> SupervisionRecord
    das_trace: list = field(default_factory=list)
    results: dict = field(default_factory=dict)  # (mode, traffic) -> StreamingResult


def teacher_features(cfg: ExperimentConfig, rows) -> np.ndarray:
    """Teacher input for joined rows: features, then a multi-hot of traffic ids."""
    X = np.vstack([r.features for r in rows])
    if not cfg.models.fm_traffic_input:
        return X
    hot = np.zeros((len(rows), cfg.stream.n_traffics))
    for i, r in enumerate(rows):
        hot[i, list(r.traffic_ids)] = 1.0
    return np.hstack([X, hot])


def teacher_dim(cfg: ExperimentConfig) -> int:
    extra = cfg.stream.n_traffics if cfg.models.fm_traffic_input else 0
    return cfg.stream.feature_dim + extra


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedData:
    """Generate traffic, join it through the DAS window, train the FM day by day."""
    gen_seed, join_seed, fm_seed = child_seeds(seed, 3)
    streams = generate_stream(replace(cfg.stream, seed=gen_seed))
    joined = join_and_window(streams, cfg.das.window_config(), seed=join_seed)
    rows = joined.rows
    day_of = {r.example_id: r.timestamp // DAY_MS for r in rows}
    m = cfg.models
    fm = init_fm(seeded_rng(fm_seed), teacher_dim(cfg), m.fm_hidden)
    snapshots = {}
    by_day: dict[int, list] = {}
    for r in sorted(rows, key=lambda r: (r.timestamp, r.example_id)):
        by_day.setdefault(int(r.timestamp // DAY_MS), []).append(r)
    for day in range(cfg.stream.n_days - 1):
        part = by_day.get(day, [])
        if part:
            X = teacher_features(cfg, part)
            y = np.array([r.label for r in part], dtype=np.float64)
            for s in range(0, len(part), m.fm_batch):
                fm, _ = fm_train_step(fm, X[s:s + m.fm_batch], y[s:s + m.fm_batch], m.fm_lr)
        # Version v means "trained on days 0 .. v-1".
        snapshots[day + 1] = serialize_snapshot(fm, day + 1)
    return SeedData(streams, rows, day_of, snapshots)


def run_das(cfg: ExperimentConfig, data: SeedData, delay_days: int):
    """Publish snapshots on the DAS and supervise every row at impression time.

    At the end of day ``t`` the snapshot trained through day ``t - delay`` is
    published. Returns ``(records by example id, DAS trace)``.
    """
    sim = DasSimulator(cfg.das.das_config())
    for day in range(cfg.stream.n_days - 1):
        version = day + 1 - delay_days
        if version >= 1:
            sim.schedule_publish((day + 1) * DAY_MS, version, data.snapshots[version])
    records = {}
    order = sorted(data.rows, key=lambda r: (r.timestamp, r.example_id))
    n_tasks = cfg.das.n_tasks
    i = 0
    while i < len(order):
        t = order[i].timestamp
        sim.advance_to(t)
        nxt = sim.next_event_time(max(sim.now, t))
        j = i
        while j < len(order) and order[j].timestamp < nxt:
            j += 1
        groups: dict[int, list] = {}
        for r in order[i:j]:
            groups.setdefault(r.example_id % n_tasks, []).append(r)
        for tid in sorted(groups):
            batch = groups[tid]
            task = sim.tasks[tid]
            try:
                for rec in supervise_batch(batch, task, sim.spd, sim.cache, batch[0].timestamp,
                                           sim.trace, sim.checker,
                                           featurize=lambda rs: teacher_features(cfg, rs)):
                    records[rec.example_id] = rec
            except NoSnapshotInstalled:
                pass
        i = j
    for r in data.rows:
        r.supervision = None
    return records, sim.trace


def vm_stream(data: SeedData, traffic: int, first_day: int) -> Stream:
    rows = [r for r in data.rows if traffic in r.traffic_ids and data.day_of[r.example_id] >= first_day]
    rows.sort(key=lambda r: (r.timestamp, r.example_id))
    n = len(rows)
    F = data.streams[0].features.shape[1]
    return Stream(
        np.array([r.example_id for r in rows], dtype=np.int64),
        np.array([r.timestamp for r in rows], dtype=np.int64),
        np.full(n, traffic, dtype=np.int64),
        np.full(n, traffic, dtype=np.int64),
        np.array([r.label for r in rows], dtype=np.int64),
        np.vstack([r.features for r in rows]) if n else np.empty((0, F)),
    )


def train_vms(cfg: ExperimentConfig, seed: int, data: SeedData, supervision: dict,
              modes=None, trace_every: int = 50) -> dict:
    """Progressive training per traffic and mode; paired init across modes."""
    n_days, k = cfg.stream.n_days, cfg.protocol.fm_days
    d, m = cfg.distill, cfg.models
    results = {}
    vm_seeds = child_seeds(seed + 1, cfg.stream.n_traffics)
    for traffic in range(cfg.stream.n_traffics):
        s = vm_stream(data, traffic, k)
        y_f = np.array([
            supervision[i].y_f if i in supervision else np.nan for i in s.ids.tolist()
        ])
        for mode in modes or d.modes:
            rng = seeded_rng(vm_seeds[traffic])
            vm = init_vm(rng, cfg.stream.feature_dim, m.vm_backbone, m.vm_head_hidden, d.grad_scale)
            sa = StudentAdapter(init_student_adapter(rng, m.sa_hidden))
            results[(DistillMode.parse(mode), traffic)] = run_streaming_eval(
                vm, sa, s, mode, d.ah, d.lr, y_f=y_f, batch_size=d.batch_size, sa_lr=d.sa_lr,
                sa_warmup=d.sa_warmup, trace_every=trace_every, train_days=range(k, n_days - 1),
            )
    return results


def test_days(cfg: ExperimentConfig) -> range:
    return range(cfg.protocol.fm_days + 1, cfg.stream.n_days)


def run_seed(cfg: ExperimentConfig, seed: int, data: SeedData | None = None,
             delay_days: int | None = None, modes=None) -> PipelineState:
    data = prepare_seed(cfg, seed) if data is None else data
    delay = cfg.protocol.delay_days if delay_days is None else delay_days
    modes = tuple(DistillMode.parse(m) for m in (modes or cfg.distill.modes))
    need_teacher = any(m is not DistillMode.NO_DISTILL for m in modes)
    if cfg.das.enabled:
        supervision, trace = run_das(cfg, data, delay)
    else:
        supervision, trace = {}, []
    if not need_teacher:
        supervision = {}
    state = PipelineState(seed, data, supervision, trace)
    state.results = train_vms(cfg, seed, data, supervision, modes)
    return state


# ---------------------------------------------------------------------------
# Summaries and artifacts


METRIC_HEADER = ["seed", "delay", "mode", "traffic", "auc", "ne", "calibration", "ne_gain_pct"]


def _f(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def metric_rows(cfg: ExperimentConfig, state: PipelineState, delay: int) -> list[list]:
    days = test_days(cfg)
    rows = []
    base = {}
    for (mode, traffic), res in state.results.items():
        if mode is DistillMode.NO_DISTILL:
            base[traffic] = ne(res.window(days))
    for (mode, traffic), res in sorted(state.results.items(), key=lambda kv: (kv[0][1], list(DistillMode).index(kv[0][0]))):
        w = res.window(days)
        n = ne(w)
        gain = ne_gain_pct(n, base[traffic]) if traffic in base else None
        rows.append([state.seed, delay, mode.value, traffic, _f(auc(w)), _f(n), _f(calibration(w)), _f(gain)])
    return rows


def mean_by_mode(rows: list[list], column: str) -> dict[str, np.ndarray]:
    """Per-mode arrays of per-seed means (averaged over traffics)."""
    col = METRIC_HEADER.index(column)
    acc: dict[str, dict[int, list]] = {}
    for r in rows:
        acc.setdefault(r[2], {}).setdefault(r[0], []).append(float(r[col]))
    return {m: np.array([np.mean(v[s]) for s in sorted(v)]) for m, v in acc.items()}


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class OrderingReport:
    means: dict  # mode -> mean AUC
    ordered: bool
    diff_mean: float  # AH+SA - NoDistill
    diff_se: float

    @property
    def significant(self) -> bool:
        return self.diff_mean > 2 * self.diff_se


def ordering_report(rows: list[list]) -> OrderingReport:
    aucs = mean_by_mode(rows, "auc")
    order = [m.value for m in (DistillMode.AH_PLUS_SA, DistillMode.AH, DistillMode.VANILLA_KD,
                               DistillMode.NO_DISTILL)]
    means = {m: float(aucs[m].mean()) for m in aucs}
    ordered = all(m in means for m in order) and all(
        means[a] >= means[b] for a, b in zip(order, order[1:])
    )
    if order[0] in aucs and order[-1] in aucs:
        diff = aucs[order[0]] - aucs[order[-1]]
        se = float(diff.std(ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else math.inf
        return OrderingReport(means, ordered, float(diff.mean()), se)
    return OrderingReport(means, ordered, math.nan, math.nan)


def cmd_run(cfg: ExperimentConfig, out: str | os.PathLike | None = None) -> tuple[list[list], Path]:
    """Run every seed; write metrics, supervision logs, DAS and VM traces."""
    out_dir = Path(out or cfg.out)
    rows = []
    for seed in cfg.seeds:
        state = run_seed(cfg, seed)
        rows.extend(metric_rows(cfg, state, cfg.protocol.delay_days))
        log = io.StringIO()
        write_supervision_log((state.supervision[k] for k in sorted(state.supervision)), log)
        _atomic_write(out_dir / f"supervision_seed{seed}.jsonl", log.getvalue())
        das = io.StringIO()
        write_das_trace(state.das_trace, das)
        _atomic_write(out_dir / f"das_trace_seed{seed}.csv", das.getvalue())
        for traffic in range(cfg.stream.n_traffics):
            buf = io.StringIO()
            write_trace(
                [row for (mode, t), res in state.results.items() if t == traffic for row in res.trace], buf
            )
            _atomic_write(out_dir / f"vm_trace_seed{seed}_traffic{traffic}.csv", buf.getvalue())
    _atomic_write(out_dir / "metrics.csv", _csv_text(METRIC_HEADER, rows))
    return rows, out_dir


STALENESS_HEADER = ["delay", "mode", "mean_ne", "se_ne", "n_seeds"]


def staleness_config(cfg: ExperimentConfig, max_delay: int) -> ExperimentConfig:
    """Enough teacher days that every delay still has a published snapshot."""
    if max_delay < 1:
        raise ConfigError("max_delay must be >= 1")
    if cfg.protocol.fm_days <= max_delay:
        raise ConfigError(
            f"protocol.fm_days={cfg.protocol.fm_days} must exceed max_delay={max_delay}"
        )
    return cfg


def staleness_default(max_delay: int = 5, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """``base`` stretched to ``max_delay + 1`` teacher days plus four VM days."""
    base = ExperimentConfig() if base is None else base
    fm_days = max_delay + 1
    return replace(
        base,
        stream=replace(base.stream, n_days=fm_days + 4),
        protocol=replace(base.protocol, fm_days=fm_days),
    ).validate()


def cmd_staleness(cfg: ExperimentConfig, max_delay: int = 5,
                  modes=(DistillMode.AH, DistillMode.AH_PLUS_SA),
                  out: str | os.PathLike | None = None) -> tuple[list[list], list[list]]:
    """NE per delay, with and without the adapter; FM trained once per seed."""
    staleness_config(cfg, max_delay)
    rows = []
    for seed in cfg.seeds:
        data = prepare_seed(cfg, seed)
        for delay in range(max_delay + 1):
            state = run_seed(cfg, seed, data=data, delay_days=delay, modes=modes)
            rows.extend(metric_rows(cfg, state, delay))
    summary = []
    for delay in range(max_delay + 1):
        sub = [r for r in rows if r[1] == delay]
        for mode, vals in mean_by_mode(sub, "ne").items():
            se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
            summary.append([delay, mode, _f(vals.mean()), _f(se), len(vals)])
    if out is not None:
        _atomic_write(Path(out) / "staleness_runs.csv", _csv_text(METRIC_HEADER, rows))
        _atomic_write(Path(out) / "staleness.csv", _csv_text(STALENESS_HEADER, summary))
    return rows, summary


def staleness_curves(summary: list[list]) -> dict[str, list[float]]:
    curves: dict[str, dict[int, float]] = {}
    for delay, mode, mean, _, _ in summary:
        curves.setdefault(mode, {})[delay] = float(mean)
    return {m: [c[d] for d in sorted(c)] for m, c in curves.items()}


SWEEP_HEADER = ["loss_weight", "label_scale", "grad_scale", "mean_ne_gain_pct", "se", "n_seeds"]


def cmd_sweep(cfg: ExperimentConfig, grid, mode=DistillMode.AH,
              out: str | os.PathLike | None = None) -> list[list]:
    """NE gain over NoDistill for each ``(w, alpha, beta)`` cell, paired seeds."""
    grid = [tuple(map(float, c)) for c in grid]
    if not grid:
        raise ConfigError("sweep grid is empty")
    datas = {}
    supervision = {}
    baseline = {}
    for seed in cfg.seeds:
        datas[seed] = prepare_seed(cfg, seed)
        supervision[seed], _ = run_das(cfg, datas[seed], cfg.protocol.delay_days)
        res = train_vms(cfg, seed, datas[seed], supervision[seed], modes=(DistillMode.NO_DISTILL,))
        baseline[seed] = {t: ne(r.window(test_days(cfg))) for (_, t), r in res.items()}
    table = []
    for w, a, b in grid:
        cell = replace(cfg, distill=replace(cfg.distill, loss_weight=w, label_scale=a, grad_scale=b))
        gains = []
        for seed in cfg.seeds:
            res = train_vms(cell, seed, datas[seed], supervision[seed], modes=(mode,))
            gains.append(np.mean([
                ne_gain_pct(ne(r.window(test_days(cfg))), baseline[seed][t]) for (_, t), r in res.items()
            ]))
        g = np.array(gains)
        se = float(g.std(ddof=1) / math.sqrt(len(g))) if len(g) > 1 else math.nan
        table.append([w, a, b, _f(g.mean()), _f(se), len(g)])
    if out is not None:
        _atomic_write(Path(out) / "sweep.csv", _csv_text(SWEEP_HEADER, table))
    return table


def capacity_check(cfg: ExperimentConfig) -> None:
    rng = seeded_rng(0)
    fm = init_fm(rng, teacher_dim(cfg), cfg.models.fm_hidden)
    vm = init_vm(rng, cfg.stream.feature_dim, cfg.models.vm_backbone, cfg.models.vm_head_hidden)
    check_capacity(fm, [vm], cfg.models.capacity_ratio)
