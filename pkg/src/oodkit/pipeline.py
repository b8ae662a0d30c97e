"""In-process callback-graph executors.

A detector is split into stages connected by FIFO topics and driven by a frame
source at a target rate, under one of three scheduling semantics:

  CHAIN_MT - one dedicated worker per stage, queues between stages (pipelined);
  MONO_ST  - a single worker executes every ready callback FIFO;
  MONO_MT  - a shared pool executes ready callbacks, except stateful stages,
             which stay mutually exclusive and in frame order.

Score sequences are bit-identical across the three semantics; only timing and
throughput differ.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .oodcore import DetectorState, score_frame
from .workflow import (
    BvaeBundle,
    FlowBundle,
    FlowHistory,
    combine_scores,
    of_preprocess_step,
    preprocess_bvae,
)

CHAIN_MT = "chain_mt"
MONO_ST = "mono_st"
MONO_MT = "mono_mt"
EXECUTOR_KINDS = (CHAIN_MT, MONO_ST, MONO_MT)


@dataclass(frozen=True)
class ExecutorKind:
    kind: str
    workers: int = 2

    def __post_init__(self):
        if self.kind not in EXECUTOR_KINDS:
            raise ValueError(f"unknown executor kind {self.kind!r}")
        if self.kind == MONO_MT and self.workers < 2:
            raise ValueError("mono_mt needs at least 2 workers")


@dataclass
class Stage:
    """One callback. Pure stages take fn(payload); stateful stages take
    fn(payload, state) with per-run state from state_factory. Join stages
    receive a tuple of payloads, one per incoming edge, and run in frame
    order like stateful stages."""

    name: str
    fn: Callable
    stateful: bool = False
    state_factory: Optional[Callable] = None
    join: bool = False

    def __post_init__(self):
        if self.stateful and self.state_factory is None:
            raise ValueError(f"stateful stage {self.name!r} needs a state_factory")


class CallbackGraph:
    """Acyclic stage graph with a single source and a single sink."""

    def __init__(self, stages, edges):
        self.stages = list(stages)
        self.edges = [tuple(e) for e in edges]
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")
        self.by_name = {s.name: s for s in self.stages}
        for a, b in self.edges:
            if a not in self.by_name or b not in self.by_name:
                raise ValueError(f"edge ({a!r}, {b!r}) references unknown stage")
        self.successors = {n: [b for a, b in self.edges if a == n] for n in names}
        self.predecessors = {n: [a for a, b in self.edges if b == n] for n in names}
        sources = [n for n in names if not self.predecessors[n]]
        sinks = [n for n in names if not self.successors[n]]
        if len(sources) != 1 or len(sinks) != 1:
            raise ValueError(f"need exactly one source and one sink, got {sources}/{sinks}")
        self.source = sources[0]
        self.sink = sinks[0]
        self._check_acyclic()
        for s in self.stages:
            if s.join and len(self.predecessors[s.name]) < 2:
                raise ValueError(f"join stage {s.name!r} needs >= 2 inputs")

    def _check_acyclic(self):
        indeg = {n: len(self.predecessors[n]) for n in self.by_name}
        ready = [n for n, d in indeg.items() if d == 0]
        seen = 0
        while ready:
            n = ready.pop()
            seen += 1
            for m in self.successors[n]:
                indeg[m] -= 1
                if indeg[m] == 0:
                    ready.append(m)
        if seen != len(self.by_name):
            raise ValueError("callback graph contains a cycle")


class _Runner:
    """Per-run wrapper of one stage: owns its state and, for stateful or join
    stages, enforces mutually exclusive execution in frame order."""

    def __init__(self, stage: Stage, n_inputs: int):
        self.stage = stage
        self.n_inputs = max(n_inputs, 1)
        self.state = stage.state_factory() if stage.state_factory else None
        self.ordered = stage.stateful or stage.join or self.n_inputs > 1
        self.lock = threading.Lock()
        self.next_seq = 0
        self.parts = {}

    def submit(self, seq: int, payload, branch: int):
        """Returns the list of (seq, output) that became ready (may be empty)."""
        if not self.ordered:
            return [(seq, self.stage.fn(payload))]
        with self.lock:
            self.parts.setdefault(seq, {})[branch] = payload
            done = []
            while (self.next_seq in self.parts
                   and len(self.parts[self.next_seq]) == self.n_inputs):
                parts = self.parts.pop(self.next_seq)
                args = tuple(parts[b] for b in range(self.n_inputs)) \
                    if self.n_inputs > 1 else parts[0]
                if self.stage.stateful:
                    out = self.stage.fn(args, self.state)
                else:
                    out = self.stage.fn(args)
                done.append((self.next_seq, out))
                self.next_seq += 1
            return done


class _Clock:
    monotonic = staticmethod(time.monotonic)
    sleep = staticmethod(time.sleep)


@dataclass
class RunStats:
    scores: list
    ingress: np.ndarray
    done: np.ndarray
    pump_t0: float = 0.0
    pump_t1: float = 0.0
    backlog_samples: list = field(default_factory=list)


def _execute(graph: CallbackGraph, kind: ExecutorKind, source, clock=None) -> RunStats:
    clock = clock or _Clock
    frames = list(source["frames"]) if isinstance(source, dict) else list(source.frames)
    rate = source.get("rate_fps") if isinstance(source, dict) else source.rate_fps
    n = len(frames)
    if n == 0:
        raise ValueError("empty frame source")

    runners = {s.name: _Runner(s, len(graph.predecessors[s.name])) for s in graph.stages}
    branch_of = {}
    for name in graph.by_name:
        for i, p in enumerate(graph.predecessors[name]):
            branch_of[(p, name)] = i

    ingress = np.zeros(n)
    done_ts = np.zeros(n)
    results = [None] * n
    done_count = [0]
    done_lock = threading.Lock()
    all_done = threading.Event()
    errors = []
    stats = RunStats(results, ingress, done_ts)

    def record(seq, value):
        results[seq] = value
        done_ts[seq] = clock.monotonic()
        with done_lock:
            done_count[0] += 1
            if done_count[0] == n:
                all_done.set()

    def fail(exc):
        errors.append(exc)
        all_done.set()

    if kind.kind == CHAIN_MT:
        stage_q = {s.name: queue.Queue() for s in graph.stages}

        def route(name, seq, out):
            succ = graph.successors[name]
            if not succ:
                record(seq, out)
            else:
                for m in succ:
                    stage_q[m].put((seq, out, branch_of[(name, m)]))

        def stage_loop(name):
            runner = runners[name]
            stops = 0
            while True:
                item = stage_q[name].get()
                if item is None:
                    stops += 1
                    if stops >= runner.n_inputs:
                        for m in graph.successors[name]:
                            stage_q[m].put(None)
                        return
                    continue
                if all_done.is_set() and errors:
                    continue  # drain after failure
                seq, payload, branch = item
                try:
                    outputs = runner.submit(seq, payload, branch)
                except Exception as exc:  # noqa: BLE001 - reported to the caller
                    fail(exc)
                    continue
                for oseq, out in outputs:
                    route(name, oseq, out)

        threads = [threading.Thread(target=stage_loop, args=(s.name,), daemon=True)
                   for s in graph.stages]
        backlog_fn = lambda: sum(q.qsize() for q in stage_q.values())  # noqa: E731
        emit = lambda seq, f: stage_q[graph.source].put((seq, f, 0))  # noqa: E731
        finish = lambda: stage_q[graph.source].put(None)  # noqa: E731
    else:
        # monolithic executors: per-stage FIFO topics; each worker pass sweeps
        # the stages in registration order and executes one ready callback per
        # stage (the collected-set semantics of a shared-executor node)
        n_workers = 1 if kind.kind == MONO_ST else kind.workers
        pending = {s.name: [] for s in graph.stages}
        cv = threading.Condition()
        order = [s.name for s in graph.stages]

        def route(name, seq, out):
            succ = graph.successors[name]
            if not succ:
                record(seq, out)
            else:
                with cv:
                    for m in succ:
                        pending[m].append((seq, out, branch_of[(name, m)]))
                    cv.notify_all()

        def worker():
            while not all_done.is_set():
                executed = False
                for name in order:
                    with cv:
                        item = pending[name].pop(0) if pending[name] else None
                    if item is None:
                        continue
                    seq, payload, branch = item
                    try:
                        outputs = runners[name].submit(seq, payload, branch)
                    except Exception as exc:  # noqa: BLE001 - reported to the caller
                        fail(exc)
                        return
                    for oseq, out in outputs:
                        route(name, oseq, out)
                    executed = True
                if not executed:
                    with cv:
                        if not any(pending.values()) and not all_done.is_set():
                            cv.wait(timeout=0.005)

        threads = [threading.Thread(target=worker, daemon=True) for _ in range(n_workers)]
        backlog_fn = lambda: sum(len(q) for q in pending.values())  # noqa: E731

        def emit(seq, f):
            with cv:
                pending[graph.source].append((seq, f, 0))
                cv.notify_all()

        finish = lambda: None  # noqa: E731

    watcher = threading.Thread(
        target=_watch_backlog, args=(stats, backlog_fn, all_done, clock), daemon=True)
    for t in threads:
        t.start()
    watcher.start()

    stats.pump_t0 = clock.monotonic()
    t0 = stats.pump_t0
    for seq, frame in enumerate(frames):
        if rate:
            target = t0 + seq / rate
            now = clock.monotonic()
            if target > now:
                clock.sleep(target - now)
        ingress[seq] = clock.monotonic()
        emit(seq, frame)
    stats.pump_t1 = clock.monotonic()
    finish()

    all_done.wait()
    if kind.kind != CHAIN_MT:
        with cv:
            cv.notify_all()
    if kind.kind == CHAIN_MT and errors:
        # unblock stage threads waiting on their queues
        for q in stage_q.values():
            q.put(None)
            q.put(None)
    for t in threads:
        t.join()
    watcher.join()
    if errors:
        raise errors[0]
    return stats


def _watch_backlog(stats: RunStats, backlog_fn, all_done: threading.Event, clock):
    while not all_done.is_set():
        stats.backlog_samples.append((clock.monotonic(), backlog_fn()))
        all_done.wait(0.02)


@dataclass(frozen=True)
class TimingReport:
    """Per-frame response times (seconds) with summary statistics, after the
    warm-up discard."""

    response_times: np.ndarray
    warmup_discarded: int
    count: int
    mean: float
    min: float
    q1: float
    median: float
    q3: float
    p95: float
    p99: float
    max: float
    environment: dict

    @classmethod
    def from_samples(cls, rts: np.ndarray, warmup_discarded: int):
        if rts.size == 0:
            raise ValueError("no timed frames after warm-up discard")
        if np.any(rts <= 0):
            raise ValueError("response times must be positive")
        q = np.percentile(rts, [25, 50, 75, 95, 99])
        env = {"cpu_count": os.cpu_count(),
               "note": "wall-clock on a shared host; absolute values are indicative"}
        return cls(rts, warmup_discarded, int(rts.size), float(rts.mean()),
                   float(rts.min()), float(q[0]), float(q[1]), float(q[2]),
                   float(q[3]), float(q[4]), float(rts.max()), env)


def run_stream(graph: CallbackGraph, kind: ExecutorKind, source, clock=None,
               warmup: int = 20):
    """Drive the graph over the source frames; returns (scores, TimingReport).

    scores is the per-frame emission sequence in frame order (None for frames
    the detector skipped while its flow history warmed up)."""
    stats = _execute(graph, kind, source, clock)
    n = len(stats.scores)
    if n <= warmup:
        raise ValueError(f"need more than warmup={warmup} frames, got {n}")
    rts = (stats.done - stats.ingress)[warmup:]
    return list(stats.scores), TimingReport.from_samples(rts, warmup)


@dataclass(frozen=True)
class ThroughputEntry:
    rate_fps: float
    sustained_fps: float
    backlog_slope: float
    drops: int
    sustained: bool


@dataclass(frozen=True)
class ThroughputReport:
    entries: tuple

    def knee(self):
        """First offered rate the graph fails to sustain, or None."""
        for e in self.entries:
            if not e.sustained:
                return e.rate_fps
        return None


def throughput_sweep(graph: CallbackGraph, kind: ExecutorKind, rates,
                     duration_s: float, frame_factory, clock=None) -> ThroughputReport:
    """Drive the graph at each offered rate for duration_s; sustained output
    is measured over the trailing half of the drive window, the backlog slope
    over the drive window. Queues are unbounded, so drops are always zero and
    overload shows up as backlog growth."""
    rates = list(rates)
    if any(r <= 0 for r in rates) or sorted(rates) != rates:
        raise ValueError("rates must be positive and ascending")
    entries = []
    for rate in rates:
        n = max(int(np.ceil(rate * duration_s)), 2)
        frames = [frame_factory(i) for i in range(n)]
        stats = _execute(graph, kind, {"frames": frames, "rate_fps": rate}, clock)
        # trailing 50% of the output span: under overload this covers the
        # saturated drain, so the measurement converges on service capacity
        t_last = float(stats.done.max())
        t_half = 0.5 * (stats.pump_t0 + t_last)
        in_window = int(np.sum(stats.done > t_half))
        sustained = min(in_window / max(t_last - t_half, 1e-9), float(rate))
        samples = [(t, b) for t, b in stats.backlog_samples if t <= stats.pump_t1]
        if len(samples) >= 2:
            ts = np.array([s[0] for s in samples])
            bs = np.array([s[1] for s in samples])
            slope = float(np.polyfit(ts - ts[0], bs, 1)[0])
        else:
            slope = 0.0
        ok = sustained >= 0.95 * rate and slope <= max(0.05 * rate, 1.0)
        entries.append(ThroughputEntry(float(rate), float(sustained), slope, 0, bool(ok)))
    return ThroughputReport(tuple(entries))


# ---------------------------------------------------------------------------
# Detector graphs

def build_graph(bundle) -> CallbackGraph:
    """Stage decomposition of a detector bundle: a three-stage chain for the
    image detector; preprocessing, twin encoders, join, and post-processing
    for the flow detector."""
    pp = bundle.postprocess
    if isinstance(bundle, BvaeBundle):
        genome = bundle.genome
        model = bundle.model
        calib = bundle.calib

        def post_fn(latent, state: DetectorState):
            _, s = score_frame(state, latent, calib, pp)
            return s

        stages = [
            Stage("preprocess", lambda img: preprocess_bvae(img, genome)),
            Stage("encode", model.encode),
            Stage("postprocess", post_fn, stateful=True,
                  state_factory=lambda: DetectorState(window=pp.window)),
        ]
        return CallbackGraph(stages, [("preprocess", "encode"), ("encode", "postprocess")])

    if isinstance(bundle, FlowBundle):
        genome = bundle.genome
        fb = bundle.farneback
        crop_box = bundle.crop_box

        def pre_fn(img, hist: FlowHistory):
            return of_preprocess_step(img, genome, fb, hist, crop_box)

        def post_fn(latents, states):
            lat_u, lat_v = latents
            if lat_u is None or lat_v is None:
                return None
            state_u, state_v = states
            _, s_u = score_frame(state_u, lat_u, bundle.calib_u, pp)
            _, s_v = score_frame(state_v, lat_v, bundle.calib_v, pp)
            return combine_scores(s_u, s_v, pp.combine)

        stages = [
            Stage("preprocess", pre_fn, stateful=True,
                  state_factory=lambda: FlowHistory(depth=genome.flow_depth)),
            Stage("encoder_u",
                  lambda st: None if st is None else bundle.model_u.encode(st[0])),
            Stage("encoder_v",
                  lambda st: None if st is None else bundle.model_v.encode(st[1])),
            Stage("join", lambda pair: pair, join=True),
            Stage("postprocess", post_fn, stateful=True,
                  state_factory=lambda: (DetectorState(window=pp.window),
                                         DetectorState(window=pp.window))),
        ]
        edges = [("preprocess", "encoder_u"), ("preprocess", "encoder_v"),
                 ("encoder_u", "join"), ("encoder_v", "join"),
                 ("join", "postprocess")]
        return CallbackGraph(stages, edges)

    raise ValueError(f"cannot build a callback graph from {type(bundle).__name__}")


# ---------------------------------------------------------------------------
# Benchmark matrix

@dataclass(frozen=True)
class BenchConfig:
    n_frames: int = 200
    rate_fps: Optional[float] = 30.0
    warmup: int = 20
    throughput_rates: tuple = ()
    throughput_duration_s: float = 2.0


@dataclass
class BundleSet:
    """One candidate across its quantization levels."""

    name: str
    bundles: dict  # precision -> bundle

    def family(self):
        return next(iter(self.bundles.values())).family


def _stream_auroc(scores, labels):
    from .oodcore import auroc
    pairs = [(s, l) for s, l in zip(scores, labels) if s is not None]
    ids = [s for s, l in pairs if not l]
    oods = [s for s, l in pairs if l]
    if not ids or not oods:
        return None
    return auroc(ids, oods)


def bench_matrix(bundle_sets, precisions, kinds, frames, labels,
                 cfg: BenchConfig = BenchConfig()):
    """Measure the full (bundle x precision x executor) cross product under an
    identical frame source. Returns a list of row dicts; failed cells carry an
    'error' entry and the run continues. AUROC deltas are relative to the
    first bundle set at f32 (score sequences are executor-invariant, so the
    baseline is computed once)."""
    frames = list(frames)[:cfg.n_frames]
    labels = list(labels)[:cfg.n_frames]
    rows = []
    baseline_auroc = None
    for si, bset in enumerate(bundle_sets):
        for precision in precisions:
            bundle = bset.bundles.get(precision)
            scores = None
            for kind in kinds:
                row = {
                    "bundle": bset.name,
                    "family": bset.family(),
                    "precision": precision,
                    "executor": kind.kind,
                }
                if bundle is None:
                    row["error"] = f"no {precision} bundle"
                    rows.append(row)
                    continue
                g = bundle.genome
                row["genome"] = (f"{g.size[0]}x{g.size[1]}/{g.interpolation}/"
                                 f"{g.color or g.flow_depth}")
                row["input_size"] = f"{g.size[0]}x{g.size[1]}"
                try:
                    graph = build_graph(bundle)
                    scores, report = run_stream(
                        graph, kind, {"frames": frames, "rate_fps": cfg.rate_fps},
                        warmup=cfg.warmup)
                    row.update({
                        "mean_ms": report.mean * 1e3, "min_ms": report.min * 1e3,
                        "q1_ms": report.q1 * 1e3, "median_ms": report.median * 1e3,
                        "q3_ms": report.q3 * 1e3, "p95_ms": report.p95 * 1e3,
                        "p99_ms": report.p99 * 1e3, "max_ms": report.max * 1e3,
                    })
                    row["auroc"] = _stream_auroc(scores, labels)
                    if si == 0 and precision == "f32" and baseline_auroc is None:
                        baseline_auroc = row["auroc"]
                    if row["auroc"] is not None and baseline_auroc is not None:
                        row["auroc_delta_vs_baseline"] = row["auroc"] - baseline_auroc
                    for rate in cfg.throughput_rates:
                        tp = throughput_sweep(graph, kind, [rate],
                                              cfg.throughput_duration_s,
                                              lambda i: frames[i % len(frames)])
                        row[f"sustained_fps_at_{rate:g}"] = tp.entries[0].sustained_fps
                except Exception as exc:  # noqa: BLE001 - cell failure is data
                    row["error"] = f"{type(exc).__name__}: {exc}"
                rows.append(row)
    return rows


BENCH_CSV_COLUMNS = [
    "bundle", "family", "genome", "precision", "executor", "input_size",
    "mean_ms", "min_ms", "q1_ms", "median_ms", "q3_ms", "p95_ms", "p99_ms",
    "max_ms", "auroc", "auroc_delta_vs_baseline", "error",
]


def bench_rows_to_csv(rows) -> str:
    extra = sorted({k for r in rows for k in r if k.startswith("sustained_fps_at_")})
    cols = BENCH_CSV_COLUMNS + extra
    lines = [",".join(cols)]
    for r in rows:
        vals = []
        for c in cols:
            v = r.get(c)
            if v is None:
                vals.append("")
            elif isinstance(v, float):
                vals.append(f"{v:.6g}")
            else:
                vals.append(str(v).replace(",", ";"))
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"
