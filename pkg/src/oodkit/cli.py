"""Command-line orchestration of the four methodology phases.

Subcommands: dataset-generate, train, calibrate, evaluate, ga-search,
sweep-delta, quantize, bench, throughput, report. A run directory accumulates
the artifacts each phase produces and later phases discover them by layout.

Exit codes: 0 requirements pass, 1 requirements failed, 2 execution error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import (
    ExperimentConfig,
    bucket_from_config,
    default_config,
    load_config,
    save_config,
)
from .dataset import (
    bvae_test_streams,
    generate_dataset,
    load_dataset,
    of_sequences,
    of_test_streams,
    save_dataset,
    split_images,
    validate_manifest,
)
from .gasearch import BVAE, GAConfig, Genome, MemoizedEvaluator, run_ga
from .network import (
    TrainOpts,
    cast_model_f16,
    load_model,
    model_checksum,
    quantize_model,
    save_model,
    train,
)
from .oodcore import CalibrationSet, PostprocessConfig
from .pipeline import (
    BenchConfig,
    BundleSet,
    ExecutorKind,
    bench_matrix,
    bench_rows_to_csv,
    build_graph,
    throughput_sweep,
)
from .workflow import (
    BvaeBundle,
    BvaeTrainContext,
    FlowBundle,
    FlowTrainContext,
    bvae_fitness,
    calibrate_bvae,
    evaluate_streams,
    flow_fitness,
    flow_stacks_for_sequences,
    preprocess_bvae,
    score_bvae_stream,
    score_flow_stream,
    sweep_decay,
    train_bvae,
)

from .network.model import of_encoder_spec


def _run_dir(args) -> Path:
    run = Path(args.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    return run


def _config(args, run: Path) -> ExperimentConfig:
    stored = run / "config.json"
    if args.config:
        cfg = load_config(args.config)
        save_config(cfg, stored)
    elif stored.exists():
        cfg = load_config(stored)
    else:
        cfg = default_config(getattr(args, "family", None) or BVAE)
        save_config(cfg, stored)
    return cfg.validate()


def _state(run: Path) -> dict:
    p = run / "state.json"
    return json.loads(p.read_text()) if p.exists() else {}


def _save_state(run: Path, **updates):
    state = _state(run)
    state.update(updates)
    (run / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def _postprocess(cfg: ExperimentConfig, run: Path) -> PostprocessConfig:
    state = _state(run)
    pp = cfg.postprocess
    if "delta" in state:
        from dataclasses import replace
        pp = replace(pp, decay=float(state["delta"]))
    return pp


def _dataset(run: Path):
    ds_dir = run / "dataset"
    if not (ds_dir / "manifest.jsonl").exists():
        raise FileNotFoundError(f"no dataset in {ds_dir}; run dataset-generate first")
    return load_dataset(ds_dir)


def _model_paths(run: Path, family: str, precision: str):
    mdir = run / "models"
    if family == BVAE:
        return [mdir / f"main_{precision}.oodm"]
    return [mdir / f"main_u_{precision}.oodm", mdir / f"main_v_{precision}.oodm"]


def _calib_paths(run: Path, family: str, precision: str):
    cdir = run / "calib"
    if family == BVAE:
        return [cdir / f"main_{precision}.csv"]
    return [cdir / f"main_u_{precision}.csv", cdir / f"main_v_{precision}.csv"]


def _load_bundle(run: Path, cfg: ExperimentConfig, precision: str):
    models = []
    for p in _model_paths(run, cfg.family, precision):
        if not p.exists():
            raise FileNotFoundError(f"missing model {p}; run train/quantize first")
        models.append(load_model(p.read_bytes()))
    calibs = []
    for p in _calib_paths(run, cfg.family, precision):
        if not p.exists():
            raise FileNotFoundError(f"missing calibration {p}; run calibrate first")
        calibs.append(CalibrationSet.from_csv(p.read_text()))
    pp = _postprocess(cfg, run)
    genome = Genome.from_dict(models[0].metadata["genome"])
    if cfg.family == BVAE:
        return BvaeBundle(genome, models[0], calibs[0], pp)
    return FlowBundle(genome, models[0], models[1], calibs[0], calibs[1], pp,
                      cfg.farneback)


def _score_stream_fn(bundle):
    if isinstance(bundle, BvaeBundle):
        return lambda seq: score_bvae_stream(bundle, seq)
    return lambda seq: score_flow_stream(bundle, seq)


def _test_streams(cfg, rows, images):
    return (bvae_test_streams(rows, images) if cfg.family == BVAE
            else of_test_streams(rows, images))


# ---------------------------------------------------------------------------
# Subcommands

def cmd_dataset_generate(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = generate_dataset(cfg.dataset)
    validate_manifest(rows)
    save_dataset(rows, images, run / "dataset")
    counts = {s: sum(r.split == s for r in rows) for s in ("train", "calib", "test")}
    print(f"dataset: {len(rows)} images  train/calib/test = "
          f"{counts['train']}/{counts['calib']}/{counts['test']}")
    return 0


def _genome_from_args(args, cfg) -> Genome:
    if getattr(args, "genome_file", None):
        return Genome.from_dict(json.loads(Path(args.genome_file).read_text()))
    return cfg.genome


def cmd_train(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    genome = _genome_from_args(args, cfg)
    (run / "models").mkdir(exist_ok=True)
    if cfg.family == BVAE:
        ctx = BvaeTrainContext(
            train_images=split_images(rows, images, "train"),
            calib_images=[], test_streams={},
            opts=cfg.train, postprocess=cfg.postprocess,
            n_latent=cfg.n_latent, beta=cfg.beta,
            variance_parametrization=cfg.variance_parametrization)
        model = train_bvae(genome, ctx)
        path = _model_paths(run, BVAE, "f32")[0]
        path.write_bytes(save_model(model))
        print(f"trained {genome.size[0]}x{genome.size[1]} model -> {path} "
              f"(final loss {model.metadata['loss_history'][-1]:.5f})")
    else:
        seqs = of_sequences(rows, images, "train")
        train_u, train_v = flow_stacks_for_sequences(genome, seqs, cfg.farneback)
        hw = train_u[0].shape[1:]
        spec = of_encoder_spec(hw[0], hw[1], genome.flow_depth,
                               n_latent=cfg.n_latent, beta=cfg.beta)
        meta = {"genome": genome.to_dict()}
        for branch, data in (("u", train_u), ("v", train_v)):
            model = train(spec, data, cfg.train, metadata=dict(meta, branch=branch))
            path = run / "models" / f"main_{branch}_f32.oodm"
            path.write_bytes(save_model(model))
            print(f"trained {branch}-encoder -> {path}")
    _save_state(run, genome=genome.to_dict())
    return 0


def _calibrate_family(run, cfg, precision, rows, images):
    (run / "calib").mkdir(exist_ok=True)
    pp = _postprocess(cfg, run)
    models = [load_model(p.read_bytes()) for p in _model_paths(run, cfg.family, precision)]
    genome = Genome.from_dict(models[0].metadata["genome"])
    if cfg.family == BVAE:
        calib = calibrate_bvae(models[0], genome, split_images(rows, images, "calib"),
                               pp, model_checksum(models[0]))
        _calib_paths(run, BVAE, precision)[0].write_text(calib.to_csv())
        return [len(calib)]
    seqs = of_sequences(rows, images, "calib")
    data_u, data_v = flow_stacks_for_sequences(genome, seqs, cfg.farneback)
    from .oodcore import build_calibration
    counts = []
    for model, data, path in zip(models, (data_u, data_v),
                                 _calib_paths(run, cfg.family, precision)):
        calib = build_calibration(model, data, pp, model_checksum(model))
        path.write_text(calib.to_csv())
        counts.append(len(calib))
    return counts


def cmd_calibrate(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    counts = _calibrate_family(run, cfg, args.precision, rows, images)
    print(f"calibration ({args.precision}): {counts} scores")
    return 0


def cmd_quantize(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    for f32_path, q_path, h_path in zip(
            _model_paths(run, cfg.family, "f32"),
            _model_paths(run, cfg.family, "qint8"),
            _model_paths(run, cfg.family, "f16")):
        model = load_model(f32_path.read_bytes())
        genome = Genome.from_dict(model.metadata["genome"])
        if cfg.family == BVAE:
            calib_inputs = [preprocess_bvae(im, genome)
                            for im in split_images(rows, images, "calib")]
        else:
            seqs = of_sequences(rows, images, "calib")
            data_u, data_v = flow_stacks_for_sequences(genome, seqs, cfg.farneback)
            calib_inputs = data_u if "_u_" in f32_path.name else data_v
        q_path.write_bytes(save_model(quantize_model(model, calib_inputs)))
        h_path.write_bytes(save_model(cast_model_f16(model)))
        print(f"{f32_path.name} -> {q_path.name}, {h_path.name}")
    for precision, recal in sorted(cfg.recalibrate.items()):
        if precision not in cfg.precisions or precision == "f32":
            continue
        if recal:
            counts = _calibrate_family(run, cfg, precision, rows, images)
            print(f"regenerated calibration for {precision}: {counts} scores")
        else:
            for f32_c, target in zip(_calib_paths(run, cfg.family, "f32"),
                                     _calib_paths(run, cfg.family, precision)):
                if not f32_c.exists():
                    raise FileNotFoundError(f"missing {f32_c}; run calibrate first")
                calib = CalibrationSet.from_csv(f32_c.read_text())
                target.write_text(CalibrationSet(calib.scores, precision,
                                                 calib.model_checksum).to_csv())
            print(f"reused f32 calibration scores for {precision}")
    return 0


def cmd_evaluate(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    bundle = _load_bundle(run, cfg, args.precision)
    streams = _test_streams(cfg, rows, images)
    factor_auroc, fitness = evaluate_streams(_score_stream_fn(bundle), streams)
    out = {"precision": args.precision, "fitness": fitness,
           "per_factor_auroc": factor_auroc,
           "decay": bundle.postprocess.decay}
    (run / "eval").mkdir(exist_ok=True)
    (run / "eval" / f"evaluate_{args.precision}.json").write_text(
        json.dumps(out, indent=2, sort_keys=True) + "\n")
    for k, v in sorted(factor_auroc.items()):
        print(f"auroc[{k}] = {v:.4f}")
    print(f"harmonic fitness = {fitness:.4f}")
    return 0


def cmd_sweep_delta(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    bundle = _load_bundle(run, cfg, args.precision)
    streams = _test_streams(cfg, rows, images)
    best, table = sweep_decay(bundle, streams, cfg.delta_grid)
    (run / "sweep").mkdir(exist_ok=True)
    (run / "sweep" / "delta.json").write_text(json.dumps(
        {"best_delta": best, "table": table}, indent=2) + "\n")
    _save_state(run, delta=best)
    for d, f in table:
        marker = " <- best" if d == best else ""
        print(f"delta={d:g}: fitness={f:.4f}{marker}")
    return 0


def cmd_ga_search(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    bucket = bucket_from_config(cfg, args.bucket)
    ga_dir = run / "ga" / args.bucket
    ga_dir.mkdir(parents=True, exist_ok=True)
    opts = TrainOpts(epochs=cfg.ga.train_epochs, batch_size=cfg.train.batch_size,
                     lr=cfg.train.lr, seed=cfg.train.seed)
    if cfg.family == BVAE:
        ctx = BvaeTrainContext(
            train_images=split_images(rows, images, "train"),
            calib_images=split_images(rows, images, "calib"),
            test_streams=bvae_test_streams(rows, images),
            opts=opts, postprocess=_postprocess(cfg, run),
            n_latent=cfg.n_latent, beta=cfg.beta,
            variance_parametrization=cfg.variance_parametrization)
        evaluator = MemoizedEvaluator(lambda g: bvae_fitness(g, ctx))
    else:
        ctx = FlowTrainContext(
            train_sequences=of_sequences(rows, images, "train"),
            calib_sequences=of_sequences(rows, images, "calib"),
            test_streams=of_test_streams(rows, images),
            opts=opts, postprocess=_postprocess(cfg, run),
            farneback=cfg.farneback, n_latent=cfg.n_latent, beta=cfg.beta)
        evaluator = MemoizedEvaluator(lambda g: flow_fitness(g, ctx))

    ga_cfg = GAConfig(population=cfg.ga.population, mutation_rate=cfg.ga.mutation_rate,
                      generations=cfg.ga.generations, elitism=cfg.ga.elitism,
                      tournament_k=cfg.ga.tournament_k, seed=cfg.ga.seed)
    ckpt_path = ga_dir / "checkpoint.json"
    state = json.loads(ckpt_path.read_text()) if ckpt_path.exists() else None
    if state is not None:
        print(f"resuming from checkpoint at generation {state['generation']}")

    def checkpoint(s):
        ckpt_path.write_text(json.dumps(s) + "\n")

    best, history = run_ga(bucket, ga_cfg, evaluator, state=state, checkpoint=checkpoint)
    (ga_dir / "history.csv").write_text(history.to_csv())
    best_fitness = evaluator.cache[best][0]
    (ga_dir / "best_genome.json").write_text(
        json.dumps(dict(best.to_dict(), fitness=best_fitness), indent=2) + "\n")
    fresh = sum(1 for r in history.records if not r.cache_hit)
    print(f"bucket {args.bucket}: best {best.to_dict()} fitness={best_fitness:.4f} "
          f"({fresh} trainings, {len(history.records) - fresh} cache hits)")
    return 0


def _executor_kinds(cfg, args=None):
    workers = cfg.bench.mono_mt_workers
    cap = getattr(args, "workers", None) if args is not None else None
    if cap:
        workers = max(2, min(workers, int(cap)))
    return [ExecutorKind(e, workers=workers) for e in cfg.executors]


def _bench_source(cfg, rows, images):
    """One ID stream followed by one OOD stream, with is_ood labels."""
    streams = _test_streams(cfg, rows, images)
    ood_part = sorted(k for k in streams if k != "id")[0]
    id_frames = streams["id"][0]
    ood_frames = streams[ood_part][0]
    frames = list(id_frames) + list(ood_frames)
    labels = [False] * len(id_frames) + [True] * len(ood_frames)
    return frames, labels


def cmd_bench(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    bundles = {}
    for precision in cfg.precisions:
        try:
            bundles[precision] = _load_bundle(run, cfg, precision)
        except FileNotFoundError as exc:
            print(f"skipping {precision}: {exc}", file=sys.stderr)
    if not bundles:
        raise FileNotFoundError("no bundles available; run train/calibrate/quantize")
    frames, labels = _bench_source(cfg, rows, images)
    bench_cfg = BenchConfig(n_frames=cfg.bench.n_frames, rate_fps=cfg.bench.rate_fps,
                            warmup=cfg.bench.warmup)
    rows_out = bench_matrix([BundleSet("main", bundles)], list(cfg.precisions),
                            _executor_kinds(cfg, args), frames, labels, bench_cfg)
    (run / "bench").mkdir(exist_ok=True)
    (run / "bench" / "bench.csv").write_text(bench_rows_to_csv(rows_out))
    for r in rows_out:
        if "error" in r:
            print(f"{r['precision']}/{r['executor']}: FAILED {r['error']}")
        else:
            print(f"{r['precision']}/{r['executor']}: mean={r['mean_ms']:.1f}ms "
                  f"p95={r['p95_ms']:.1f}ms auroc={r['auroc']:.3f}")
    return 0


def cmd_throughput(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    rows, images = _dataset(run)
    frames, _ = _bench_source(cfg, rows, images)
    lines = ["precision,executor,rate_fps,sustained_fps,backlog_slope,drops,sustained"]
    for precision in cfg.precisions:
        try:
            bundle = _load_bundle(run, cfg, precision)
        except FileNotFoundError:
            continue
        for kind in _executor_kinds(cfg, args):
            graph = build_graph(bundle)
            report = throughput_sweep(graph, kind, list(cfg.bench.throughput_rates),
                                      cfg.bench.throughput_duration_s,
                                      lambda i: frames[i % len(frames)])
            for e in report.entries:
                lines.append(f"{precision},{kind.kind},{e.rate_fps:g},"
                             f"{e.sustained_fps:.3f},{e.backlog_slope:.3f},"
                             f"{e.drops},{int(e.sustained)}")
                print(f"{precision}/{kind.kind}@{e.rate_fps:g}fps: "
                      f"sustained={e.sustained_fps:.1f} ({'ok' if e.sustained else 'backlog'})")
    (run / "bench").mkdir(exist_ok=True)
    (run / "bench" / "throughput.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_report(args):
    run = _run_dir(args)
    cfg = _config(args, run)
    req = cfg.requirements
    gaps = []

    functional = {}
    for precision in cfg.precisions:
        path = run / "eval" / f"evaluate_{precision}.json"
        if not path.exists():
            gaps.append(f"missing evaluation for {precision} (run evaluate)")
            continue
        data = json.loads(path.read_text())
        functional[precision] = {
            "fitness": data["fitness"],
            "per_factor_auroc": data["per_factor_auroc"],
            "pass": data["fitness"] >= req.min_auroc,
        }

    bench_path = run / "bench" / "bench.csv"
    tp_path = run / "bench" / "throughput.csv"
    cells = {}
    if bench_path.exists():
        header, *rows_csv = bench_path.read_text().strip().splitlines()
        cols = header.split(",")
        for line in rows_csv:
            vals = dict(zip(cols, line.split(",")))
            if vals.get("error"):
                continue
            key = (vals["precision"], vals["executor"])
            cells[key] = {"mean_ms": float(vals["mean_ms"])}
    else:
        gaps.append("missing bench results (run bench)")
    if tp_path.exists():
        header, *rows_csv = tp_path.read_text().strip().splitlines()
        cols = header.split(",")
        for line in rows_csv:
            vals = dict(zip(cols, line.split(",")))
            key = (vals["precision"], vals["executor"])
            if key in cells:
                best = max(cells[key].get("max_sustained_fps", 0.0),
                           float(vals["sustained_fps"]) if int(vals["sustained"]) else 0.0)
                cells[key]["max_sustained_fps"] = best
    else:
        gaps.append("missing throughput results (run throughput)")

    cell_rows = []
    nonfunctional_pass = False
    passing = []
    for (precision, executor), c in sorted(cells.items()):
        ok = (c["mean_ms"] <= req.max_response_ms
              and c.get("max_sustained_fps", 0.0) >= req.min_throughput_fps)
        cell_rows.append({"precision": precision, "executor": executor, **c, "pass": ok})
        if ok:
            nonfunctional_pass = True
            if functional.get(precision, {}).get("pass"):
                passing.append({"precision": precision, "executor": executor})

    if gaps:
        verdict = "incomplete"
    elif passing:
        verdict = "pass"
    else:
        verdict = "fail"
    report = {
        "requirements": {"min_auroc": req.min_auroc,
                         "max_response_ms": req.max_response_ms,
                         "min_throughput_fps": req.min_throughput_fps},
        "functional": functional,
        "nonfunctional": {"cells": cell_rows, "pass": nonfunctional_pass},
        "passing_configurations": passing,
        "verdict": verdict,
        "gaps": gaps,
    }
    (run / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"verdict: {verdict}")
    for g in gaps:
        print(f"  gap: {g}")
    for p in passing:
        print(f"  meets all requirements: {p['precision']}/{p['executor']}")
    return {"pass": 0, "fail": 1, "incomplete": 2}[verdict]


def build_parser():
    parser = argparse.ArgumentParser(
        prog="oodkit",
        description="Design, tune, quantize, deploy, and verify deep OOD detectors.")
    parser.add_argument("--run-dir", required=True, help="artifact directory of this run")
    parser.add_argument("--config", help="experiment config JSON (stored into the run dir)")
    parser.add_argument("--workers", type=int,
                        help="cap on concurrent executor workers (mono_mt pool size)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("dataset-generate", help="synthesize the dataset and manifest")

    p = sub.add_parser("train", help="phase 2: train the detector network(s)")
    p.add_argument("--genome-file", help="JSON genome overriding the config preprocessing")

    p = sub.add_parser("calibrate", help="build the conformal calibration set")
    p.add_argument("--precision", default="f32", choices=["f32", "f16", "qint8"])

    p = sub.add_parser("evaluate", help="per-factor AUROC and harmonic fitness")
    p.add_argument("--precision", default="f32", choices=["f32", "f16", "qint8"])

    p = sub.add_parser("ga-search", help="phase 3: search one preprocessing bucket")
    p.add_argument("--bucket", required=True)

    p = sub.add_parser("sweep-delta", help="pick the CUSUM decay by parameter sweep")
    p.add_argument("--precision", default="f32", choices=["f32", "f16", "qint8"])

    sub.add_parser("quantize", help="phase 3: derive qint8 and f16 models")
    sub.add_parser("bench", help="phase 4: response-time matrix over executors")
    sub.add_parser("throughput", help="phase 4: sustained-throughput sweep")
    sub.add_parser("report", help="verdict against the requirements")
    return parser


COMMANDS = {
    "dataset-generate": cmd_dataset_generate,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "evaluate": cmd_evaluate,
    "ga-search": cmd_ga_search,
    "sweep-delta": cmd_sweep_delta,
    "quantize": cmd_quantize,
    "bench": cmd_bench,
    "throughput": cmd_throughput,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(COMMANDS[args.command](args))
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
