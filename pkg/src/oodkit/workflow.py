"""Glue between the phases: genome-driven preprocessing, detector bundles,
stream scoring, and the train/calibrate/evaluate loop that the GA fitness
function and the CLI both drive."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import imaging
from .gasearch import BVAE, GRAY, Genome, OPTFLOW
from .imaging import Image
from .network import DetectorModel, TrainOpts, bvae_spec, of_encoder_spec, train
from .network.model import VAR
from .oodcore import (
    CalibrationSet,
    DetectorState,
    PostprocessConfig,
    auroc,
    build_calibration,
    check_precision_match,
    harmonic_fitness,
    score_frame,
)
from .optflow import FarnebackParams, farneback_flow, stack_flows


def preprocess_bvae(img: Image, genome: Genome) -> np.ndarray:
    """Genome-tuned preprocessing: color conversion, resize, scale to [0,1]."""
    if genome.color == GRAY:
        img = imaging.to_grayscale(img)
    h, w = genome.size
    img = imaging.resize(img, w, h, genome.interpolation)
    return img.pixels.astype(np.float32).transpose(2, 0, 1) / 255.0


@dataclass
class FlowHistory:
    """Streaming state of the flow frontend: previous frame and recent flows."""

    depth: int
    prev: Optional[Image] = None
    flows: deque = field(default_factory=deque)


def of_preprocess_step(img: Image, genome: Genome, fb: FarnebackParams,
                       hist: FlowHistory, crop_box=None):
    """One frame through the flow frontend: resize, sharpen, crop, dense flow
    against the previous frame, then channel stacking. Returns (u_stack,
    v_stack) or None while the history is warming up."""
    h, w = genome.size
    frame = imaging.resize(img, w, h, genome.interpolation)
    frame = imaging.sharpen(frame)
    if crop_box is not None:
        frame = imaging.crop(frame, *crop_box)
    frame = imaging.to_grayscale(frame)
    if hist.prev is not None:
        flow = farneback_flow(hist.prev, frame, fb)
        hist.flows.append(flow)
        while len(hist.flows) > hist.depth:
            hist.flows.popleft()
    hist.prev = frame
    if len(hist.flows) < hist.depth:
        return None
    return stack_flows(hist.flows, hist.depth)


@dataclass
class BvaeBundle:
    """Everything one image-detector deployment needs."""

    genome: Genome
    model: DetectorModel
    calib: CalibrationSet
    postprocess: PostprocessConfig

    def __post_init__(self):
        check_precision_match(self.model, self.calib)

    @property
    def family(self):
        return BVAE

    @property
    def precision(self):
        return self.model.precision


@dataclass
class FlowBundle:
    """Flow-detector deployment: twin encoders with their own calibrations."""

    genome: Genome
    model_u: DetectorModel
    model_v: DetectorModel
    calib_u: CalibrationSet
    calib_v: CalibrationSet
    postprocess: PostprocessConfig
    farneback: FarnebackParams = FarnebackParams()
    crop_box: Optional[tuple] = None

    def __post_init__(self):
        check_precision_match(self.model_u, self.calib_u)
        check_precision_match(self.model_v, self.calib_v)

    @property
    def family(self):
        return OPTFLOW

    @property
    def precision(self):
        return self.model_u.precision


def combine_scores(s_u: float, s_v: float, mode: str) -> float:
    if mode == "max":
        return max(s_u, s_v)
    return 0.5 * (s_u + s_v)


def score_bvae_stream(bundle: BvaeBundle, images) -> np.ndarray:
    """Per-frame scores of one stream; fresh detector state."""
    state = DetectorState(window=bundle.postprocess.window)
    scores = []
    for img in images:
        latent = bundle.model.encode(preprocess_bvae(img, bundle.genome))
        state, s = score_frame(state, latent, bundle.calib, bundle.postprocess)
        scores.append(s)
    return np.asarray(scores)


def score_flow_stream(bundle: FlowBundle, images) -> np.ndarray:
    """Per-frame scores of one frame sequence; warm-up frames are skipped."""
    hist = FlowHistory(depth=bundle.genome.flow_depth)
    state_u = DetectorState(window=bundle.postprocess.window)
    state_v = DetectorState(window=bundle.postprocess.window)
    scores = []
    for img in images:
        stacks = of_preprocess_step(img, bundle.genome, bundle.farneback, hist,
                                    bundle.crop_box)
        if stacks is None:
            continue
        u_stack, v_stack = stacks
        lat_u = bundle.model_u.encode(u_stack)
        lat_v = bundle.model_v.encode(v_stack)
        state_u, s_u = score_frame(state_u, lat_u, bundle.calib_u, bundle.postprocess)
        state_v, s_v = score_frame(state_v, lat_v, bundle.calib_v, bundle.postprocess)
        scores.append(combine_scores(s_u, s_v, bundle.postprocess.combine))
    return np.asarray(scores)


def evaluate_streams(score_stream_fn, streams: dict) -> tuple:
    """Per-factor AUROC of OOD streams against the 'id' streams, plus the
    harmonic-mean fitness. streams: partition name -> list of frame lists."""
    if "id" not in streams:
        raise ValueError("streams must include an 'id' partition")
    per_stream = {name: [score_stream_fn(seq) for seq in seqs]
                  for name, seqs in streams.items()}
    id_scores = np.concatenate(per_stream["id"])
    factor_auroc = {}
    for name, chunks in per_stream.items():
        if name == "id":
            continue
        factor_auroc[name] = auroc(id_scores, np.concatenate(chunks))
    fitness = harmonic_fitness(list(factor_auroc.values())) if factor_auroc else 0.0
    return factor_auroc, fitness


# ---------------------------------------------------------------------------
# Phase 2/3 loops

@dataclass
class BvaeTrainContext:
    """Data and budgets needed to take any genome to a scored detector."""

    train_images: list
    calib_images: list
    test_streams: dict                  # partition -> list of Image streams
    opts: TrainOpts = TrainOpts()
    postprocess: PostprocessConfig = PostprocessConfig()
    n_latent: int = 8
    beta: float = 1e-3
    variance_parametrization: str = VAR


def train_bvae(genome: Genome, ctx: BvaeTrainContext) -> DetectorModel:
    spec = bvae_spec(genome.size[0], genome.size[1],
                     1 if genome.color == GRAY else 3,
                     n_latent=ctx.n_latent, beta=ctx.beta,
                     variance_parametrization=ctx.variance_parametrization)
    data = [preprocess_bvae(img, genome) for img in ctx.train_images]
    meta = {"genome": genome.to_dict()}
    return train(spec, data, ctx.opts, metadata=meta)


def calibrate_bvae(model: DetectorModel, genome: Genome, calib_images,
                   cfg: PostprocessConfig, checksum: str = "") -> CalibrationSet:
    data = [preprocess_bvae(img, genome) for img in calib_images]
    return build_calibration(model, data, cfg, checksum)


def bvae_bundle_for_genome(genome: Genome, ctx: BvaeTrainContext) -> BvaeBundle:
    model = train_bvae(genome, ctx)
    calib = calibrate_bvae(model, genome, ctx.calib_images, ctx.postprocess)
    return BvaeBundle(genome, model, calib, ctx.postprocess)


def bvae_fitness(genome: Genome, ctx: BvaeTrainContext):
    """The GA objective: full train/calibrate/evaluate loop for one genome."""
    bundle = bvae_bundle_for_genome(genome, ctx)
    factor_auroc, fitness = evaluate_streams(
        lambda seq: score_bvae_stream(bundle, seq), ctx.test_streams)
    return fitness, factor_auroc


@dataclass
class FlowTrainContext:
    train_sequences: list               # lists of Images (consecutive frames)
    calib_sequences: list
    test_streams: dict                  # partition -> list of Image sequences
    opts: TrainOpts = TrainOpts(epochs=15)
    postprocess: PostprocessConfig = PostprocessConfig()
    farneback: FarnebackParams = FarnebackParams()
    n_latent: int = 12
    beta: float = 1e-3
    crop_box: Optional[tuple] = None


def flow_stacks_for_sequences(genome: Genome, sequences, fb: FarnebackParams,
                              crop_box=None):
    """All (u_stack, v_stack) pairs produced by the frontend over sequences."""
    us, vs = [], []
    for seq in sequences:
        hist = FlowHistory(depth=genome.flow_depth)
        for img in seq:
            stacks = of_preprocess_step(img, genome, fb, hist, crop_box)
            if stacks is not None:
                us.append(stacks[0])
                vs.append(stacks[1])
    return us, vs


def flow_bundle_for_genome(genome: Genome, ctx: FlowTrainContext) -> FlowBundle:
    train_u, train_v = flow_stacks_for_sequences(genome, ctx.train_sequences,
                                                 ctx.farneback, ctx.crop_box)
    if not train_u:
        raise ValueError("no flow stacks produced; sequences shorter than flow depth?")
    hw = train_u[0].shape[1:]
    spec = of_encoder_spec(hw[0], hw[1], genome.flow_depth,
                           n_latent=ctx.n_latent, beta=ctx.beta)
    meta = {"genome": genome.to_dict()}
    model_u = train(spec, train_u, ctx.opts, metadata=dict(meta, branch="u"))
    model_v = train(spec, train_v, ctx.opts, metadata=dict(meta, branch="v"))
    calib_u_data, calib_v_data = flow_stacks_for_sequences(
        genome, ctx.calib_sequences, ctx.farneback, ctx.crop_box)
    calib_u = build_calibration(model_u, calib_u_data, ctx.postprocess)
    calib_v = build_calibration(model_v, calib_v_data, ctx.postprocess)
    return FlowBundle(genome, model_u, model_v, calib_u, calib_v, ctx.postprocess,
                      ctx.farneback, ctx.crop_box)


def flow_fitness(genome: Genome, ctx: FlowTrainContext):
    bundle = flow_bundle_for_genome(genome, ctx)
    factor_auroc, fitness = evaluate_streams(
        lambda seq: score_flow_stream(bundle, seq), ctx.test_streams)
    return fitness, factor_auroc


def with_decay(bundle, decay: float):
    """Same bundle with a different CUSUM decay."""
    pp = replace(bundle.postprocess, decay=decay)
    if isinstance(bundle, BvaeBundle):
        return BvaeBundle(bundle.genome, bundle.model, bundle.calib, pp)
    return FlowBundle(bundle.genome, bundle.model_u, bundle.model_v,
                      bundle.calib_u, bundle.calib_v, pp, bundle.farneback,
                      bundle.crop_box)


def sweep_decay(bundle, test_streams: dict, grid) -> tuple:
    """Evaluate fitness per decay value; returns (best_decay, table).
    Ties prefer the smaller decay."""
    grid = list(grid)
    if not grid:
        raise ValueError("decay grid is empty")
    score_fn = score_bvae_stream if isinstance(bundle, BvaeBundle) else score_flow_stream
    table = []
    for d in grid:
        b = with_decay(bundle, d)
        _, fitness = evaluate_streams(lambda seq: score_fn(b, seq), test_streams)
        table.append((float(d), float(fitness)))
    best = max(table, key=lambda df: (df[1], -df[0]))
    return best[0], table
