import numpy as np
import pytest

from oodkit.dataset import (
    DatasetConfig,
    bvae_test_streams,
    generate_dataset,
    of_sequences,
    of_test_streams,
    split_images,
)
from oodkit.gasearch import Genome
from oodkit.imaging import SceneParams
from oodkit.network import TrainOpts
from oodkit.oodcore import PostprocessConfig
from oodkit.optflow import FarnebackParams
from oodkit.workflow import (
    BvaeTrainContext,
    FlowHistory,
    FlowTrainContext,
    bvae_bundle_for_genome,
    bvae_fitness,
    evaluate_streams,
    flow_bundle_for_genome,
    of_preprocess_step,
    preprocess_bvae,
    score_bvae_stream,
    score_flow_stream,
    sweep_decay,
    with_decay,
)

SCENE = SceneParams(width=32, height=32, shift_per_frame=2)


@pytest.fixture(scope="module")
def bvae_data():
    cfg = DatasetConfig(scenes=2, runs=3, frames_per_run=9, seed=3, scene=SCENE)
    return generate_dataset(cfg)


@pytest.fixture(scope="module")
def bvae_ctx(bvae_data):
    rows, images = bvae_data
    return BvaeTrainContext(
        train_images=split_images(rows, images, "train"),
        calib_images=split_images(rows, images, "calib"),
        test_streams=bvae_test_streams(rows, images),
        opts=TrainOpts(epochs=2, batch_size=16, seed=0),
        postprocess=PostprocessConfig(decay=0.1),
        n_latent=4, beta=1e-4)


def test_preprocess_bvae_shapes(bvae_data):
    rows, images = bvae_data
    img = images[rows[0].path]
    g_rgb = Genome("bvae", (16, 16), "bilinear", color="rgb")
    g_gray = Genome("bvae", (12, 12), "nearest", color="gray")
    a = preprocess_bvae(img, g_rgb)
    b = preprocess_bvae(img, g_gray)
    assert a.shape == (3, 16, 16) and b.shape == (1, 12, 12)
    assert a.dtype == np.float32
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_bvae_fitness_pipeline_deterministic(bvae_ctx):
    genome = Genome("bvae", (16, 16), "bilinear", color="gray")
    f1, fa1 = bvae_fitness(genome, bvae_ctx)
    f2, fa2 = bvae_fitness(genome, bvae_ctx)
    assert f1 == f2 and fa1 == fa2
    assert set(fa1) == {"rain", "brightness"}
    assert 0.0 <= f1 <= 1.0


def test_score_stream_resets_state(bvae_ctx):
    genome = Genome("bvae", (16, 16), "bilinear", color="gray")
    bundle = bvae_bundle_for_genome(genome, bvae_ctx)
    stream = bvae_ctx.test_streams["id"][0]
    a = score_bvae_stream(bundle, stream)
    b = score_bvae_stream(bundle, stream)
    assert np.array_equal(a, b)
    assert len(a) == len(stream)


def test_evaluate_streams_requires_id():
    with pytest.raises(ValueError, match="'id'"):
        evaluate_streams(lambda s: np.zeros(len(s)), {"rain": [[1, 2]]})


def test_constant_scorer_gives_half_auroc(bvae_ctx):
    factor_auroc, fitness = evaluate_streams(
        lambda seq: np.zeros(len(seq)), bvae_ctx.test_streams)
    assert all(v == 0.5 for v in factor_auroc.values())
    assert fitness == 0.5


def test_all_id_partition_scores_near_half(bvae_ctx):
    # evaluating against an "OOD" partition that is actually ID data: no signal
    genome = Genome("bvae", (16, 16), "bilinear", color="gray")
    bundle = bvae_bundle_for_genome(genome, bvae_ctx)
    id_stream = bvae_ctx.test_streams["id"][0]
    half = len(id_stream) // 2
    streams = {"id": [id_stream[:half]], "fake_ood": [id_stream[half:]]}
    factor_auroc, _ = evaluate_streams(
        lambda s: score_bvae_stream(bundle, s), streams)
    assert abs(factor_auroc["fake_ood"] - 0.5) <= 0.2


def test_sweep_decay_single_point_and_tie(bvae_ctx):
    genome = Genome("bvae", (16, 16), "bilinear", color="gray")
    bundle = bvae_bundle_for_genome(genome, bvae_ctx)
    best, table = sweep_decay(bundle, bvae_ctx.test_streams, [0.3])
    assert best == 0.3 and len(table) == 1
    with pytest.raises(ValueError):
        sweep_decay(bundle, bvae_ctx.test_streams, [])
    b2 = with_decay(bundle, 0.7)
    assert b2.postprocess.decay == 0.7
    assert b2.model is bundle.model


def test_of_preprocess_warmup_contract():
    cfg = DatasetConfig(family="optflow", scenes=1, runs=4, frames_per_run=8,
                        seed=2, scene=SCENE)
    rows, images = generate_dataset(cfg)
    seq = of_sequences(rows, images, "train")[0]
    genome = Genome("optflow", (24, 32), "area", flow_depth=3)
    hist = FlowHistory(depth=3)
    fb = FarnebackParams(pyramid_levels=2)
    outs = [of_preprocess_step(img, genome, fb, hist) for img in seq]
    # frame 0 has no flow; flows accumulate until depth 3 is reached at frame 3
    assert outs[0] is None and outs[1] is None and outs[2] is None
    assert outs[3] is not None
    u, v = outs[3]
    assert u.shape == (3, 24, 32) and v.shape == (3, 24, 32)
    assert all(o is not None for o in outs[3:])


def test_flow_bundle_and_scoring_small():
    cfg = DatasetConfig(family="optflow", scenes=2, runs=4, frames_per_run=10,
                        seed=2, scene=SCENE)
    rows, images = generate_dataset(cfg)
    genome = Genome("optflow", (24, 32), "area", flow_depth=2)
    ctx = FlowTrainContext(
        train_sequences=of_sequences(rows, images, "train"),
        calib_sequences=of_sequences(rows, images, "calib"),
        test_streams=of_test_streams(rows, images),
        opts=TrainOpts(epochs=2, batch_size=8, seed=0),
        postprocess=PostprocessConfig(decay=0.1),
        farneback=FarnebackParams(pyramid_levels=2),
        n_latent=4, beta=1e-4)
    bundle = flow_bundle_for_genome(genome, ctx)
    assert bundle.calib_u.precision_tag == "f32"
    scores = score_flow_stream(bundle, ctx.test_streams["id"][0])
    assert len(scores) == 10 - genome.flow_depth  # warm-up frames skipped
    factor_auroc, fitness = evaluate_streams(
        lambda s: score_flow_stream(bundle, s), ctx.test_streams)
    assert set(factor_auroc) == {"rain", "snow"}
    assert 0.0 <= fitness <= 1.0
