import numpy as np
import pytest

from rankcount.data import (
    BatchConfig,
    PatchConfig,
    SceneParams,
    Sources,
    assemble_batch,
    draw_side,
    generate_scene,
    load_corpus,
    sample_labeled_patch,
    save_corpus,
)
from rankcount.data import _cycled
from rankcount.density import crop_annotation
from rankcount.rankgen import generate_chain


def scene(seed=0, **kw):
    return generate_scene(SceneParams(**kw), np.random.default_rng(seed), f"s{seed}")


def test_empty_scene():
    s = scene(density=0)
    assert s.annotation.count == 0
    assert s.image.shape == (3, 192, 192)
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0


def test_scene_is_deterministic():
    a, b = scene(7, density=40, perspective=1.0), scene(7, density=40, perspective=1.0)
    assert a.image.tobytes() == b.image.tobytes()
    np.testing.assert_array_equal(a.annotation.points, b.annotation.points)


def test_mean_count_matches_density():
    counts = [scene(seed, density=500).annotation.count for seed in range(20)]
    assert np.mean(counts) == pytest.approx(500, rel=0.05)


def test_exact_count_and_small_scene():
    s = scene(3, height=56, width=56, density=12, exact=True)
    assert s.annotation.count == 12
    assert s.image.shape == (3, 56, 56)


def test_perspective_puts_more_people_near_the_top():
    pts = np.concatenate([scene(i, density=300, perspective=2.0).annotation.points for i in range(5)])
    assert (pts[:, 1] < 96).mean() > 0.6


def test_density_out_of_range():
    with pytest.raises(ValueError):
        scene(density=-1)
    with pytest.raises(ValueError):
        scene(density=5001)


def test_corpus_round_trip(tmp_path):
    scenes = [scene(i, density=10) for i in range(3)]
    save_corpus(tmp_path, [(s.image, s.annotation) for s in scenes])
    back = load_corpus(tmp_path)
    assert [a.image_id for _, a in back] == ["s0", "s1", "s2"]
    # PNG stores 8-bit values
    assert np.abs(back[0][0] - scenes[0].image).max() <= 0.5 / 255 + 1e-6
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "nope")


# -- labeled patches ---------------------------------------------------------
def test_patch_ground_truth_equals_brute_force_count():
    rng = np.random.default_rng(2)
    cfg = PatchConfig(input_size=48, output_stride=8, min_side=40, max_side=160, scales=(0.8, 1.0, 1.25))
    scenes = [scene(i, density=float(10 * i + 5), perspective=1.0) for i in range(10)]
    for n in range(1000):
        s = scenes[n % 10]
        p = sample_labeled_patch(s.image, s.annotation, rng, cfg)
        x0, y0, w, h = p.rect
        pts = s.annotation.points
        brute = int(np.sum((pts[:, 0] > x0) & (pts[:, 0] < x0 + w) & (pts[:, 1] > y0) & (pts[:, 1] < y0 + h)))
        assert p.count == brute
        assert p.gt.grid.sum() == pytest.approx(brute, abs=1e-6)
        assert p.image.shape == (3, 48, 48) and p.gt.grid.shape == (6, 6)


def test_patch_side_bounds():
    rng = np.random.default_rng(0)
    s = scene(0, density=20)
    cfg = PatchConfig(min_side=56, max_side=100)
    sides = [sample_labeled_patch(s.image, s.annotation, rng, cfg).rect[2] for _ in range(300)]
    assert min(sides) >= 56 and max(sides) <= 100
    cfg = PatchConfig(min_side=56, max_side=448)
    sides = [sample_labeled_patch(s.image, s.annotation, rng, cfg).rect[2] for _ in range(100)]
    assert max(sides) <= 192


def test_patch_rejects_tiny_scene():
    s = scene(0, height=40, width=40, density=3)
    with pytest.raises(ValueError, match="minimum patch"):
        sample_labeled_patch(s.image, s.annotation, np.random.default_rng(0), PatchConfig())


def test_draw_side_distributions():
    rng = np.random.default_rng(0)
    for dist in ("uniform", "loguniform"):
        vals = [draw_side(56, 448, rng, dist) for _ in range(2000)]
        assert min(vals) >= 56 and max(vals) <= 448
    with pytest.raises(ValueError):
        draw_side(1, 2, rng, "gamma")


# -- minibatches -------------------------------------------------------------
@pytest.fixture(scope="module")
def sources():
    labeled = [(s.image, s.annotation) for s in (scene(i, density=20) for i in range(6))]
    unl = {f"u{i}": scene(100 + i, density=30).image for i in range(4)}
    rng = np.random.default_rng(1)
    chains = [generate_chain((192, 192), 5, 0.75, 8, rng, image_id=f"u{i % 4}") for i in range(8)]
    return Sources(labeled, chains, unl)


def test_batch_sizes_and_pairs(sources):
    cfg = BatchConfig(PatchConfig(input_size=32, output_stride=4, min_side=40, max_side=120), 25, 5, 5, seed=3)
    b = assemble_batch("counting", sources, cfg, 0)
    assert b.images.shape == (25, 3, 32, 32) and b.gt.shape == (25, 8, 8) and b.pairs is None
    r = assemble_batch("ranking", sources, cfg, 0)
    assert r.images.shape == (25, 3, 32, 32) and len(r.pairs) == 50 and r.pairs.max() < 25
    m = assemble_batch("mixed", sources, cfg, 0)
    assert m.images.shape == (50, 3, 32, 32) and m.n_counting == 25
    assert len(m.pairs) == 50 and m.pairs.min() >= 25
    np.testing.assert_array_equal(m.pairs - 25, r.pairs)
    np.testing.assert_array_equal(m.images[25:], r.images)
    np.testing.assert_array_equal(m.images[:25], b.images)


def test_counting_batch_gt_sums_to_counts(sources):
    cfg = BatchConfig(PatchConfig(input_size=32, output_stride=4, min_side=40, max_side=120), 12, 2, 5)
    b = assemble_batch("counting", sources, cfg, 4)
    np.testing.assert_allclose(b.gt.sum(axis=(1, 2)), b.counts, atol=1e-4)


def test_each_epoch_visits_every_labeled_scene():
    for epoch in range(3):
        assert sorted(_cycled(6, 6 * epoch, 6, 0, 0)) == list(range(6))
    assert _cycled(6, 0, 6, 0, 0) != _cycled(6, 6, 6, 0, 0)


def test_batches_are_pure_functions_of_index(sources):
    cfg = BatchConfig(PatchConfig(input_size=32, output_stride=4, min_side=40, max_side=120), 4, 2, 5, seed=9)
    a, b = assemble_batch("mixed", sources, cfg, 5), assemble_batch("mixed", sources, cfg, 5)
    assert a.images.tobytes() == b.images.tobytes()
    assert assemble_batch("mixed", sources, cfg, 6).images.tobytes() != a.images.tobytes()


def test_batch_errors_state_requirements(sources):
    cfg = BatchConfig(PatchConfig(input_size=32, output_stride=4, min_side=40, max_side=120), 4, 20, 5)
    with pytest.raises(ValueError, match="needs 20 chains, available 8"):
        assemble_batch("ranking", sources, cfg, 0)
    with pytest.raises(ValueError, match="available 0"):
        assemble_batch("counting", Sources(), cfg, 0)
    with pytest.raises(ValueError):
        assemble_batch("other", sources, cfg, 0)


def test_ranking_rows_follow_true_count_order(sources):
    cfg = BatchConfig(PatchConfig(input_size=32, output_stride=4), 4, 8, 5)
    ann = scene(100, density=30).annotation
    chain = sources.chains[0]
    counts = [crop_annotation(ann, r).count for r in chain.rects]
    assert counts == sorted(counts, reverse=True)
    assert len(assemble_batch("ranking", sources, cfg, 0).images) == 40
