"""Acceptance criteria 1-9, one verdict line each in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py``; the toy-scale training
comparison (criterion 7) takes most of the time.
"""

import time

import numpy as np

from conftest import ACCEPTANCE, leaf, numerical_grad
from rankcount.cli import main
from rankcount.data import BatchConfig, PatchConfig, SceneParams, Sources, assemble_batch, generate_scene
from rankcount.density import PointAnnotation, count_from_density, crop_annotation, render_density
from rankcount.evaluation import EvalReport, evaluate, mae_mse
from rankcount.losses import counting_loss, ranking_loss
from rankcount.model import NetConfig, init
from rankcount.rankgen import ChainInfeasible, anchor_region, enumerate_pairs, generate_chain
from rankcount.tensor import Tensor, avg_pool_global, concat, conv2d, relu, softplus, square
from rankcount.trainer import Trainer, make_config, train_counting, train_multitask


def verdict(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


# -- 1. gradient suite ----------------------------------------------------------
GRAD_CASES = {
    "add": (lambda a, b: ((a + b) * a).sum(), [(3, 4), (1, 4)]),
    "mul": (lambda a, b: (a * b).sum(), [(5, 5), (5, 5)]),
    "square": (lambda a: square(a).sum(), [(30,)]),
    "relu": (lambda a: (relu(a) * a).sum(), [(30,)]),
    "softplus": (lambda a: (softplus(a) * a).sum(), [(30,)]),
    "avg_pool": (lambda a: square(avg_pool_global(a)).sum(), [(2, 1, 4, 4)]),
    "index": (lambda a: square(a[np.array([0, 2, 2])]).sum(), [(6,)]),
    "concat": (lambda a, b: square(concat([a, b])).sum(), [(2, 3), (1, 3)]),
    "conv": (lambda x, w, b: square(conv2d(x, w, b, pad=1)).sum(), [(1, 2, 4, 4), (2, 2, 3, 3), (2,)]),
    "conv_stride": (lambda x, w: square(conv2d(x, w, stride=2)).sum(), [(1, 2, 6, 6), (2, 2, 2, 2)]),
    "counting_loss": (lambda p, g: counting_loss(p, g.data), [(3, 1, 3, 3), (3, 3, 3)]),
    "ranking_loss": (lambda c: ranking_loss(c, enumerate_pairs([3, 3]), 0.05), [(6,)]),
}


def test_criterion_1_gradient_suite():
    start = time.time()
    worst = {}
    for name, (fn, shapes) in GRAD_CASES.items():
        for seed in range(20):
            rng = np.random.default_rng(seed)
            arrays = [rng.standard_normal(s) for s in shapes]
            arrays[0] = np.where(np.abs(arrays[0]) < 0.02, 0.1, arrays[0])  # keep relu/hinge away from kinks
            leaves = [leaf(a) for a in arrays]
            fn(*leaves).backward()
            numeric = numerical_grad(lambda: fn(*[Tensor(a) for a in arrays]).item(), arrays)
            err = max(rel_err(t.grad, n) for t, n in zip(leaves, numeric) if t.grad is not None)
            worst[name] = max(worst.get(name, 0.0), err)
    # full network spot check: 50 scalar parameters at float64
    rng = np.random.default_rng(0)
    net = init(NetConfig(widths=(4, 4)), rng, head_bias=0.3)
    for p in net.parameters():
        p.data = p.data.astype(np.float64)
    x, target = rng.random((1, 3, 32, 32)), rng.random((1, 1, 8, 8))
    loss = lambda: square(net(Tensor(x)) - Tensor(target)).sum()  # noqa: E731
    loss().backward()
    names, net_err = list(net.params), 0.0
    for i in range(50):
        p = net.params[names[i % len(names)]]
        j = int(rng.integers(0, p.data.size))
        (num,) = numerical_grad(lambda: loss().item(), [p.data.reshape(-1)[j : j + 1]], h=1e-7)
        net_err = max(net_err, abs(p.grad.reshape(-1)[j] - num[0]) / max(1.0, abs(num[0])))
    elapsed = time.time() - start
    ok = max(worst.values()) < 1e-4 and net_err < 1e-3 and elapsed < 120
    verdict(1, ok, f"max op rel err {max(worst.values()):.1e} (< 1e-4), net spot check {net_err:.1e} (< 1e-3), {elapsed:.1f}s (< 120s)")


# -- 2. ranking-loss gradient routing ---------------------------------------------
def test_criterion_2_gradient_routing():
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        lengths = [int(v) for v in rng.integers(2, 6, size=int(rng.integers(1, 5)))]
        pairs = enumerate_pairs(lengths)
        values = rng.random(sum(lengths))
        values[rng.random(values.size) < 0.1] = 0.5  # force some exact ties
        eps = float(rng.choice([0.0, 0.05]))
        c = leaf(values)
        ranking_loss(c, pairs, eps).backward()
        expected = np.zeros_like(values)
        for i, j in pairs:
            if values[j] - values[i] + eps > 0:
                expected[i] -= 1.0
                expected[j] += 1.0
        mismatches += int(not np.array_equal(c.grad, expected))
    verdict(2, mismatches == 0, f"{mismatches} mismatching gradients over 1000 random batches (0 allowed)")


# -- 3. chain invariants --------------------------------------------------------------
def test_criterion_3_chain_invariants():
    rng = np.random.default_rng(3)
    violations = made = 0
    while made < 10_000:
        w, h = int(rng.integers(200, 700)), int(rng.integers(200, 700))
        try:
            chain = generate_chain((w, h), 5, 0.75, 8, rng)
        except ChainInfeasible:
            continue
        made += 1
        rx, ry, rw, rh = anchor_region(w, h, 8)
        ax, ay = chain.anchor
        violations += not (rx <= ax <= rx + rw and ry <= ay <= ry + rh)
        pts = rng.uniform(0, 1, (int(rng.integers(0, 60)), 2)) * [w, h]
        ann = PointAnnotation("x", pts, w, h)
        counts = [crop_annotation(ann, r).count for r in chain.rects]
        violations += any(a < b for a, b in zip(counts, counts[1:]))
        for j, (x0, y0, side, _) in enumerate(chain.rects):
            violations += not (x0 >= 0 and y0 >= 0 and x0 + side <= w and y0 + side <= h)
            if j:
                px, py, ps, _ = chain.rects[j - 1]
                violations += not (x0 >= px and y0 >= py and x0 + side <= px + ps and y0 + side <= py + ps)
                violations += abs(side - 0.75 * ps) > 1
    verdict(3, violations == 0, f"{violations} violations over {made} chains (0 allowed)")


# -- 4. batch arithmetic -----------------------------------------------------------------
def test_criterion_4_batch_arithmetic():
    rng = np.random.default_rng(4)
    labeled = [(s.image, s.annotation) for s in (generate_scene(SceneParams(96, 96, 10.0), rng, f"l{i}") for i in range(25))]
    unlabeled = {f"u{i}": generate_scene(SceneParams(192, 192, 10.0), rng, f"u{i}").image for i in range(5)}
    chains = [generate_chain((192, 192), 5, 0.75, 8, rng, image_id=f"u{i}") for i in range(5)]
    cfg = BatchConfig(PatchConfig(input_size=32, output_stride=4, min_side=40, max_side=96), 25, 5, 5)
    sources = Sources(labeled, chains, unlabeled)
    ranking = assemble_batch("ranking", sources, cfg, 0)
    mixed = assemble_batch("mixed", sources, cfg, 0)
    counting = assemble_batch("counting", sources, cfg, 0)
    sizes = (len(counting.images), len(ranking.images), len(ranking.pairs), len(mixed.images), len(mixed.pairs))
    verdict(4, sizes == (25, 25, 50, 50, 50), f"counting/ranking images, pairs, multi-task images, pairs = {sizes} (want 25, 25, 50, 50, 50)")


# -- 5. lambda = 0 degenerates to counting only ----------------------------------------------
def test_criterion_5_lambda_zero_bitwise():
    rng = np.random.default_rng(5)
    labeled = [(s.image, s.annotation) for s in (generate_scene(SceneParams(96, 96, 20.0), rng, f"l{i}") for i in range(6))]
    unlabeled = {f"u{i}": generate_scene(SceneParams(192, 192, 20.0), rng, f"u{i}").image for i in range(4)}
    chains = [generate_chain((192, 192), 5, 0.75, 8, rng, image_id=f"u{i % 4}") for i in range(8)]
    sources = Sources(labeled, chains, unlabeled)
    common = dict(input_size=16, widths=(4, 4), min_side=24, max_side=64, counting_batch=5, chains_per_batch=2,
                  iterations=30, lr=1e-3, checkpoint_every=0, seed=7)
    a, _ = train_multitask(make_config(overrides=common).init_net(), sources, make_config(overrides=dict(common, regime="multitask", lam=0.0)))
    b, _ = train_counting(make_config(overrides=common).init_net(), sources, make_config(overrides=dict(common, regime="counting")))
    verdict(5, a.fingerprint() == b.fingerprint(), f"multi-task lambda=0 weights sha256 {a.fingerprint()[:12]} vs counting-only {b.fingerprint()[:12]}")


# -- 6. density fidelity -----------------------------------------------------------------------
def test_criterion_6_density_fidelity():
    single = count_from_density(render_density(PointAnnotation("a", np.array([[250.0, 250.0]]), 500, 500), 15.0))
    rng = np.random.default_rng(6)
    worst = 0.0
    for n in (1, 10, 100, 500):
        pts = rng.uniform(61, 439, size=(n, 2))
        total = count_from_density(render_density(PointAnnotation("b", pts, 500, 500), 15.0, (125, 125)))
        worst = max(worst, abs(total - n) / n)
    ok = abs(single - 1) <= 1e-3 and worst <= 0.01
    verdict(6, ok, f"single point sum {single:.6f} (within 0.1%), worst multi-point relative error {worst:.2e} (within 1%)")


# -- 7. toy-scale comparison of training regimes ---------------------------------------------------
# Synthetic corpora: 30 labeled + 300 unlabeled training scenes and 50 held-out scenes per seed.
SCENE = dict(height=192, width=192, blob_radius=(1.3, 3.3))
COUNT_RANGE = (60, 600)
ITERATIONS = 800
REGIMES = ("counting", "multitask", "alternating", "finetune")
SEEDS = range(5)


def make_scenes(n, rng, prefix):
    out = []
    for i in range(n):
        params = SceneParams(density=float(rng.uniform(*COUNT_RANGE)), perspective=float(rng.uniform(0, 1.5)), **SCENE)
        s = generate_scene(params, rng, f"{prefix}{i}")
        out.append((s.image, s.annotation))
    return out


def run_regime(regime, seed, sources, test):
    cfg = make_config("desk", overrides=dict(regime=regime, iterations=ITERATIONS, seed=seed, init_seed=seed, checkpoint_every=0))
    net = cfg.init_net()
    Trainer(net, sources, cfg).run()
    return evaluate(net, test).mae


def test_criterion_7_toy_regime_ordering():
    start = time.time()
    table = {r: [] for r in REGIMES}
    for seed in SEEDS:
        rng = np.random.default_rng([7, seed])
        labeled = make_scenes(30, rng, "l")
        unlabeled = make_scenes(300, rng, "u")
        test = make_scenes(50, rng, "t")
        chains = [generate_chain((192, 192), 5, 0.75, 8, rng, image_id=ann.image_id) for _, ann in unlabeled]
        sources = Sources(labeled, chains, {ann.image_id: img for img, ann in unlabeled})
        for regime in REGIMES:
            table[regime].append(run_regime(regime, seed, sources, test))
    elapsed = time.time() - start
    med = {r: float(np.median(v)) for r, v in table.items()}
    print("\nheld-out MAE per seed (median last)")
    for r in REGIMES:
        print(f"  {r:12s} " + " ".join(f"{v:8.2f}" for v in table[r]) + f"   median {med[r]:8.2f}")
    checks = {
        "multitask < counting": med["multitask"] < med["counting"],
        "alternating < counting": med["alternating"] < med["counting"],
        "finetune >= alternating": med["finetune"] >= med["alternating"],
        "runtime < 60 min": elapsed < 3600,
    }
    failed = [k for k, v in checks.items() if not v]
    medians = ", ".join(f"{r} {med[r]:.2f}" for r in REGIMES)
    verdict(7, not failed, f"median MAE {medians}; {elapsed / 60:.1f} min; failed: {failed or 'none'}")


# -- 8. metrics ------------------------------------------------------------------------------------
def test_criterion_8_metrics():
    mae, mse = mae_mse([10, 10], [7, 14])
    hand_ok = abs(mae - 3.5) < 1e-9 and abs(mse - np.sqrt(12.5)) < 1e-9
    rng = np.random.default_rng(8)
    order_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        rep = EvalReport.build([str(i) for i in range(n)], rng.uniform(0, 1e3, n), rng.uniform(0, 1e3, n))
        order_ok &= rep.mae <= rep.mse + 1e-12
    verdict(8, hand_ok and order_ok, f"hand vector MAE {mae} MSE {mse:.12f}; MAE <= MSE on 1000 random reports: {order_ok}")


# -- 9. determinism of CLI pipelines --------------------------------------------------------------
def test_criterion_9_replay_determinism(tmp_path):
    tiny = ["--set", "input_size=16", "--set", "widths=4,4", "--set", "min_side=24", "--set", "max_side=64",
            "--set", "counting_batch=4", "--set", "chains_per_batch=2", "--set", "checkpoint_every=20"]
    steps = [
        ["synth", "--scenes", "4", "--size", "96x96", "--seed", "1", "--out", str(tmp_path / "lab")],
        ["synth", "--scenes", "3", "--size", "192x192", "--seed", "2", "--prefix", "u", "--out", str(tmp_path / "unl")],
        ["rankgen", "--corpus", str(tmp_path / "unl"), "--per-image", "2", "--seed", "3", "--out", str(tmp_path / "unl" / "chains.jsonl")],
        ["train", "--regime", "alternating", "--labeled", str(tmp_path / "lab"), "--chains", str(tmp_path / "unl" / "chains.jsonl"),
         "--preset", "desk", "--iterations", "40", "--set", "alt_period=10", "--seed", "4", "--out", str(tmp_path / "train"), *tiny],
        ["eval", "--checkpoint", str(tmp_path / "train" / "final.ckpt"), "--dataset", str(tmp_path / "lab"), "--out", str(tmp_path / "ev.csv")],
    ]
    for argv in steps:
        assert main(argv) == 0
    artifacts = sorted(p for p in tmp_path.rglob("*") if p.is_file() and not p.name.endswith("manifest.json"))
    before = {p: p.read_bytes() for p in artifacts}
    manifests = [tmp_path / "lab" / "manifest.json", tmp_path / "unl" / "manifest.json", tmp_path / "unl" / "chains.jsonl.manifest.json",
                 tmp_path / "train" / "manifest.json", tmp_path / "ev.csv.manifest.json"]
    codes = [main(["replay", str(m)]) for m in manifests]
    changed = [p.name for p, raw in before.items() if p.read_bytes() != raw]
    ok = codes == [0] * 5 and not changed
    verdict(9, ok, f"replayed {len(manifests)} manifests; {len(before)} artifacts compared, changed: {changed or 'none'}")
