"""Release gate: the package's core guarantees, checked end to end.

One test per numbered criterion. Each prints a single pass/fail line
(run with ``-s`` to see them; under plain ``-v`` the per-test verdicts
carry the same information). Tolerances are stated inline next to each
check. Criteria 7 and 8 share one bundle of desk-scale training runs
built once at module scope; that bundle dominates the suite's runtime
(roughly twenty-five minutes on one core).
"""
import math
import statistics
import time

import numpy as np
import pytest

from rotkit import augment, cli, curriculum, data, fisher, metrics, model, seeding, so3, trainer


def verdict(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num}: {detail}"


def random_param(rng, sig_low=0.0, sig_high=10.0):
    """F = U diag(s) V^T with singular values uniform in [sig_low, sig_high]."""
    u = so3.random_rotations(rng, 1)[0]
    v = so3.random_rotations(rng, 1)[0]
    s = rng.uniform(sig_low, sig_high, size=3)
    return u @ np.diag(s) @ v.T


def test_criterion_1_normalizer_matches_monte_carlo():
    t0 = time.monotonic()
    rng = np.random.default_rng(20240817)
    worst_sig = 0.0
    worst_rel = 0.0
    for k in range(50):
        f = random_param(rng)
        fast = fisher.log_norm_const(f)
        est, se = fisher.oracle_log_norm_const(
            f, 2_000_000, np.random.default_rng((20240817, k))
        )
        err = abs(fast - est)
        assert err <= 3.0 * se, (k, err, se)
        assert err <= 5e-3 * abs(est), (k, err, est)
        worst_sig = max(worst_sig, err / se)
        worst_rel = max(worst_rel, err / abs(est))
    elapsed = time.monotonic() - t0
    verdict(
        1,
        elapsed <= 180.0,
        f"50 draws within 3 SE (worst {worst_sig:.2f}) and 5e-3 relative "
        f"(worst {worst_rel:.1e}) in {elapsed:.0f}s",
    )


def test_criterion_2_gradients_match_finite_differences():
    rng = np.random.default_rng(4061)
    h = 1e-4
    worst = 0.0
    for _ in range(50):
        f = random_param(rng)
        r = so3.random_rotations(rng, 1)[0]
        analytic = fisher.nll_grad_wrt_f(f, r)
        numeric = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                fp, fm = f.copy(), f.copy()
                fp[i, j] += h
                fm[i, j] -= h
                numeric[i, j] = (fisher.nll(fp, r) - fisher.nll(fm, r)) / (2 * h)
        worst = max(worst, float(np.abs(analytic - numeric).max()))
    assert worst <= 1e-4

    # End to end through the regressor: mean batch NLL, every parameter
    # entry against a central difference.
    cfg = model.ModelConfig(
        width=8, height=8, n_categories=2, conv_channels=(4, 5),
        embedding_dim=3, seed=0,
    )
    params = model.init_params(cfg)
    imgs = rng.integers(0, 256, size=(3, 8, 8, 3), dtype=np.uint8)
    cats = np.array([0, 1, 1])
    targets = so3.random_rotations(rng, 3)

    fs, cache = model.forward_many(cfg, params, imgs, cats)
    upstream = np.stack(
        [fisher.nll_grad_wrt_f(fs[b], targets[b]) for b in range(3)]
    ) / 3.0
    grads = model.backward(params, cache, upstream)

    def loss_at(p):
        ff, _ = model.forward_many(cfg, p, imgs, cats)
        return float(np.mean(fisher.nll_many(ff, targets)))

    worst_rel = 0.0
    hm = 1e-5
    for name in model.TENSOR_FIELDS:
        analytic = getattr(grads, name)
        it = np.nditer(getattr(params, name), flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            p_plus = model.map_params(np.copy, params)
            getattr(p_plus, name)[idx] += hm
            p_minus = model.map_params(np.copy, params)
            getattr(p_minus, name)[idx] -= hm
            fd = (loss_at(p_plus) - loss_at(p_minus)) / (2 * hm)
            err = abs(fd - analytic[idx])
            assert err <= 1e-9 + 1e-3 * abs(fd), (name, idx, fd, analytic[idx])
            if abs(fd) > 1e-6:
                worst_rel = max(worst_rel, err / abs(fd))
    verdict(
        2,
        True,
        f"parameter-gradient max abs err {worst:.1e} (bound 1e-4); "
        f"model end-to-end worst relative {worst_rel:.1e} (bound 1e-3)",
    )


def test_criterion_3_entropy_calibration():
    at_zero = fisher.entropy(np.zeros((3, 3)))
    assert abs(at_zero) <= 1e-9
    rng = np.random.default_rng(5150)
    for _ in range(20):
        a = rng.normal(size=(3, 3))
        f = a / np.linalg.norm(a)
        ladder = [fisher.entropy(s * f) for s in (0.5, 1.0, 2.0, 4.0, 8.0)]
        assert all(b < a for a, b in zip(ladder, ladder[1:])), ladder
    verdict(
        3,
        True,
        f"H(0) = {at_zero:.1e} (bound 1e-9); entropy strictly decreasing "
        "in concentration for 20 unit-norm parameter directions",
    )


def test_criterion_4_schedule_exactness():
    ms = curriculum.MultistageSchedule(
        alpha_start=65.0, alpha_end=95.0, n_stage=4, n_iter=1000
    )
    props = [curriculum.stage_proportion(i, ms) for i in (1, 2, 3, 4)]
    assert props == [0.65, 0.75, 0.85, 0.95]

    ad = curriculum.AdaptiveSchedule(tau_start=-4.5, tau_end=-3.9, n_iter=7000)
    assert curriculum.adaptive_threshold(0, ad) == -4.5
    assert curriculum.adaptive_threshold(7000, ad) == -3.9

    # Selected count under distinct entropies: floor(alpha*N) quantile
    # index, plus one because the boundary element itself passes the
    # <= comparison.
    rng = np.random.default_rng(2718)
    for _ in range(1000):
        n = int(rng.integers(2, 257))
        alpha = float(rng.uniform(0.01, 0.99))
        entropies = rng.normal(-4.0, 1.0, size=n)
        assert np.unique(entropies).size == n
        z = curriculum.quantile_threshold(entropies, alpha)
        count = int((entropies <= z).sum())
        assert count == math.floor(alpha * n) + 1, (n, alpha, count)
        assert alpha <= count / n <= alpha + 1.0 / n
    verdict(
        4,
        True,
        "stage proportions exactly 65/75/85/95%; adaptive endpoints "
        "exactly -4.5 and -3.9; selected count = floor(alpha*N)+1 on "
        "1000 random batches",
    )


def test_criterion_5_mosaic_integrity():
    trials = 0
    for n in (1, 2, 4, 5, 6):
        for k in range(40):
            rng = np.random.default_rng((777, n, k))
            h = int(rng.integers(16, 41))
            w = int(rng.integers(16, 41))
            img = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            out, trace = augment.pose_mosaic_traced(
                img, n, augment.DEFAULT_POOL, rng
            )
            assert out.shape == img.shape
            coverage = np.zeros((h, w), dtype=np.int64)
            for p in trace.patches:
                coverage[p.y0:p.y1, p.x0:p.x1] += 1
                regen = augment.apply_aug(
                    augment.AugOp(kind=p.kind, magnitude=p.magnitude),
                    img,
                    np.random.default_rng(p.seed),
                )
                assert np.array_equal(
                    out[p.y0:p.y1, p.x0:p.x1], regen[p.y0:p.y1, p.x0:p.x1]
                )
            assert (coverage == 1).all()
            trials += 1
    assert trials == 200
    assert set(augment.split_pairs(4)) == {(1, 4), (2, 2), (4, 1)}
    verdict(
        5,
        True,
        "200 seeded mosaics tile exactly with bit-equal patches; "
        "split_pairs(4) = {(1,4),(2,2),(4,1)}",
    )


def test_criterion_6_metric_correctness():
    i3 = np.eye(3)
    rz90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    rz180 = np.diag([-1.0, -1.0, 1.0])
    assert so3.angle_error_deg(i3, i3) == 0.0
    assert so3.angle_error_deg(i3, rz90) == 90.0
    assert so3.angle_error_deg(i3, rz180) == 180.0
    assert metrics.acc_at([29.999999, 30.0, 30.000001], 30.0) == pytest.approx(1 / 3)

    n = 10_000
    labels = so3.random_rotations(np.random.default_rng(608), n)
    images = np.zeros((n, 8, 8, 3), dtype=np.uint8)
    categories = np.zeros(n, dtype=np.int64)

    def guess(batch):
        return so3.random_rotations(np.random.default_rng(609), batch.shape[0])

    pairs = metrics.angle_errors(guess, images, categories, labels)
    errors = [e for _, e in pairs]
    mean_err = float(np.mean(errors))
    mean_oracle = math.degrees(math.pi / 2 + 2 / math.pi)  # 126.47

    # The uniform-angle median solves (theta - sin theta)/pi = 1/2;
    # derive it by bisection rather than hard-coding a constant.
    lo, hi = 0.0, math.pi
    for _ in range(200):
        mid = (lo + hi) / 2
        if mid - math.sin(mid) < math.pi / 2:
            lo = mid
        else:
            hi = mid
    median_oracle = math.degrees((lo + hi) / 2)  # ~132.35

    mean_med = metrics.summarize(pairs).mean_med_deg
    assert abs(mean_err - mean_oracle) <= 2.0, mean_err
    assert abs(mean_med - median_oracle) <= 2.0, mean_med
    verdict(
        6,
        True,
        f"trivial angles exact; <30 boundary strict; random-predictor "
        f"mean {mean_err:.2f} within 2 of {mean_oracle:.2f}, Mean Med "
        f"{mean_med:.2f} within 2 of the uniform median {median_oracle:.2f}",
    )


# Desk-scale protocol shared by criteria 7 and 8: one dataset, four
# training arms over three seeds plus one fixed-threshold run.
DESK_SUP = 2000
DESK_SSL = 3000
DESK_SEEDS = (0, 1, 2)
DESK_BATCH_U = 48


def _desk_schedule(kind):
    if kind in ("adaptive", "no-mosaic"):
        return curriculum.AdaptiveSchedule(
            tau_start=0.65, tau_end=0.95, n_iter=DESK_SSL
        )
    if kind == "multistage":
        return curriculum.MultistageSchedule(
            alpha_start=65.0, alpha_end=95.0, n_stage=4, n_iter=DESK_SSL
        )
    if kind == "fixed":
        return curriculum.FixedSchedule(tau=0.4, n_iter=DESK_SSL)
    return None  # baseline


@pytest.fixture(scope="module")
def desk_bundle(tmp_path_factory):
    t0 = time.monotonic()
    root = tmp_path_factory.mktemp("desk")
    render = data.RenderConfig(width=32, height=32)
    train_man = data.generate_dataset(
        2000, 2, 0.05, 1001, root / "train", render_cfg=render
    )
    test_man = data.generate_dataset(
        1000, 2, 1.0, 1002, root / "test", render_cfg=render, split="test"
    )
    test_imgs = data.load_images(test_man, root / "test")
    test_cats = np.array([r.category for r in test_man.records])
    test_rots = np.stack([r.label for r in test_man.records])

    def run_arm(kind, seed):
        schedule = _desk_schedule(kind)
        cfg = trainer.TrainConfig(
            total_iters=DESK_SUP + DESK_SSL,
            supervised_iters=DESK_SUP + DESK_SSL if schedule is None else DESK_SUP,
            batch_labeled=16,
            batch_unlabeled=DESK_BATCH_U,
            lr_supervised=1e-4,
            lr_ssl=2e-4,
            schedule=schedule,
            threshold_as_quantile=kind in ("adaptive", "no-mosaic", "fixed"),
            use_mosaic=kind != "no-mosaic",
            ema_momentum=0.99,
            seed=seed,
        )
        mcfg = model.ModelConfig(
            width=32, height=32, n_categories=2,
            seed=seeding.child_seed(seed, "model-init"),
        )
        res = trainer.train(cfg, mcfg, train_man, root / "train")
        predict = trainer.model_predictor(mcfg, res.teacher)
        report = metrics.summarize(
            metrics.angle_errors(predict, test_imgs, test_cats, test_rots)
        )
        ratios = [r.mask_ratio for r in res.log.records if r.phase == "ssl"]
        return report.mean_med_deg, ratios

    bundle = {"med": {}, "elapsed": None}
    for kind in ("baseline", "adaptive", "multistage", "no-mosaic"):
        meds = []
        for seed in DESK_SEEDS:
            med, ratios = run_arm(kind, seed)
            meds.append(med)
            if kind == "multistage" and seed == DESK_SEEDS[0]:
                bundle["multistage_ratios"] = ratios
        bundle["med"][kind] = meds
    _, fixed_ratios = run_arm("fixed", DESK_SEEDS[0])
    bundle["fixed_ratios"] = fixed_ratios
    bundle["elapsed"] = time.monotonic() - t0
    return bundle


def test_criterion_7_learning_effect(desk_bundle):
    base = statistics.median(desk_bundle["med"]["baseline"])
    adaptive = statistics.median(desk_bundle["med"]["adaptive"])
    multistage = statistics.median(desk_bundle["med"]["multistage"])
    assert adaptive <= 0.90 * base, (adaptive, base)
    assert multistage <= 0.92 * base, (multistage, base)
    verdict(
        7,
        desk_bundle["elapsed"] <= 45 * 60,
        f"Mean Med medians over 3 seeds: baseline {base:.2f}, adaptive "
        f"{adaptive:.2f} ({adaptive / base:.3f}x, bound 0.90), multistage "
        f"{multistage:.2f} ({multistage / base:.3f}x, bound 0.92); bundle "
        f"took {desk_bundle['elapsed'] / 60:.1f} min (bound 45)",
    )


def test_criterion_8_curriculum_phenomenology(desk_bundle):
    ratios = desk_bundle["fixed_ratios"]
    last_half_std = float(np.std(ratios[len(ratios) // 2:]))
    assert math.isfinite(last_half_std) and last_half_std >= 0.0

    # Each multistage stage admits floor(alpha*N)+1 of the N per-batch
    # entropies, so the mask-ratio curve is piecewise constant with one
    # plateau per stage.
    expected = [
        (math.floor(alpha * DESK_BATCH_U) + 1) / DESK_BATCH_U
        for alpha in (0.65, 0.75, 0.85, 0.95)
    ]
    assert sorted(set(desk_bundle["multistage_ratios"])) == expected

    mosaic_on = statistics.median(desk_bundle["med"]["adaptive"])
    mosaic_off = statistics.median(desk_bundle["med"]["no-mosaic"])
    gain = (mosaic_off - mosaic_on) / mosaic_off
    assert gain >= 0.03, (mosaic_on, mosaic_off)
    verdict(
        8,
        True,
        f"fixed-threshold last-half mask-ratio std = {last_half_std!r}; "
        f"multistage curve has exactly 4 plateaus at {expected}; mosaic "
        f"improves Mean Med by {gain * 100:.1f}% relative (bound 3%)",
    )


def test_criterion_9_cli_determinism(tmp_path, capsys):
    def tree_bytes(base):
        out = {}
        for path in sorted(base.rglob("*")):
            if path.is_file():
                out[str(path.relative_to(base))] = path.read_bytes()
        return out

    def identical(cmd_a, cmd_b, dir_a, dir_b):
        assert cli.main([str(a) for a in cmd_a]) == 0
        assert cli.main([str(a) for a in cmd_b]) == 0
        a, b = tree_bytes(dir_a), tree_bytes(dir_b)
        assert a.keys() == b.keys() and a.keys()
        for name in a:
            assert a[name] == b[name], name

    gen = ["gen-data", "--n", 8, "--k", 2, "--ratio", 0.5, "--seed", 21,
           "--width", 16, "--height", 16]
    identical(gen + ["--out", tmp_path / "d1"], gen + ["--out", tmp_path / "d2"],
              tmp_path / "d1", tmp_path / "d2")

    gen_eval = ["gen-data", "--n", 6, "--k", 2, "--ratio", 1.0, "--seed", 22,
                "--width", 16, "--height", 16, "--split", "test"]
    assert cli.main([str(a) for a in gen_eval + ["--out", tmp_path / "te"]]) == 0

    tr = ["train", "--data", tmp_path / "d1", "--total-iters", 3,
          "--supervised-iters", 1, "--batch-labeled", 3, "--batch-unlabeled", 4,
          "--schedule", "fixed", "--tau", "10.0", "--mosaic-n", 2, "--seed", 5]
    identical(tr + ["--out", tmp_path / "t1"], tr + ["--out", tmp_path / "t2"],
              tmp_path / "t1", tmp_path / "t2")

    ev = ["eval", "--data", tmp_path / "te",
          "--checkpoint", tmp_path / "t1" / "model_ema.bin"]
    identical(ev + ["--out", tmp_path / "e1"], ev + ["--out", tmp_path / "e2"],
              tmp_path / "e1", tmp_path / "e2")

    rep = ["report", tmp_path / "t1" / "train_log.csv"]
    identical(rep + ["--out", tmp_path / "r1"], rep + ["--out", tmp_path / "r2"],
              tmp_path / "r1", tmp_path / "r2")

    capsys.readouterr()
    verdict(
        9,
        True,
        "gen-data, train, eval, and report reruns with identical seeds "
        "produced byte-identical output trees",
    )
