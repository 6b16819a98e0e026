"""Acceptance suite: every criterion prints one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s``.  The training-backed
criteria share one desk-scale world (seeded phantoms, one shared trained
Dense-Unet plus three comparison runs) built once per session; those
tests carry the ``slow`` marker.  Everything is deterministic.
"""

import time

import numpy as np
import pytest

from decalcify.ctvol import (PatchSpec, RegionOfInterest, Volume,
                             load_volume, mask_bool, patch_grid, save_volume)
from decalcify.eval import eval_restoration, experiment2, mean_fill_baseline
from decalcify.network import (DESK_CONFIG, KINDS, PAPER_CONFIG,
                               build_dense_unet, build_network,
                               dense_block_out_channels, forward)
from decalcify.phantom import LABEL_PLAQUE, phantom_suite, training_phantoms
from decalcify.removal import RemovalConfig, detect_calcium, remove_calcium
from decalcify.tensor import (Tensor, batchnorm3d, concat_channels, conv3d,
                              load_checkpoint, maxpool3d, mse_loss, relu,
                              save_checkpoint, upsample3d)
from decalcify.trainer import TrainingConfig, build_dataset, train

# desk-scale operating point for the training-backed criteria
TRAIN_VOLUMES = 12
HELDOUT_VOLUMES = 6
PATCH = 24
STRIDE = 12
STEPS = 700
LR = 3e-3
SEED = 1
ROI = RegionOfInterest((48, 48, 32))
REMOVAL = RemovalConfig(patch_size=PATCH, mask_size=16, max_iterations=50)


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion {num:2d}: {name}  {detail}")
    assert ok, f"criterion {num}: {name} {detail}"


def rel_err(a, b):
    return np.abs(a - b).max() / (max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def finite_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gflat = x.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


@pytest.fixture(scope="module", autouse=True)
def kernels_warm():
    # trigger numba compilation outside the timed sections
    for dtype in (np.float32, np.float64):
        x = Tensor(np.ones((1, 1, 4, 4, 4), dtype), requires_grad=True)
        w = Tensor(np.ones((1, 1, 3, 3, 3), dtype), requires_grad=True)
        b = Tensor(np.zeros(1, dtype), requires_grad=True)
        maxpool3d(conv3d(x, w, b)).sum().backward()


# ---------------------------------------------------------------- world

@pytest.fixture(scope="module")
def world():
    train_pairs = training_phantoms(TRAIN_VOLUMES, seed=42)
    heldout_pairs = training_phantoms(HELDOUT_VOLUMES, seed=742)
    vols = [v for v, _ in train_pairs]
    cleans = [t.calcium_free for _, t in train_pairs]
    datasets = {m: build_dataset(vols, ROI, PATCH, STRIDE, True, mask_size=m,
                                 clean_targets=cleans)
                for m in (16, 8)}

    def heldout_patches(mask, count=20):
        out = []
        for v, t in heldout_pairs:
            origin = ROI.origin_in(v.dims)
            for go in patch_grid(ROI.dims, PATCH, STRIDE):
                spec = PatchSpec(tuple(a + b for a, b in zip(origin, go)),
                                 PATCH, mask)
                if not (t.labels[spec.patch_slices()] == LABEL_PLAQUE).any():
                    out.append((v, spec))
        return out[:count]

    return {
        "datasets": datasets,
        "eval16": heldout_patches(16),
        "eval8": heldout_patches(8),
        "suite": phantom_suite(seed=0),
    }


def _train(world, steps=STEPS, **kw):
    cfg = TrainingConfig(lr=LR, steps=steps, seed=SEED,
                         mask_size=kw.pop("mask_size", 16), **kw)
    return train(cfg, world["datasets"][cfg.mask_size])


@pytest.fixture(scope="module")
def full16(world):
    t0 = time.perf_counter()
    result = _train(world)
    result.elapsed = time.perf_counter() - t0
    return result


@pytest.fixture(scope="module")
def maskonly16(world):
    return _train(world, loss_region="mask_only")


@pytest.fixture(scope="module")
def maskonly8(world):
    return _train(world, loss_region="mask_only", mask_size=8)


@pytest.fixture(scope="module")
def autoenc16(world):
    return _train(world, arch="autoencoder")


# ------------------------------------------------------------- criteria

def test_criterion_1_gradient_correctness():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    failures = []

    # conv3d: input, weights, bias
    x = Tensor(rng.standard_normal((1, 2, 3, 3, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    r = rng.standard_normal((1, 2, 3, 3, 3))
    out = conv3d(x, w, b)
    mse_loss(out, out.data - r).backward()

    def conv_loss():
        o = conv3d(Tensor(x.data), Tensor(w.data), Tensor(b.data)).data
        return ((o - (out.data - r)) ** 2).mean()

    for t, label in ((x, "conv.x"), (w, "conv.w"), (b, "conv.b")):
        e = rel_err(t.grad, finite_diff(conv_loss, t.data))
        if e >= 1e-4:
            failures.append((label, e))

    # maxpool3d
    xp = Tensor(rng.standard_normal((1, 2, 4, 4, 4)), requires_grad=True)
    rp = rng.standard_normal((1, 2, 2, 2, 2))
    op = maxpool3d(xp)
    mse_loss(op, op.data - rp).backward()
    e = rel_err(xp.grad, finite_diff(
        lambda: ((maxpool3d(Tensor(xp.data)).data - (op.data - rp)) ** 2).mean(),
        xp.data))
    if e >= 1e-4:
        failures.append(("maxpool.x", e))

    # upsample3d
    xu = Tensor(rng.standard_normal((1, 1, 2, 2, 2)), requires_grad=True)
    ru = rng.standard_normal((1, 1, 4, 4, 4))
    ou = upsample3d(xu)
    mse_loss(ou, ou.data - ru).backward()
    e = rel_err(xu.grad, finite_diff(
        lambda: ((upsample3d(Tensor(xu.data)).data - (ou.data - ru)) ** 2).mean(),
        xu.data))
    if e >= 1e-4:
        failures.append(("upsample.x", e))

    # batchnorm: input, gamma, beta (train mode)
    xb = Tensor(rng.standard_normal((2, 2, 3, 3, 3)), requires_grad=True)
    gb = Tensor(rng.standard_normal(2) + 1.5, requires_grad=True)
    bb = Tensor(rng.standard_normal(2), requires_grad=True)
    rb = rng.standard_normal((2, 2, 3, 3, 3))
    ob = batchnorm3d(xb, gb, bb, np.zeros(2), np.ones(2), mode="train")
    mse_loss(ob, ob.data - rb).backward()

    def bn_loss():
        o = batchnorm3d(Tensor(xb.data), Tensor(gb.data), Tensor(bb.data),
                        np.zeros(2), np.ones(2), mode="train").data
        return ((o - (ob.data - rb)) ** 2).mean()

    for t, label in ((xb, "bn.x"), (gb, "bn.gamma"), (bb, "bn.beta")):
        e = rel_err(t.grad, finite_diff(bn_loss, t.data))
        if e >= 1e-4:
            failures.append((label, e))

    # relu + concat composite
    xr = Tensor(rng.standard_normal((1, 2, 2, 2, 2)) + 0.5, requires_grad=True)
    assert np.abs(xr.data).min() > 1e-3
    cc = concat_channels(relu(xr), xr)
    rr = rng.standard_normal(cc.shape)
    mse_loss(cc, cc.data - rr).backward()

    def cat_loss():
        t = Tensor(xr.data)
        o = concat_channels(relu(t), t).data
        return ((o - (cc.data - rr)) ** 2).mean()

    e = rel_err(xr.grad, finite_diff(cat_loss, xr.data))
    if e >= 1e-4:
        failures.append(("relu+concat.x", e))

    # masked mse
    xm = Tensor(rng.standard_normal((1, 1, 4, 4, 4)), requires_grad=True)
    tm = rng.standard_normal((1, 1, 4, 4, 4))
    mm = mask_bool(4, 2).reshape(1, 1, 4, 4, 4)
    mse_loss(xm, tm, mask=mm).backward()
    e = rel_err(xm.grad, finite_diff(
        lambda: ((xm.data - tm)[mm] ** 2).mean(), xm.data))
    if e >= 1e-4:
        failures.append(("mse.mask", e))

    # end-to-end desk Dense-Unet, ten random parameters, 8^3 input
    spec, params = build_dense_unet(DESK_CONFIG, seed=11, dtype=np.float64)
    xe = rng.standard_normal((1, 1, 8, 8, 8))
    te = rng.standard_normal((1, 1, 8, 8, 8))

    def net_loss():
        return mse_loss(forward(spec, params, xe, mode="train"), te)

    params.zero_grad()
    net_loss().backward()
    analytic = {k: t.grad.copy() for k, t in params.tensors.items()}
    names = sorted(params.tensors)
    h = 1e-5
    for pi in rng.choice(len(names), size=10, replace=False):
        t = params.tensors[names[pi]]
        flat = t.data.ravel()
        i = int(rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + h
        fp = net_loss().data
        flat[i] = old - h
        fm = net_loss().data
        flat[i] = old
        fd = (fp - fm) / (2 * h)
        a = analytic[names[pi]].ravel()[i]
        if abs(a - fd) / max(abs(a), abs(fd), 1e-8) >= 1e-3:
            failures.append((f"net.{names[pi]}", abs(a - fd)))

    elapsed = time.perf_counter() - t0
    report(1, "gradient correctness (ops < 1e-4, end-to-end < 1e-3)",
           not failures and elapsed < 120,
           f"failures={failures} runtime={elapsed:.1f}s")


def test_criterion_2_conv_oracle():
    from test_tensor import naive_conv3d
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for d in (1, 2, 3, 4):
        for hsz in (1, 3, 4):
            for wsz in (2, 4):
                for k in (1, 3):
                    for stride in (1, 2):
                        for ci, co in ((1, 1), (2, 3)):
                            x = rng.standard_normal((2, ci, d, hsz, wsz))
                            w = rng.standard_normal((co, ci, k, k, k))
                            b = rng.standard_normal(co)
                            got = conv3d(Tensor(x), Tensor(w), Tensor(b),
                                         stride).data
                            want = naive_conv3d(x, w, b, stride)
                            worst = max(worst, np.abs(got - want).max())
    elapsed = time.perf_counter() - t0
    report(2, "conv3d vs naive nested-loop oracle (<= 1e-10, 64-bit)",
           worst < 1e-10 and elapsed < 30,
           f"worst={worst:.2e} runtime={elapsed:.1f}s")


def test_criterion_3_same_size_contract():
    rng = np.random.default_rng(3)
    ok = True
    for kind in KINDS:
        spec, params = build_network(kind, DESK_CONFIG, seed=0)
        for s in (8, 16, 32):
            x = rng.random((1, 1, s, s, s), dtype=np.float32)
            shape = forward(spec, params, x).shape
            ok = ok and shape == (1, 1, s, s, s)
    report(3, "same-size output for dims {8,16,32}^3 x 4 architectures", ok)


def test_criterion_4_dense_block_channel_law():
    law = dense_block_out_channels(8, 12, 4) == 56
    spec, params = build_dense_unet(PAPER_CONFIG, seed=0)
    built = params.tensors["td2.conv.w"].shape[1] == PAPER_CONFIG.stem + 12 * 4
    layers = all(
        params.tensors[f"bot.l{i}.conv.w"].shape[1] == PAPER_CONFIG.stem + i * 4
        for i in range(12))
    report(4, "dense block channel law (8 + 12*4 = 56; per-layer inputs)",
           law and built and layers)


@pytest.mark.slow
def test_criterion_5_desk_training_descent(world, full16):
    base_patches = len(world["datasets"][16]) // 8
    score = eval_restoration(full16.model, world["eval16"], "mask_only",
                             full16.train_volume_hashes)
    floor = mean_fill_baseline(world["eval16"])
    ratio = score.mean / floor.mean
    hist = full16.loss_history
    descending = np.median(hist[-50:]) < np.median(hist[:50])
    ok = (ratio < 0.5 and full16.elapsed < 600 and STEPS <= 1000
          and 150 <= base_patches <= 300 and descending)
    report(5, "desk training: eval MSE < 0.5 x mean-fill floor",
           ok, f"ratio={ratio:.3f} ({score.mean:.0f} vs {floor.mean:.0f} HU^2) "
               f"steps={STEPS} patches={base_patches} descending={descending} "
               f"train_time={full16.elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_6_architecture_ordering(world, full16, autoenc16):
    dense = eval_restoration(full16.model, world["eval16"], "mask_only",
                             full16.train_volume_hashes)
    auto = eval_restoration(autoenc16.model, world["eval16"], "mask_only",
                            autoenc16.train_volume_hashes)
    report(6, "Dense-Unet mean MSE <= autoencoder mean MSE (20 patches)",
           dense.mean <= auto.mean,
           f"dense={dense.mean:.0f} autoencoder={auto.mean:.0f} HU^2")


@pytest.mark.slow
def test_criterion_7_loss_scope_ordering(world, full16, maskonly16):
    full = eval_restoration(full16.model, world["eval16"], "mask_only",
                            full16.train_volume_hashes)
    masked = eval_restoration(maskonly16.model, world["eval16"], "mask_only",
                              maskonly16.train_volume_hashes)
    report(7, "full-image loss beats mask-only loss at matched budget",
           full.mean < masked.mean,
           f"full={full.mean:.0f} mask_only={masked.mean:.0f} HU^2")


@pytest.mark.slow
def test_criterion_8_mask_size_ordering(world, maskonly8, maskonly16):
    m8 = eval_restoration(maskonly8.model, world["eval8"], "mask_only",
                          maskonly8.train_volume_hashes)
    m16 = eval_restoration(maskonly16.model, world["eval16"], "mask_only",
                           maskonly16.train_volume_hashes)
    report(8, "mask 8 beats mask 16 at matched budget",
           m8.mean < m16.mean, f"mask8={m8.mean:.0f} mask16={m16.mean:.0f} HU^2")


def test_criterion_9_detection_exactness():
    ok = True
    detail = []
    for vol, truth in phantom_suite(seed=0, noise_sigma_hu=0.0):
        coords = detect_calcium(vol, threshold=700)
        got = np.zeros(vol.dims, dtype=bool)
        if len(coords):
            got[tuple(coords.T)] = True
        exact = np.array_equal(got, truth.labels == LABEL_PLAQUE)
        ok = ok and exact
        if truth.plaques:
            detail.append(f"{truth.name}:{int(got.sum())}vox")
    report(9, "noiseless detection == plaque label set (exact)",
           ok, " ".join(detail))


@pytest.mark.slow
def test_criterion_10_sliding_window_completeness(world, full16):
    vol, truth = [p for p in world["suite"] if p[1].name == "long-plaque"][0]
    plaque_x = np.where((truth.labels == LABEL_PLAQUE).any(axis=(1, 2)))[0]
    span = plaque_x.max() - plaque_x.min() + 1
    removed, rep = remove_calcium(vol, full16.model, REMOVAL)
    touched = np.zeros(vol.dims, dtype=bool)
    off = (REMOVAL.patch_size - REMOVAL.mask_size) // 2
    m = REMOVAL.mask_size
    for s in rep.steps:
        o = s.origin
        touched[o[0] + off:o[0] + off + m, o[1] + off:o[1] + off + m,
                o[2] + off:o[2] + off + m] = True
    outside_identical = np.array_equal(removed.data[~touched],
                                       vol.data[~touched])
    ok = (span > 2 * REMOVAL.mask_size and rep.converged
          and rep.residual_count == 0 and rep.iterations <= 50
          and outside_identical)
    report(10, "long-plaque removal: zero residual, locality outside masks",
           ok, f"span={span} iters={rep.iterations} "
               f"residual={rep.residual_count} outside_ok={outside_identical}")


@pytest.mark.slow
def test_criterion_11_experiment2_direction(world, full16):
    exp = experiment2(world["suite"], full16.model, REMOVAL)
    rows = [r for r in exp.rows if r.converged]
    over = all(r.original_pct > r.truth_pct for r in exp.rows)
    d_orig = float(np.median([r.abs_diff_original for r in rows]))
    d_rem = float(np.median([r.abs_diff_removed for r in rows]))
    ok = over and d_orig > d_rem and len(rows) == len(exp.rows) == 3
    detail = " ".join(f"{r.lesion_id}(t={r.truth_pct:.0f},o={r.original_pct:.0f},"
                      f"r={r.removed_pct:.0f})" for r in exp.rows)
    report(11, "stenosis: original overestimates every lesion; removal closer",
           ok, f"median|orig-truth|={d_orig:.1f} median|rem-truth|={d_rem:.1f} "
               f"{detail}")


def test_criterion_12_determinism_and_formats(tmp_path):
    # bit-identical volumes per seed
    a = phantom_suite(seed=5)
    b = phantom_suite(seed=5)
    vols_ok = all(np.array_equal(va.data, vb.data)
                  for (va, _), (vb, _) in zip(a, b))

    # bit-identical loss history and checkpoint for a tiny training run
    rng = np.random.default_rng(0)
    vol = Volume(rng.integers(-200, 400, (24, 24, 24)).astype(np.int16))
    ds = build_dataset([vol], RegionOfInterest((24, 24, 24)), 16, 8,
                       include_flips=False, mask_size=8)
    from decalcify.network import NetConfig
    cfg = TrainingConfig(lr=1e-3, steps=5, batch_size=2, seed=3, mask_size=8,
                         net_config=NetConfig(stem=2, growth=2, block_len=1))
    r1 = train(cfg, ds)
    r2 = train(cfg, ds)
    hist_ok = r1.loss_history == r2.loss_history
    r1.model.save(tmp_path / "c1.duw")
    r2.model.save(tmp_path / "c2.duw")
    ckpt_ok = (tmp_path / "c1.duw").read_bytes() == (tmp_path / "c2.duw").read_bytes()

    # CTV and checkpoint round-trips are bit-exact
    save_volume(a[0][0], tmp_path / "v.ctv")
    save_volume(load_volume(tmp_path / "v.ctv"), tmp_path / "v2.ctv")
    ctv_ok = (tmp_path / "v.ctv").read_bytes() == (tmp_path / "v2.ctv").read_bytes()
    arrays = load_checkpoint(tmp_path / "c1.duw")
    save_checkpoint(arrays, tmp_path / "c3.duw")
    duw_ok = (tmp_path / "c1.duw").read_bytes() == (tmp_path / "c3.duw").read_bytes()

    report(12, "determinism per seed; CTV/DUW round-trips bit-exact",
           vols_ok and hist_ok and ckpt_ok and ctv_ok and duw_ok,
           f"volumes={vols_ok} history={hist_ok} checkpoint={ckpt_ok} "
           f"ctv={ctv_ok} duw={duw_ok}")
