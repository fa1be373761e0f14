"""Acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
quantity, then asserts. Run ``pytest tests/test_acceptance.py -s -v``.
"""

import itertools
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as sps

from strokeseg import blocks as B
from strokeseg import cli
from strokeseg.autodiff import (
    Tensor,
    concat,
    conv_forward,
    conv_transpose,
    dropout,
    exp,
    gradient_check,
    interpolate,
    log,
    matmul,
    max_pool,
    no_grad,
    pad,
    precision,
    relu,
    sigmoid,
    softmax,
    tensor,
)
from strokeseg.autodiff.nn import attention, batch_norm
from strokeseg.data import (
    PhantomConfig,
    Protocol2D,
    Volume,
    crop_resize_2d,
    generate_phantom,
    slice_axial,
    slices_dataset,
    split_subjects,
    volumes_dataset,
)
from strokeseg.losses import LossConfig, PredictionPair, bce_loss, combined_loss, dice_loss
from strokeseg.metrics import metrics
from strokeseg.models import (
    PUBLISHED_EXTENTS,
    PUBLISHED_PARAMETER_COUNTS,
    VARIANTS,
    VARIANTS_2D,
    VARIANTS_3D,
    ModelSpec,
    build_model,
    parameter_count,
)
from strokeseg.stats import pearson_xy, wilcoxon_differences
from strokeseg.train import TrainConfig, train

SEEDS = range(10)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return emit


# ---------------------------------------------------------------------------
# 1. gradients


def _param(holder, attr, fn):
    original = getattr(holder, attr)

    def f(t):
        setattr(holder, attr, t)
        try:
            return fn()
        finally:
            setattr(holder, attr, original)

    return f, original.data


def gradient_cases(r):
    """(name, function, point) triples drawn from generator ``r``."""
    x = r.uniform(0.5, 2.0, size=(3, 4))
    o = r.uniform(0.5, 2.0, size=(3, 4))
    w = r.normal(size=(4, 2))
    yield "arith", lambda t: (t * o + t / o - t ** 2.0) * 0.5, x
    yield "exp_log", lambda t: exp(t) + log(t), x
    yield "sigmoid_relu", lambda t: sigmoid(t) * relu(t - 1.0), x
    yield "matmul", lambda t: matmul(t, w), x
    yield "softmax", lambda t: softmax(t, axis=-1) * o, x
    yield "shape_ops", lambda t: concat([pad(t, [(0, 1), (1, 0)]), pad(t, [(1, 0), (0, 1)])], axis=1)[1:, 2:] ** 2.0, x
    yield "reductions", lambda t: t.mean(axis=1) * t.sum(axis=0)[:3], x
    yield "dropout", lambda t: dropout(t, 0.3, np.random.default_rng(0)), x

    xi = r.normal(size=(2, 2, 5, 5))
    k = r.normal(size=(3, 2, 3, 3))
    b = r.normal(size=3)
    yield "conv_x", lambda t: conv_forward(t, tensor(k), tensor(b), 1, 1), xi
    yield "conv_w", lambda t: conv_forward(tensor(xi), t, tensor(b), 2, 1), k
    x3 = r.normal(size=(1, 2, 3, 3, 3))
    k3 = r.normal(size=(2, 2, 3, 3, 3))
    yield "conv3d", lambda t: conv_forward(t, tensor(k3), None, 1, 1), x3
    kt = r.normal(size=(2, 3, 3, 3))
    xt = r.normal(size=(1, 2, 3, 3))
    yield "conv_transpose_x", lambda t: conv_transpose(t, tensor(kt), None, 2, 1, 1), xt
    yield "conv_transpose_w", lambda t: conv_transpose(tensor(xt), t, None, 2, 1, 1), kt
    # distinct values keep max pooling away from ties
    yield "max_pool", lambda t: max_pool(t, 2), r.permutation(64).reshape(1, 1, 8, 8) / 7.0
    yield "interpolate", lambda t: interpolate(t, factor=2), r.normal(size=(1, 2, 3, 3))
    yield "trilinear", lambda t: interpolate(t, size=(3, 5, 4)), r.normal(size=(1, 1, 2, 3, 2))
    xb = r.normal(size=(3, 2, 3, 3))
    wb = r.normal(size=xb.shape)
    yield "batch_norm", lambda t: batch_norm(t, tensor(np.ones(2)), tensor(np.zeros(2)), np.zeros(2),
                                             np.ones(2), True) * wb, xb
    q, kk, v = r.normal(size=(2, 5, 4)), r.normal(size=(2, 6, 4)), r.normal(size=(2, 6, 3))
    yield "attention_q", lambda t: attention(t, tensor(kk), tensor(v), 0.5), q
    yield "attention_k", lambda t: attention(tensor(q), t, tensor(v), 0.5), kk
    yield "attention_v", lambda t: attention(tensor(q), tensor(kk), t, 0.5), v

    g = r.integers(0, 2, size=(2, 1, 3, 3))
    p = r.uniform(0.05, 0.95, size=g.shape)
    yield "combined_loss", lambda t: combined_loss(PredictionPair(t, g)), p

    cb = B.init_conv_block(r, 2, 3, 2)
    xc = r.normal(size=(2, 2, 4, 4))
    yield "conv_block", lambda t: B.conv_block(t, cb, True), xc
    f, pt = _param(cb.conv1, "weight", lambda: B.conv_block(tensor(xc), cb, True))
    yield "conv_block_weight", f, pt
    rb = B.init_residual_block(r, 2, 3, 3)
    yield "residual_block", lambda t: B.residual_block(t, rb, True), r.normal(size=(2, 2, 3, 3, 3))
    ag = B.init_attention_gate(r, 2, 3, 2)
    skip, gate = r.normal(size=(1, 2, 4, 4)), r.normal(size=(1, 3, 2, 2))
    yield "attention_gate_skip", lambda t: B.attention_gate(t, tensor(gate), ag), skip
    yield "attention_gate_gate", lambda t: B.attention_gate(tensor(skip), t, ag), gate
    gsa = B.init_gsa(r, 8, 2)
    xg = r.normal(size=(1, 8, 2, 3))
    yield "gsa", lambda t: B.gsa_forward(t, gsa), xg
    tsa = B.init_tsa(r, 4, project=False)
    yield "tsa", lambda t: B.tsa_forward(t, tsa), r.normal(size=(1, 4, 2, 2))
    gs2, ts2, saa = B.init_gsa(r, 8), B.init_tsa(r, 8, project=False), B.init_saa()
    saa.psi1 = tensor(r.normal(size=1), requires_grad=True)
    saa.psi2 = tensor(r.normal(size=1), requires_grad=True)
    xs = r.normal(size=(1, 8, 2, 2))
    yield "saa", lambda t: B.saa_forward(t, gs2, ts2, saa), xs
    f, pt = _param(saa, "psi1", lambda: B.saa_forward(tensor(xs), gs2, ts2, saa))
    yield "saa_psi1", f, pt
    mh = B.init_mhsa(r, 8, 4)
    yield "mhsa", lambda t: B.mhsa_forward(t, mh), r.normal(size=(1, 8, 2, 2))
    mc = B.init_mhsa(r, 4, 4, query_channels=6, upsample_channels=6)
    sk, dec = r.normal(size=(1, 4, 4, 4)), r.normal(size=(1, 6, 2, 2))
    yield "mhca_skip", lambda t: B.mhca_forward(t, tensor(dec), mc), sk
    yield "mhca_decoder", lambda t: B.mhca_forward(tensor(sk), t, mc), dec


def test_criterion_01_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    with precision("float64"):
        for seed in SEEDS:
            for name, f, point in gradient_cases(np.random.default_rng(seed)):
                worst[name] = max(worst.get(name, 0.0), gradient_check(f, point))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-4 and elapsed < 300
    verdict(1, ok, f"{len(worst)} operations x {len(SEEDS)} seeds, max rel err {worst[top]:.2e} ({top}), "
                   f"{elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2-3. parameter counts and shapes


def test_criterion_02_parameter_counts(verdict):
    rel = {}
    for v in VARIANTS:
        rel[v] = parameter_count(build_model(ModelSpec(v), seed=0)) / PUBLISHED_PARAMETER_COUNTS[v] - 1
    worst = max(rel, key=lambda v: abs(rel[v]))
    ok = all(abs(e) <= 0.10 for e in rel.values())
    verdict(2, ok, ", ".join(f"{v} {e:+.1%}" for v, e in rel.items()))
    assert ok, worst


def test_criterion_03_shape_contracts(verdict):
    shapes = {}
    ok = True
    with precision("float32"), no_grad():
        for v in VARIANTS:
            m = build_model(ModelSpec(v), seed=0).astype(np.float32)
            m.eval()
            ext = PUBLISHED_EXTENTS[v]
            x = np.random.default_rng(0).normal(size=(1, 1) + ext).astype(np.float32)
            y = m(Tensor(x)).data
            shapes[v] = y.shape
            ok &= y.shape == x.shape and bool(((y >= 0) & (y <= 1)).all())
            del m
    verdict(3, ok, "; ".join(f"{v} -> {'x'.join(map(str, s[2:]))}" for v, s in shapes.items()))
    assert ok


# ---------------------------------------------------------------------------
# 4. overfit surrogate


def overfit_fixture_2d():
    vols = [generate_phantom(PhantomConfig(seed=s, extents=(48, 48, 24), lesion_radius_mm=(3.0, 9.0)))
            for s in range(4)]
    ds = slices_dataset(vols, "train", Protocol2D(box=None, size=48))
    frac = ds.masks.reshape(len(ds), -1).mean(1)
    return ds.subset(np.sort(np.argsort(-frac, kind="stable")[:8]))


def overfit_fixture_3d():
    vols = [generate_phantom(PhantomConfig(seed=s, extents=(32, 32, 32), lesion_radius_mm=(3.0, 9.0)))
            for s in range(2)]
    return volumes_dataset(vols, (32, 32, 32))


def test_criterion_04_overfit(verdict):
    t0 = time.perf_counter()
    outcome = {}
    ds2, ds3 = overfit_fixture_2d(), overfit_fixture_3d()
    assert len(ds2) == 8 and len(ds3) == 2
    for v in VARIANTS:
        is_3d = v in VARIANTS_3D
        ds = ds3 if is_3d else ds2
        spec = ModelSpec(v, width_scale=4 if is_3d else 8, input_extents=ds.images.shape[2:], dropout=0.0)
        target, budget = (0.90, 300) if is_3d else (0.95, 200)
        cfg = TrainConfig(lr=3e-3, epochs=budget, batch_size=8, weight_decay=0.0, seed=0,
                          scheduler="cosine_annealing", target_train_dice=target)
        _, rec = train(build_model(spec, seed=0), ds, ds, cfg)
        best = max(r.train_dice for r in rec.epochs)
        outcome[v] = (best >= target, len(rec.epochs), best,
                      rec.epochs[1].train_loss < rec.epochs[0].train_loss)
    elapsed = time.perf_counter() - t0
    ok = all(o[0] and o[3] for o in outcome.values()) and elapsed < 1200
    verdict(4, ok, "; ".join(f"{v} {o[2]:.3f} @ {o[1]} ep" for v, o in outcome.items()) + f"; {elapsed:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 5-6. metrics and loss


def _brute(pred, gt):
    tp = fp = fn = 0
    for a, b in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        tp += a and b
        fp += a and not b
        fn += b and not a
    if tp + fp + fn == 0:
        return (1.0, 1.0, 1.0, 1.0)
    div = lambda a, b: a / b if b else 0.0  # noqa: E731
    return (div(2 * tp, 2 * tp + fp + fn), div(tp, tp + fp + fn), div(tp, tp + fp), div(tp, tp + fn))


def test_criterion_05_metric_oracle(verdict):
    r = np.random.default_rng(5)
    mismatches, identity_err = 0, 0.0
    for i in range(1000):
        shape = tuple(r.integers(1, 33, size=2)) if i % 2 == 0 else tuple(r.integers(1, 9, size=3))
        pred = (r.uniform(size=shape) < r.uniform()).astype(np.uint8)
        gt = (r.uniform(size=shape) < r.uniform()).astype(np.uint8)
        s = metrics(pred, gt)
        mismatches += tuple(s) != _brute(pred, gt)
        identity_err = max(identity_err, abs(s.dice - 2 * s.iou / (1 + s.iou)))
    ok = mismatches == 0 and identity_err < 1e-12
    verdict(5, ok, f"1000 masks, {mismatches} mismatches, max |dice - 2iou/(1+iou)| {identity_err:.1e}")
    assert ok


def test_criterion_06_loss_contract(verdict):
    worst, exact = 0.0, True
    with precision("float64"):
        for seed in range(100):
            r = np.random.default_rng(seed)
            pair = PredictionPair(tensor(r.uniform(size=(2, 1, 6, 6))), r.integers(0, 2, size=(2, 1, 6, 6)))
            d, b = dice_loss(pair).item(), bce_loss(pair).item()
            worst = max(worst, abs(combined_loss(pair, LossConfig(0.9)).item() - (0.9 * d + 0.1 * b)))
            exact &= combined_loss(pair, LossConfig(1.0)).item() == d
            exact &= combined_loss(pair, LossConfig(0.0)).item() == b
    ok = worst <= 1e-12 and exact
    verdict(6, ok, f"100 pairs, max |L - (0.9 Ld + 0.1 Lb)| {worst:.1e}, gamma 0/1 exact: {exact}")
    assert ok


# ---------------------------------------------------------------------------
# 7-8. statistics

CRITICAL_05 = {10: 8, 11: 10, 12: 13, 13: 17, 14: 21, 15: 25, 16: 29, 17: 34, 18: 40, 19: 46, 20: 52}


def _with_rank_sum(n, target):
    signs, left = -np.ones(n), target
    for rank in range(n, 0, -1):
        if rank <= left:
            signs[rank - 1], left = 1, left - rank
    return signs * np.arange(1, n + 1)


def test_criterion_07_wilcoxon(verdict):
    p3 = wilcoxon_differences([1, 2, 3]).p_value
    p5 = wilcoxon_differences([-1, 2, -3, 4, -5]).p_value
    table_ok = all(wilcoxon_differences(_with_rank_sum(n, t)).p_value <= 0.05 <
                   wilcoxon_differences(_with_rank_sum(n, t + 1)).p_value for n, t in CRITICAL_05.items())
    # brute force sign enumeration at n = 10 as a second route
    d = np.arange(1, 11) * np.array([1, -1, 1, 1, -1, 1, -1, -1, 1, 1])
    w = d[d > 0].sum()
    sums = [sum(k + 1 for k in range(10) if s[k]) for s in itertools.product((0, 1), repeat=10)]
    brute = min(1.0, 2 * min(np.mean([s <= w for s in sums]), np.mean([s >= w for s in sums])))
    enum_ok = abs(wilcoxon_differences(d).p_value - brute) < 1e-12
    r = np.random.default_rng(7)
    gap = 0.0
    for _ in range(200):
        x = r.normal(r.uniform(-0.6, 0.6), 1, size=25)
        gap = max(gap, abs(wilcoxon_differences(x, method="exact").p_value -
                           wilcoxon_differences(x, method="normal_approx").p_value))
    ok = p3 == 0.25 and p5 == 0.8125 and table_ok and enum_ok and gap <= 0.01
    verdict(7, ok, f"n=3 p={p3}, n=5 p={p5}, critical values n=10..20 {'ok' if table_ok else 'off'}, "
                   f"enumeration {'ok' if enum_ok else 'off'}, max |exact - normal| at n=25 {gap:.4f}")
    assert ok


def test_criterion_08_pearson(verdict):
    err = abs(pearson_xy([1, 2, 3], [1, 2, 4]).r - 9 / math.sqrt(84))
    r = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        n = int(r.integers(3, 40))
        x, y = r.normal(size=n), r.normal(size=n)
        a, b = r.uniform(0.1, 10) * r.choice([-1, 1]), r.normal(0, 10)
        base = pearson_xy(x, y).r
        worst = max(worst, abs(pearson_xy(a * x + b, y).r - math.copysign(1, a) * base),
                    abs(pearson_xy(x, abs(a) * y + b).r - base))
    scipy_gap = abs(pearson_xy(x, y).p_value - sps.pearsonr(x, y).pvalue)
    ok = err <= 1e-12 and worst <= 1e-12 and scipy_gap < 1e-10
    verdict(8, ok, f"|r - 9/sqrt(84)| {err:.1e}, affine invariance max dev {worst:.1e} on 100 series")
    assert ok


# ---------------------------------------------------------------------------
# 9. SAA null initialisation


def test_criterion_09_saa_null_init(verdict):
    equal = []
    with precision("float64"):
        for seed in SEEDS:
            r = np.random.default_rng(seed)
            base = r.normal(size=(2, 8, 3, 3))
            out = B.saa_forward(tensor(base), B.init_gsa(r, 8), B.init_tsa(r, 8, project=False), B.init_saa())
            equal.append(np.array_equal(out.data, base))
    m = build_model(ModelSpec("transattn2d", width_scale=8, input_extents=(32, 32)), 0)
    psi = (m.arch["saa"].psi1.data, m.arch["saa"].psi2.data)
    ok = all(equal) and not any(p.any() for p in psi)
    verdict(9, ok, f"{sum(equal)}/{len(equal)} inputs bit-equal, model psi1 = psi2 = 0: {not any(p.any() for p in psi)}")
    assert ok


# ---------------------------------------------------------------------------
# 10. data pipeline


def test_criterion_10_pipeline(verdict):
    from golden.make_golden import source_image, source_mask

    golden = Path(__file__).parent / "golden"
    m = split_subjects([f"sub-{i:04d}" for i in range(655)], seed=0)
    sizes = (len(m.train), len(m.validation), len(m.test))

    mask = np.zeros((40, 40, 8), np.uint8)
    mask[10:20, 10:20, 1] = 1
    mask[3, 3, 4] = 1  # 1/1600 of the slice, under 0.1 %
    mask[30, 30, 6] = 1
    fixtures = [Volume("tiny", np.zeros(mask.shape), mask=mask)]
    fixtures += [generate_phantom(PhantomConfig(seed=s)) for s in range(5)]
    counts = [(len(slice_axial(v, "test")), len(slice_axial(v, "val"))) for v in fixtures]
    rejection_ok = all(t >= v for t, v in counts) and counts[0] == (3, 1)

    img = np.array_equal(crop_resize_2d(source_image(), "image"), np.load(golden / "crop_resize_image.npy"))
    msk = np.array_equal(crop_resize_2d(source_mask(), "mask"), np.load(golden / "crop_resize_mask.npy"))
    ok = sizes == (393, 131, 131) and rejection_ok and img and msk
    verdict(10, ok, f"split {sizes[0]}/{sizes[1]}/{sizes[2]}, test/val slice counts {counts}, "
                    f"golden image {img}, golden mask {msk}")
    assert ok


# ---------------------------------------------------------------------------
# 11. end to end


def test_criterion_11_benchmark(verdict, tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--subjects", "20", "--seed", "0", "--out", str(data)]) == 0
    times, codes = [], []
    for run in ("a", "b"):
        t0 = time.perf_counter()
        codes.append(cli.main(["benchmark", "--data", str(data), "--scale", "8", "--seed", "0",
                               "--out", str(tmp_path / run)]))
        times.append(time.perf_counter() - t0)
    a, b = tmp_path / "a", tmp_path / "b"
    names = ["report.txt", "metrics.csv", "stats.csv", "stats.txt", "scatter.svg", "boxplot.svg"]
    present = all((a / n).exists() for n in names)
    identical = present and all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    metric_rows = (a / "metrics.csv").read_text().strip().splitlines()[1:] if present else []
    stats_rows = (a / "stats.csv").read_text().strip().splitlines()[1:] if present else []
    rows_ok = len(metric_rows) == 8 and all(",," not in r for r in metric_rows) and len(stats_rows) == 3
    ok = codes == [0, 0] and present and identical and rows_ok and max(times) < 1800
    verdict(11, ok, f"exit {codes}, {len(metric_rows)} metric rows, {len(stats_rows)} stats rows, "
                    f"byte-identical {identical}, runs {times[0]:.0f} s and {times[1]:.0f} s")
    assert ok
