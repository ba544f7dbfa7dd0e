"""End-to-end acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy criteria (overfit, representation quality, scaling) run full-size
models, take minutes and carry the ``slow`` marker; the rest finish in seconds.
"""
import math
import time

import numpy as np
import pytest

from samba_kit import tensor as tn
from samba_kit.bench import SCALING_LENGTHS, run_bench
from samba_kit.data import SyntheticSpec, TrialSet, band_power, gen_synthetic, read_trials, standardize, write_trials
from samba_kit.masking import block_length_range, sample_tsr_mask, visible_budget
from samba_kit.model import ModelConfig, SambaModel, tiny_config
from samba_kit.objective import l1_loss, spectral_loss, tf_loss
from samba_kit.probing import auroc, balanced_accuracy, extract_representation, fit_linear_probe, linear_probe_eval, probe_split
from samba_kit.saie import Montage, SpatialEmbedding, SpatialMLP, bundled_montage, project, spatial_weights
from samba_kit.ssm import Mamba2Block, SSMCoefficients, ssd_quadratic, ssd_scan
from samba_kit.tensor import Tensor, grad_check
from samba_kit.training import MaskConfig, ScheduleSpec, TrainConfig, model_from_checkpoint, onecycle_lr, pretrain

from test_model import _get, _locate, _set, small_montage
from test_objective import naive_spectral
from test_probing import pair_auroc
from test_saie import random_montage
from test_ssm import random_coeffs
from test_tensor import OPS

# pretraining recipe for the representation criterion
REPR_EPOCHS = 12
REPR_BATCH = 8


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def test_c01_ssd_duality(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    for _ in range(150):
        B, T, N = rng.integers(1, 5), rng.integers(1, 65), rng.integers(1, 17)
        d, H = [(1, 1), (2, 1), (2, 2), (4, 1), (4, 2), (8, 2), (8, 4)][rng.integers(7)]
        x = rng.normal(size=(B, T, d))
        c = random_coeffs(rng, B, T, H, N, d)
        worst = max(worst, float(np.abs(ssd_scan(x, c).data - ssd_quadratic(x, c).data).max()))
        n += 1
    dt = time.perf_counter() - t0
    report(1, worst < 1e-8 and dt < 60, f"{n} instances, max |scan - quadratic| = {worst:.2e}, {dt:.1f} s")


def test_c02_gradient_integrity(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    errs = {}
    for name, f in OPS.items():
        errs[name] = max(grad_check(f, np.random.default_rng(100 + i).normal(size=(2, 4, 6))) for i in range(20))

    # composite layers
    c = random_coeffs(rng, 1, 7, 2, 3, 4)
    w = rng.normal(size=(1, 7, 4))
    for form in (ssd_scan, ssd_quadratic):
        errs[form.__name__] = grad_check(lambda t: tn.tsum(form(t, c) * w), rng.normal(size=(1, 7, 4)))
    blk = Mamba2Block(4, np.random.default_rng(2), d_state=3, headdim=4)
    xb, wb = rng.normal(size=(1, 6, 4)), rng.normal(size=(1, 6, 4))
    errs["mamba2_block"] = grad_check(lambda t: tn.tsum(blk(t) * wb), xb)
    mlp = SpatialMLP(rng, hidden=6, init_std=0.7)
    P_in, P_out = random_montage(5, 7).coords, random_montage(3, 8).coords
    xs, ws = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 3, 4))

    def saie(w1):
        mlp.W1 = w1
        return tn.tsum(project(xs, spatial_weights(mlp, P_in, P_out)) * ws)

    errs["saie"] = grad_check(saie, mlp.W1.data.copy())
    y = rng.normal(size=(2, 3, 12))
    errs["tf_loss"] = grad_check(lambda t: tf_loss(t, y), rng.normal(size=(2, 3, 12)))
    ops_worst = max(errs.values())

    # end-to-end, tiny instance, target held fixed (it is a stop-gradient constant)
    model = SambaModel(tiny_config())
    mi = small_montage(4, 9)
    x = np.random.default_rng(5).normal(size=(1, 4, 32))
    mask = sample_tsr_mask(32, 0.5, 2, seed=3)
    with tn.no_grad():
        target = model(x, mi).target
    e2e = grad_check(lambda t: tf_loss(model(t, mi, mask).reconstruction, target), x)
    for name in ("encoder.blocks1.0.in_proj.weight", "bottleneck.lambdas.0", "saie.mlp.W1"):
        owner, attr = _locate(model, name)
        old = _get(owner, attr)

        def g(v):
            _set(owner, attr, v)
            try:
                return tf_loss(model(x, mi, mask).reconstruction, target)
            finally:
                _set(owner, attr, old)

        e2e = max(e2e, grad_check(g, old.data.copy(), indices=range(min(12, old.size))))
    dt = time.perf_counter() - t0
    worst_name = max(errs, key=errs.get)
    report(2, ops_worst < 1e-4 and e2e < 1e-3 and dt < 60,
           f"ops max rel err {ops_worst:.1e} ({worst_name}), end-to-end {e2e:.1e}, {dt:.1f} s")


def test_c03_tsr_mask_law(report):
    checked = 0
    for rho in (0.25, 0.5, 0.75):
        for l in range(1, 33):
            vis = visible_budget(l, rho)
            for beta in range(1, vis + 1):
                for seed in range(20):
                    m = sample_tsr_mask(l, rho, beta, seed=seed)
                    m.check()
                    assert m.visible_count == math.floor((1 - rho) * l + 1e-9)
                    assert len(m.visible_blocks) == beta
                    checked += 1
    lo, hi = block_length_range(128, 4, 0.5, 1.5)
    assert (lo, hi) == (16, 48)
    counts = np.zeros(256)
    n = 10_000
    for s in range(n):
        m = sample_tsr_mask(256, 0.5, 4, seed=s)
        m.check()
        assert m.visible_count == 128 and len(m.visible_blocks) == 4
        assert all(lo <= k <= hi for k in m.draw_lengths[:3])
        counts += m.visibility()
    dev = float(np.abs(counts / n - 0.5).max())
    report(3, dev <= 0.05, f"{checked} small draws valid; 10 000 seeds at l=256: max visibility deviation {dev:.3f}")


def test_c04_saie_contract(report, tmp_path):
    worst = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        mlp = SpatialMLP(rng, init_std=1.0)
        W = spatial_weights(mlp, random_montage(int(rng.integers(1, 65)), seed).coords,
                            random_montage(int(rng.integers(1, 33)), seed + 1).coords).data
        assert np.all(W > 0)
        worst = max(worst, float(np.abs(W.sum(1) - 1).max()))
    target = bundled_montage("standard_1020_16")
    emb = SpatialEmbedding(target, np.random.default_rng(1), init_std=0.5)
    mi = bundled_montage("emotiv_14")
    const = emb(np.full((2, 14, 9), 2.5), mi).data
    const_err = float(np.abs(const - 2.5).max())
    x = np.random.default_rng(2).normal(size=(3, 14, 20))
    perm = np.random.default_rng(3).permutation(14)
    mp = Montage("perm", tuple(mi.channels[i] for i in perm), mi.coords[perm])
    equivariant = emb(x, mi).data.tobytes() == emb(x[:, perm], mp).data.tobytes()

    # one checkpoint, two montages, same code path
    pool = standardize(gen_synthetic(SyntheticSpec(n_trials=4, duration_s=0.5)))
    pretrain(tiny_config(), TrainConfig(epochs=1, batch_size=4, val_fraction=0.0), MaskConfig(), pool, out_dir=tmp_path)
    model, _ = model_from_checkpoint(tmp_path / "checkpoint.ckpt")
    accs = {}
    for name in ("emotiv_14", "standard_1020_22"):
        ts = standardize(gen_synthetic(SyntheticSpec(n_trials=10, duration_s=0.5, montage=name)))
        metrics, Z, _ = linear_probe_eval(model, ts)
        accs[ts.n_channels] = metrics["balanced_accuracy"]
        assert Z.shape[0] == ts.n_trials
    ok = worst <= 1e-6 and const_err < 1e-12 and equivariant and set(accs) == {14, 22}
    report(4, ok, f"row sums within {worst:.1e}, constant error {const_err:.1e}, permutation bit-exact={equivariant}, "
                  f"probed channel counts {sorted(accs)}")


def test_c05_loss_correctness(report):
    rng = np.random.default_rng(1)
    y = rng.normal(size=(2, 3, 13))
    yhat = rng.normal(size=y.shape)
    want = naive_spectral(yhat, y)
    rel = abs(spectral_loss(yhat, y).item() - want) / want
    c = 0.3
    y = rng.normal(size=(2, 3, 16))
    l1_err = abs(l1_loss(y - c, y).item() - abs(c))
    spec_err = abs(spectral_loss(y + c, y).item() - 16 * c * c)
    ok = rel < 1e-10 and l1_err < 1e-10 and spec_err < 1e-10
    report(5, ok, f"DFT oracle rel err {rel:.1e}, L1 offset err {l1_err:.1e}, spectral offset err {spec_err:.1e}")


@pytest.mark.slow
def test_c06_overfit_sanity(report):
    # unmasked: with a masked objective the hidden half is unpredictable noise and
    # the reconstruction error cannot collapse
    t0 = time.perf_counter()
    ts = standardize(gen_synthetic(SyntheticSpec(n_trials=4)))
    cfg = TrainConfig(epochs=300, batch_size=8, val_fraction=0.0, checkpoint_every=0, eval_every=1000)
    res = pretrain(ModelConfig(), cfg, MaskConfig(mask_ratio=0.0), ts)
    dt = time.perf_counter() - t0
    a = res.step_acmse
    ratio = a[-1] / a[0]
    report(6, len(a) == 300 and ratio < 0.01 and dt < 300,
           f"8 trials, {len(a)} steps: ACMSE {a[0]:.4f} -> {a[-1]:.2e} ({100 * ratio:.2f}% of step 1), {dt:.0f} s")


def band_power_oracle(ts: TrialSet) -> float:
    Z = band_power(ts.data, ts.rate_hz, [6.0, 10.0, 20.0])
    tr, te = probe_split(ts.n_trials, 0.3, 0, ts.labels)
    probe = fit_linear_probe(Z[tr], ts.labels[tr])
    return balanced_accuracy(probe.predict(Z[te]), ts.labels[te])


@pytest.mark.slow
def test_c07_representation_quality(report, tmp_path):
    t0 = time.perf_counter()
    labelled = standardize(gen_synthetic(SyntheticSpec()))
    assert labelled.data.shape == (400, 14, 256) and labelled.rate_hz == 128.0
    ceiling = band_power_oracle(labelled)
    # pretraining sees a disjoint draw with its labels stripped
    draw = standardize(gen_synthetic(SyntheticSpec(seed=1)))
    pool = TrialSet(draw.data, draw.rate_hz, draw.montage)
    cfg = TrainConfig(epochs=REPR_EPOCHS, batch_size=REPR_BATCH, checkpoint_every=0, eval_every=REPR_EPOCHS)
    pretrain(ModelConfig(), cfg, MaskConfig(), pool, out_dir=tmp_path)
    model, _ = model_from_checkpoint(tmp_path / "checkpoint.ckpt")
    pre = linear_probe_eval(model, labelled)[0]["balanced_accuracy"]
    rand = linear_probe_eval(SambaModel(ModelConfig()), labelled)[0]["balanced_accuracy"]
    dt = time.perf_counter() - t0
    ok = pre >= 0.90 and pre - rand >= 0.10 and ceiling >= 0.95 and dt < 900
    report(7, ok, f"pretrained {pre:.3f}, random init {rand:.3f}, band-power ceiling {ceiling:.3f}, {dt:.0f} s")


def test_c08_schedule_endpoints(report):
    s = ScheduleSpec(1000)
    got = (onecycle_lr(0, s), onecycle_lr(100, s), onecycle_lr(1000, s))
    report(8, got == (2.5e-4, 5e-4, 5e-6), f"lr at 0 / 10% / end = {got}")


@pytest.mark.slow
def test_c09_scaling_behavior(report):
    t0 = time.perf_counter()
    rep = run_bench(("scan", "quadratic"), SCALING_LENGTHS, channels=22, reps=5, keep_outputs=True, measure_memory=False)
    dt = time.perf_counter() - t0
    assert all(r.status == "ok" for r in rep.rows)
    agree = max(float(np.abs(rep.outputs["scan", T] - rep.outputs["quadratic", T]).max()) for T in SCALING_LENGTHS)
    s, q = rep.slopes["scan"], rep.slopes["quadratic"]
    ok = s < 1.4 and q > 1.7 and agree < 1e-6 and dt < 600
    report(9, ok, f"log-log slope scan {s:.2f}, quadratic {q:.2f}; max output diff {agree:.1e}; {dt:.0f} s")


def test_c10_metric_suite(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        y = rng.integers(0, 2, 50)
        y[:2] = [0, 1]
        s = np.round(rng.normal(size=50), 1)
        worst = max(worst, abs(auroc(s, y) - pair_auroc(s, y)))
    y = np.array([0] * 20 + [1] * 30)
    const = auroc(np.full(50, 0.3), y)
    perfect = auroc(np.r_[np.zeros(20), np.ones(30)], y)
    bacc = balanced_accuracy(np.ones(50, dtype=int), y)
    ok = worst < 1e-12 and const == 0.5 and perfect == 1.0 and bacc == 0.5
    report(10, ok, f"pair-oracle diff {worst:.1e}, constant {const}, perfect {perfect}, constant-classifier bacc {bacc}")


def test_c11_determinism_and_persistence(report, tmp_path):
    ts = standardize(gen_synthetic(SyntheticSpec(n_trials=6, duration_s=0.5)))
    cfg = TrainConfig(epochs=2, batch_size=4, val_fraction=0.2)
    runs = [pretrain(tiny_config(), cfg, MaskConfig(), ts, out_dir=tmp_path / f"run{i}") for i in range(2)]
    a, b = runs
    same_logs = a.step_losses == b.step_losses and [r.val_acmse for r in a.history] == [r.val_acmse for r in b.history]
    same_params = all(p.data.tobytes() == q.data.tobytes()
                      for (_, p), (_, q) in zip(a.model.named_parameters(), b.model.named_parameters()))
    m = ts.resolve_montage()
    same_repr = (extract_representation(a.model, ts.data, m).tobytes()
                 == extract_representation(b.model, ts.data, m).tobytes())
    same_ckpt = (tmp_path / "run0" / "checkpoint.ckpt").read_bytes() == (tmp_path / "run1" / "checkpoint.ckpt").read_bytes()
    x = ts.data[:3].astype(np.float64)
    with tn.no_grad():
        before = a.model(x, m).reconstruction.data
        loaded, _ = model_from_checkpoint(tmp_path / "run0" / "checkpoint.ckpt")
        after = loaded(x, m).reconstruction.data
    ckpt_forward = before.tobytes() == after.tobytes()
    write_trials(ts, tmp_path / "t.bin")
    back = read_trials(tmp_path / "t.bin")
    trials_exact = back.data.tobytes() == ts.data.tobytes() and np.array_equal(back.labels, ts.labels)
    ok = same_logs and same_params and same_repr and same_ckpt and ckpt_forward and trials_exact
    report(11, ok, f"runs identical (logs={same_logs}, params={same_params}, features={same_repr}, "
                   f"checkpoint bytes={same_ckpt}); checkpoint forward={ckpt_forward}; trial file={trials_exact}")
