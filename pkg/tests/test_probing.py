import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from samba_kit.data import SyntheticSpec, gen_synthetic, standardize
from samba_kit.model import SambaModel, tiny_config
from samba_kit.probing import (
    STAT_NAMES, Standardizer, auroc, balanced_accuracy, evaluate, extract_representation, finetune,
    fit_linear_probe, linear_probe_eval, probe_split, summarize, weighted_f1, write_representation_csv,
)


def pair_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def blobs(n=60, d=4, gap=6.0, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    Z = rng.normal(size=(n, d))
    Z[y == 1, 0] += gap
    return Z, y


def test_summary_constant_and_ramp():
    F = np.full((1, 2, 7), 3.25)
    z = summarize(F)
    assert z.shape == (1, 2, 9)
    np.testing.assert_array_equal(np.delete(z, 3, axis=-1), 3.25)
    assert np.all(z[..., 3] == 0)
    ramp = np.arange(1, 101, dtype=float)[None, None]
    z = summarize(ramp)[0, 0]
    assert z[STAT_NAMES.index("q50")] == 50.5
    assert z[STAT_NAMES.index("q25")] == np.sort(ramp[0, 0])[24] + 0.75 * 1.0


def test_summary_short_sequence_warns():
    with pytest.warns(RuntimeWarning):
        z = summarize(np.ones((1, 1, 1)) * 2.0)
    assert z[0, 0, 3] == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(2, 30)), elements=st.floats(-1e6, 1e6)))
def test_summary_quantiles_monotone(F):
    z = summarize(F)
    order = z[..., [0, 4, 5, 6, 7, 8, 1]]
    assert np.all(np.diff(order, axis=-1) >= 0)
    assert np.all(z[..., 3] >= 0)


def test_extract_shapes_any_length():
    model = SambaModel(tiny_config())
    ts = gen_synthetic(SyntheticSpec(n_trials=2, duration_s=0.5))
    m = ts.resolve_montage()
    for T in (32, 44, 64):
        Z = extract_representation(model, ts.data[..., :T], m)
        assert Z.shape == (4, 16, 9)
    assert extract_representation(model, ts.data, m, tap="encoder", stats="mean").shape == (4, 16, 1)
    with pytest.raises(ValueError):
        extract_representation(model, ts.data, m, tap="decoder")


def test_representation_csv(tmp_path):
    Z = np.arange(12.0).reshape(2, 2, 3)
    write_representation_csv(Z, [0, 1], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "trial_id,label,f0,f1,f2,f3,f4,f5"
    assert lines[2].startswith("1,1,6.0,")


def test_probe_separable_blobs():
    Z, y = blobs()
    probe = fit_linear_probe(Z, y)
    assert np.mean(probe.predict(Z) == y) == 1.0
    assert np.all(np.isfinite(probe.weight)) and np.all(np.isfinite(probe.bias))


def test_probe_single_class_rejected():
    with pytest.raises(ValueError):
        fit_linear_probe(np.ones((4, 2)), [1, 1, 1, 1])


def test_probe_convex_multi_init():
    Z, y = blobs(gap=0.8, seed=1)
    losses = [fit_linear_probe(Z, y, seed=s).final_loss for s in range(5)]
    assert max(losses) - min(losses) < 1e-6


def test_probe_gradient_converges():
    Z, y = blobs(gap=0.8, seed=2)
    probe = fit_linear_probe(Z, y)
    from samba_kit.probing import _softmax_ce

    Zs = probe.scaler.transform(Z)
    Y = (y[:, None] == probe.classes[None]).astype(float)
    _, g = _softmax_ce(np.concatenate([probe.weight.ravel(), probe.bias]), Zs, Y, probe.l2)
    assert np.abs(g).max() < 1e-5


def test_shuffled_labels_are_chance():
    rng = np.random.default_rng(3)
    Z, y = blobs(n=400, d=6, gap=3.0)
    ys = rng.permutation(y)
    tr, te = probe_split(len(y), 0.3, 0, ys)
    probe = fit_linear_probe(Z[tr], ys[tr])
    assert abs(balanced_accuracy(probe.predict(Z[te]), ys[te]) - 0.5) <= 0.10


def test_standardizer_uses_training_split_only():
    Z, y = blobs(n=80, seed=4)
    tr, te = probe_split(80, 0.3, 0, y)
    a = fit_linear_probe(Z[tr], y[tr]).scaler
    b = fit_linear_probe(Z[te], y[te]).scaler
    np.testing.assert_allclose(a.mean, Z[tr].mean(0))
    assert not np.allclose(a.mean, b.mean)
    assert Standardizer.fit(np.ones((3, 2))).std.min() > 0


def test_multiclass_probe():
    rng = np.random.default_rng(5)
    y = np.repeat([0, 1, 2], 30)
    Z = rng.normal(size=(90, 3)) + 5 * np.eye(3)[y]
    probe = fit_linear_probe(Z, y)
    assert probe.weight.shape == (3, 3)
    m = evaluate(probe.predict(Z), probe.scores(Z), y)
    assert "auroc" not in m and m["balanced_accuracy"] > 0.95


def test_auroc_examples():
    y = np.array([0, 0, 1, 1])
    assert auroc([0.1, 0.2, 0.8, 0.9], y) == 1.0
    assert auroc([0.5] * 4, y) == 0.5
    m = evaluate(np.array([0, 0, 1, 1]), np.array([0.1, 0.2, 0.8, 0.9]), y)
    assert m["balanced_accuracy"] == 1.0 and m["auroc"] == 1.0


def test_auroc_pair_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        y = rng.integers(0, 2, 50)
        y[:2] = [0, 1]
        s = np.round(rng.normal(size=50), 1)  # rounding creates ties
        assert abs(auroc(s, y) - pair_auroc(s, y)) < 1e-12


def test_auroc_monotone_invariance():
    rng = np.random.default_rng(7)
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    s = rng.normal(size=40)
    assert auroc(s, y) == auroc(np.exp(3 * s) + 1, y)
    with pytest.raises(ValueError):
        auroc(s, np.zeros(40))


def test_constant_classifier_half():
    y = np.array([0] * 7 + [1] * 13)
    assert balanced_accuracy(np.zeros(20, dtype=int), y) == 0.5
    assert balanced_accuracy(np.ones(20, dtype=int), y) == 0.5


def test_weighted_f1():
    y = np.array([0, 0, 0, 1])
    pred = np.array([0, 0, 1, 1])
    # class 0: p=1, r=2/3 -> 0.8; class 1: p=1/2, r=1 -> 2/3
    assert weighted_f1(pred, y) == pytest.approx(0.75 * 0.8 + 0.25 * 2 / 3)


def test_evaluate_missing_class():
    with pytest.raises(ValueError):
        evaluate(np.zeros(3), None, np.zeros(3), classes=[0, 1])


def test_probe_split_stratified():
    y = np.repeat([0, 1], [40, 20])
    tr, te = probe_split(60, 0.3, 0, y)
    assert np.bincount(y[te]).tolist() == [12, 6]
    assert not set(tr) & set(te)


def test_linear_probe_eval_runs():
    model = SambaModel(tiny_config())
    ts = standardize(gen_synthetic(SyntheticSpec(n_trials=10, duration_s=0.5)))
    metrics, Z, _ = linear_probe_eval(model, ts)
    assert Z.shape == (20, 16 * 9)
    assert set(metrics) == {"balanced_accuracy", "weighted_f1", "auroc"}


def test_finetune_runs_and_caps_epochs():
    ts = standardize(gen_synthetic(SyntheticSpec(n_trials=8, duration_s=0.5)))
    model = SambaModel(tiny_config())
    with pytest.raises(ValueError):
        finetune(model, ts, epochs=6)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    res = finetune(model, ts, epochs=2, batch_size=8, freeze_body=True, hidden=8)
    assert res.epochs_run == 2
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())
    res = finetune(model, ts, epochs=1, batch_size=8, hidden=8, lr=1e-3)
    assert any(not np.array_equal(before[n], p.data) for n, p in model.named_parameters())
    assert res.predict(ts.data, ts.resolve_montage()).shape == (16,)
