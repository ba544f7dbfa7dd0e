import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samba_kit import tensor as tn
from samba_kit.ssm import Mamba2Block, SSMCoefficients, ssd_matrix, ssd_quadratic, ssd_scan
from samba_kit.tensor import Tensor, grad_check


def random_coeffs(rng, B, T, H, N, d, decay_scale=1.0):
    return SSMCoefficients(
        dt=Tensor(rng.uniform(0.05, 1.0, size=(B, T, H))),
        A=Tensor(-rng.uniform(0.1, 2.0, size=H) * decay_scale),
        B=Tensor(rng.normal(size=(B, T, N))),
        C=Tensor(rng.normal(size=(B, T, N))),
        D=Tensor(rng.normal(size=d)),
    )


def loop_recurrence(x, c):
    """Step-by-step reference: per head, h_t = exp(dt A) h + dt x_t B_t, y = C h + D x."""
    x = np.asarray(x)
    B, T, d = x.shape
    H = c.dt.shape[-1]
    P = d // H
    N = c.B.shape[-1]
    y = np.zeros_like(x)
    for b in range(B):
        for h in range(H):
            state = np.zeros((P, N))
            for t in range(T):
                dt = c.dt.data[b, t, h]
                state = np.exp(dt * c.A.data[h]) * state + dt * np.outer(x[b, t, h * P : (h + 1) * P], c.B.data[b, t])
                y[b, t, h * P : (h + 1) * P] = state @ c.C.data[b, t]
    return y + x * c.D.data


def test_zero_output_matrix_leaves_skip():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 9, 4))
    c = random_coeffs(rng, 2, 9, 2, 3, 4)
    c.C = Tensor(np.zeros_like(c.C.data))
    np.testing.assert_allclose(ssd_scan(x, c).data, x * c.D.data, atol=1e-14)


def test_memoryless_when_decay_vanishes():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 8, 4))
    c = random_coeffs(rng, 1, 8, 2, 3, 4)
    c.A = Tensor(np.full(2, -1e4))
    y = ssd_scan(x, c).data
    want = x[..., :] * c.D.data
    u = x.reshape(1, 8, 2, 2) * c.dt.data[..., None]
    cb = np.einsum("btn,btn->bt", c.C.data, c.B.data)
    want = want + (u * cb[..., None, None]).reshape(1, 8, 4)
    np.testing.assert_allclose(y, want, atol=1e-12)


def test_scan_matches_quadratic_reference_instance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 16, 4))
    c = random_coeffs(rng, 2, 16, 2, 8, 4)
    assert np.abs(ssd_scan(x, c).data - ssd_quadratic(x, c).data).max() < 1e-8


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 4), st.integers(1, 64), st.sampled_from([(1, 1), (2, 1), (4, 2), (8, 4), (8, 2)]),
    st.integers(1, 16), st.integers(0, 2**31 - 1),
)
def test_duality_property(B, T, dh, N, seed):
    d, H = dh
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, T, d))
    c = random_coeffs(rng, B, T, H, N, d)
    assert np.abs(ssd_scan(x, c).data - ssd_quadratic(x, c).data).max() < 1e-8


def test_quadratic_single_step():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 1, 2))
    c = random_coeffs(rng, 1, 1, 1, 4, 2)
    M = ssd_matrix(c)
    assert M.shape == (1, 1, 1, 1)
    assert M[0, 0, 0, 0] == pytest.approx(c.C.data[0, 0] @ c.B.data[0, 0])
    np.testing.assert_allclose(ssd_quadratic(x, c).data, ssd_scan(x, c).data, atol=1e-14)


def test_matrix_upper_triangle_zero():
    rng = np.random.default_rng(4)
    M = ssd_matrix(random_coeffs(rng, 2, 12, 3, 4, 6))
    iu = np.triu_indices(12, 1)
    assert np.all(M[..., iu[0], iu[1]] == 0.0)


@pytest.mark.parametrize("form", [ssd_scan, ssd_quadratic])
def test_matches_loop_recurrence(form):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 10, 6))
    c = random_coeffs(rng, 2, 10, 3, 5, 6)
    assert np.abs(form(x, c).data - loop_recurrence(x, c)).max() < 1e-10


def test_quadratic_grad_path_matches_fast_path():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 12, 4))
    c = random_coeffs(rng, 2, 12, 2, 3, 4)
    fast = ssd_quadratic(x, c).data
    xt = Tensor(x, requires_grad=True)
    np.testing.assert_allclose(ssd_quadratic(xt, c).data, fast, atol=1e-13)


def test_quadratic_cap():
    rng = np.random.default_rng(7)
    c = random_coeffs(rng, 1, 20, 1, 2, 2)
    with pytest.raises(ValueError, match="cap"):
        ssd_quadratic(rng.normal(size=(1, 20, 2)), c, max_len=16)


def test_nonpositive_step_rejected():
    rng = np.random.default_rng(8)
    c = random_coeffs(rng, 1, 5, 1, 2, 2)
    c.dt.data[0, 2, 0] = 0.0
    with pytest.raises(ValueError):
        ssd_scan(rng.normal(size=(1, 5, 2)), c)


@pytest.mark.parametrize("form", [ssd_scan, ssd_quadratic])
def test_ssd_gradients(form):
    rng = np.random.default_rng(9)
    c = random_coeffs(rng, 1, 7, 2, 3, 4)
    w = rng.normal(size=(1, 7, 4))
    x = rng.normal(size=(1, 7, 4))
    assert grad_check(lambda t: tn.tsum(form(t, c) * w), x) < 1e-6

    def through_coeffs(dt):
        cc = SSMCoefficients(dt=tn.exp(dt), A=c.A, B=c.B, C=c.C, D=c.D)
        return tn.tsum(form(x, cc) * w)

    assert grad_check(through_coeffs, np.log(c.dt.data)) < 1e-6
    for field in ("B", "C"):
        def f(v, field=field):
            kw = dict(dt=c.dt, A=c.A, B=c.B, C=c.C, D=c.D)
            kw[field] = v
            return tn.tsum(form(x, SSMCoefficients(**kw)) * w)
        assert grad_check(f, getattr(c, field).data) < 1e-6


# ---------------------------------------------------------------------------
# Mamba2 block

def make_block(d=8, seed=0, **kw):
    return Mamba2Block(d, np.random.default_rng(seed), d_state=4, headdim=4, **kw)


def test_block_identity_with_zero_output_projection():
    blk = make_block()
    blk.out_proj.weight.data[:] = 0.0
    x = np.random.default_rng(1).normal(size=(2, 11, 8))
    np.testing.assert_array_equal(blk(Tensor(x)).data, x)


@pytest.mark.parametrize("T", [1, 2, 13, 37])
def test_block_shape_contract(T):
    blk = make_block()
    assert blk(Tensor(np.random.default_rng(T).normal(size=(2, T, 8)))).shape == (2, T, 8)


def test_block_shape_mismatch():
    with pytest.raises(ValueError):
        make_block()(Tensor(np.ones((1, 4, 6))))


@pytest.mark.parametrize("kernel", ["scan", "quadratic"])
def test_block_gradient(kernel):
    blk = Mamba2Block(4, np.random.default_rng(2), d_state=3, headdim=4)
    blk.kernel = kernel
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(1, 6, 4)), rng.normal(size=(1, 6, 4))
    assert grad_check(lambda t: tn.tsum(blk(t) * w), x) < 1e-3
    # and through a parameter
    base = blk.in_proj.weight.data.copy()

    def g(v):
        blk.in_proj.weight = v
        return tn.tsum(blk(Tensor(x)) * w)

    try:
        assert grad_check(g, base) < 1e-3
    finally:
        blk.in_proj.weight = tn.parameter(base)


def test_block_kernels_agree():
    blk = make_block(seed=4)
    x = Tensor(np.random.default_rng(5).normal(size=(2, 30, 8)))
    a = blk(x, kernel="scan").data
    b = blk(x, kernel="quadratic").data
    assert np.abs(a - b).max() < 1e-10


@pytest.mark.parametrize("kernel", ["scan", "quadratic"])
def test_block_causality(kernel):
    blk = make_block(seed=6)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 20, 8))
    tau = 9
    x2 = x.copy()
    x2[:, tau + 1 :] = 0.0
    a = blk(Tensor(x), kernel=kernel).data
    b = blk(Tensor(x2), kernel=kernel).data
    np.testing.assert_array_equal(a[:, : tau + 1], b[:, : tau + 1])


def test_initial_step_sizes_in_range():
    blk = Mamba2Block(16, np.random.default_rng(0), headdim=4)
    from samba_kit.tensor import softplus
    dt0 = softplus(blk.dt_bias).data
    assert dt0.min() == pytest.approx(0.01) and dt0.max() == pytest.approx(0.1)


def test_non_residual_mode():
    blk = make_block(residual=False)
    blk.out_proj.weight.data[:] = 0.0
    out = blk(Tensor(np.ones((1, 3, 8)))).data
    np.testing.assert_array_equal(out, 0.0)
