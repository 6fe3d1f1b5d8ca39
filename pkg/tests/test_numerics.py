import numpy as np
import pytest

from remixdiff import numerics as nx
from remixdiff.numerics import Adam, NonFiniteError, Tensor, clip_global_norm


def t64(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


# -- forward op examples --------------------------------------------------------


def test_softmax_symmetry():
    out = nx.softmax(Tensor(np.zeros(4, dtype=np.float32)))
    assert np.allclose(out.data, [0.25, 0.25, 0.25, 0.25])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 5))
    out = nx.matmul(t64(np.eye(3)), t64(a))
    assert np.array_equal(out.data, a)


def test_layernorm_against_scratch_oracle():
    # Oracle: compute (x - mean) / sqrt(var + eps) with plain numpy.
    x = np.array([1.0, 2.0, 3.0])
    eps = 1e-5
    mean = x.mean()
    var = ((x - mean) ** 2).mean()
    expected = (x - mean) / np.sqrt(var + eps)

    out = nx.layernorm(t64(x[None]), t64(np.ones(3)), t64(np.zeros(3)), eps=eps)
    assert np.allclose(out.data[0], expected, rtol=1e-12)


def test_layernorm_affine_applies_scale_and_shift():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 6))
    g = rng.standard_normal(6)
    b = rng.standard_normal(6)
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    expected = (x - mean) / np.sqrt(var + 1e-5) * g + b
    out = nx.layernorm(t64(x), t64(g), t64(b))
    assert np.allclose(out.data, expected, rtol=1e-10)


def test_sinusoidal_embed_shapes_and_range():
    e = nx.sinusoidal_embed(7, 64)
    assert e.shape == (64,)
    batch = nx.sinusoidal_embed(np.arange(5), 64)
    assert batch.shape == (5, 64)
    assert np.all(np.abs(batch.data) <= 1.0 + 1e-6)
    # t=0: sin part 0, cos part 1
    z = nx.sinusoidal_embed(0, 8).data
    assert np.allclose(z[:4], 0.0) and np.allclose(z[4:], 1.0)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        nx.matmul(t64(np.ones((2, 3))), t64(np.ones((4, 2))))
    with pytest.raises(ValueError):
        nx.mix(t64(np.ones(3)), t64(np.ones((4, 2, 2))))


def test_non_finite_output_is_an_error():
    big = Tensor(np.array([1e30], dtype=np.float32), requires_grad=True)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        nx.mul(big, big)  # overflows float32 to inf


# -- backward examples ------------------------------------------------------------


def test_backward_sum_gives_ones():
    p = t64(np.arange(12, dtype=np.float64).reshape(3, 4), grad=True)
    nx.reduce_sum(p).backward()
    assert np.array_equal(p.grad, np.ones((3, 4)))


def test_backward_sum_of_squares_hand_case():
    # d/dp sum(p*p) = 2p, so p=[1,2] gives [2,4].
    p = t64([1.0, 2.0], grad=True)
    nx.reduce_sum(p * p).backward()
    assert np.allclose(p.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    p = t64(np.ones((2, 2)), grad=True)
    with pytest.raises(ValueError):
        (p * p).backward()


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(42)
    x = rng.standard_normal((6, 3))
    target = rng.standard_normal((6, 2))
    params = {
        "w1": t64(rng.standard_normal((3, 8)) * 0.5, grad=True),
        "b1": t64(rng.standard_normal(8) * 0.1, grad=True),
        "w2": t64(rng.standard_normal((8, 2)) * 0.5, grad=True),
        "b2": t64(rng.standard_normal(2) * 0.1, grad=True),
    }

    def loss_fn(ps):
        h = nx.silu(nx.linear(Tensor(x), ps["w1"], ps["b1"]))
        out = nx.linear(h, ps["w2"], ps["b2"])
        return nx.mse(out, Tensor(target))

    for name, err, ok in nx.check_gradients(loss_fn, params, h=1e-4, tol=1e-3):
        assert ok, f"{name}: rel err {err}"


def test_every_op_gradient_matches_finite_differences():
    # Random small inputs for each differentiable op, checked in float64.
    from remixdiff.cli import _gradcheck_ops

    rng = np.random.default_rng(5)
    for name, err, ok in _gradcheck_ops(rng):
        assert ok, f"{name}: rel err {err}"


def test_backward_bit_identical_across_runs():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, 4)).astype(np.float32)
    w = rng.standard_normal((4, 4)).astype(np.float32)

    def run():
        wt = Tensor(w.copy(), requires_grad=True)
        h = nx.silu(nx.matmul(Tensor(x), wt))
        loss = nx.reduce_sum(nx.softmax(h) * h)
        loss.backward()
        return loss.data.copy(), wt.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_softmax_rows_are_distributions():
    rng = np.random.default_rng(3)
    for _ in range(20):
        logits = rng.standard_normal((4, 6)).astype(np.float32) * rng.uniform(0.1, 50)
        s = nx.softmax(Tensor(logits)).data
        assert (s >= 0).all()
        assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-6)


def test_no_grad_blocks_graph_construction():
    p = t64(np.ones(3), grad=True)
    with nx.no_grad():
        out = p * p
    assert not out.requires_grad and out._parents == ()


# -- optimizer ---------------------------------------------------------------------


def test_adam_first_step_matches_hand_calculation():
    # Bias-corrected first step: -lr * g / (|g| + eps) for a scalar parameter.
    lr, eps = 1e-2, 1e-8
    g = np.array([0.37], dtype=np.float64)
    p = t64([1.0], grad=True)
    opt = Adam({"p": p}, lr=lr, eps=eps)
    p.grad = g.copy()
    opt.step()
    expected = 1.0 - lr * g[0] / (abs(g[0]) + eps)
    assert np.allclose(p.data, expected, rtol=1e-12)


def test_adam_converges_on_convex_quadratic():
    # loss = (p - 3)^2; every step should move toward 3.
    p = t64([0.0], grad=True)
    opt = Adam({"p": p}, lr=0.1)
    losses = []
    for _ in range(2):
        opt.zero_grad()
        loss = nx.reduce_sum((p - 3.0) * (p - 3.0))
        loss.backward()
        losses.append(loss.item())
        opt.step()
    final = float((p.data[0] - 3.0) ** 2)
    assert losses[1] < losses[0]
    assert final < losses[1]


def test_lazy_rows_skip_zero_gradient_rows():
    table = t64(np.ones((4, 3)), grad=True)
    before = table.data.copy()
    opt = Adam({"logits": table}, lr=0.1, lazy_rows={"logits"})
    g = np.zeros((4, 3))
    g[1] = [1.0, -1.0, 0.5]
    table.grad = g
    opt.step()
    # Row 1 moved, all other rows (zero grad) unchanged bit for bit.
    assert not np.array_equal(table.data[1], before[1])
    for r in (0, 2, 3):
        assert np.array_equal(table.data[r], before[r])
    assert opt.row_steps["logits"].tolist() == [0, 1, 0, 0]


def test_lazy_rows_bias_correction_uses_row_counters():
    # A row touched for the first time at global step 5 must behave like a
    # first Adam step for that row.
    lr, eps = 1e-2, 1e-8
    table = t64(np.zeros((2, 1)), grad=True)
    opt = Adam({"logits": table}, lr=lr, eps=eps, lazy_rows={"logits"})
    for _ in range(4):
        table.grad = np.array([[0.5], [0.0]])
        opt.step()
    table.grad = np.array([[0.0], [2.0]])
    opt.step()
    expected = -lr * 2.0 / (2.0 + eps)
    assert np.allclose(table.data[1, 0], expected, rtol=1e-12)


def test_clip_global_norm():
    a = t64(np.ones(4), grad=True)
    b = t64(np.ones(3), grad=True)
    a.grad = np.full(4, 3.0)
    b.grad = np.full(3, 4.0)
    norm = clip_global_norm({"a": a, "b": b}, max_norm=1.0)
    expected = np.sqrt(4 * 9.0 + 3 * 16.0)
    assert np.isclose(norm, expected)
    clipped = np.sqrt(np.sum(a.grad**2) + np.sum(b.grad**2))
    assert np.isclose(clipped, 1.0, rtol=1e-12)


def test_adam_rejects_non_finite_gradient():
    p = t64([1.0], grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(NonFiniteError):
        opt.step()


# -- checkpoint file --------------------------------------------------------------


def test_checkpoint_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(17)
    arrays = {
        "layer/w": rng.standard_normal((3, 4)).astype(np.float32),
        "layer/b": rng.standard_normal(4).astype(np.float64),
        "steps": np.arange(5, dtype=np.int64),
    }
    meta = {"kind": "test", "note": "roundtrip"}
    path = str(tmp_path / "ckpt.npz")
    nx.save_arrays(path, arrays, meta)
    loaded, got_meta = nx.load_arrays(path)
    assert got_meta["kind"] == "test"
    assert got_meta["format_version"] == nx.FORMAT_VERSION
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        assert loaded[name].tobytes() == arrays[name].tobytes()


def test_checkpoint_version_mismatch_rejected(tmp_path):
    path = str(tmp_path / "ckpt.npz")
    nx.save_arrays(path, {"a": np.ones(2)}, {"format_version": 999})
    with pytest.raises(ValueError, match="version"):
        nx.load_arrays(path)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        nx.load_arrays(str(tmp_path / "nope.npz"))
