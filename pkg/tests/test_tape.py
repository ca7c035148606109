"""Reverse-mode tape: gradients, surrogate quantizer rules, finite differences."""

import numpy as np
import pytest

from geoquant import codebook as cb
from geoquant import quantizers as qz
from geoquant import tape
from geoquant.errors import NonScalarLossError
from geoquant.tape import Var


def test_product_rule():
    x, y = Var(2.0), Var(3.0)
    tape.backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_norm_squared_gradient():
    v = Var(np.array([1.0, 2.0, 3.0]))
    tape.backward(tape.sum_(v * v))
    np.testing.assert_array_equal(v.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    v = Var(np.array([1.0, 2.0]))
    with pytest.raises(NonScalarLossError):
        tape.backward(v + v)


def test_matmul_and_broadcast_bias():
    w = Var(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Var(np.array([0.5, -0.5]))
    x = Var(np.array([[1.0, 1.0], [2.0, 0.0]]))
    out = x @ w + b
    tape.backward(tape.sum_(out))
    np.testing.assert_array_equal(b.grad, [2.0, 2.0])
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)) @ w.value.T)


def test_gather_accumulates_duplicates():
    x = Var(np.array([[1.0], [2.0]]))
    idx = np.array([0, 0, 1])
    tape.backward(tape.sum_(tape.gather(x, idx)))
    np.testing.assert_array_equal(x.grad, [[2.0], [1.0]])


def test_segment_sum_gradient():
    x = Var(np.arange(6.0).reshape(3, 2))
    out = tape.segment_sum(x * x, np.array([0, 1, 0]), 2)
    tape.backward(tape.sum_(out))
    np.testing.assert_array_equal(x.grad, 2 * x.value)


def test_no_grad_suppresses_graph():
    with tape.no_grad():
        x = Var(1.0)
        y = x * x
    assert y._parents == ()


def test_ste_pass_through_in_range():
    s = qz.linear_scheme(8, 0.1)
    x = Var(0.26)
    tape.backward(tape.quantize_linear_ste(x, s))
    assert x.grad == 1.0


def test_ste_clips_in_saturation():
    s = qz.linear_scheme(8, 0.1)
    x = Var(100.0)
    tape.backward(tape.quantize_linear_ste(x, s))
    assert x.grad == 0.0


def test_ste_chain_rule_through_square():
    s = qz.linear_scheme(8, 0.1)
    x = Var(0.26)
    q = tape.quantize_linear_ste(x, s)
    tape.backward(q * q)
    assert abs(x.grad - 0.6) < 1e-12


def test_magnitude_ste_zero_magnitude_blocked():
    s = qz.magnitude_scheme(8, 1e-3, 1e2)
    m = Var(np.array([0.0, 2.0]))
    tape.backward(tape.sum_(tape.quantize_magnitude_ste(m, s)))
    np.testing.assert_array_equal(m.grad, [0.0, 1.0])


def test_geometric_ste_removes_radial_component():
    book = cb.build("fibonacci(64)")
    s = qz.direction_scheme(8, book)
    u = Var(np.array([[0.0, 0.0, 1.0]]))
    out = tape.quantize_direction_ste(u, s)
    tape.backward(tape.sum_(out * Var(np.array([[1.0, 0.0, 2.0]]))))
    np.testing.assert_allclose(u.grad, [[1.0, 0.0, 0.0]], atol=1e-15)


def test_geometric_ste_annihilates_pure_radial_gradient():
    book = cb.build("fibonacci(64)")
    s = qz.direction_scheme(8, book)
    u_val = np.array([[0.6, 0.0, 0.8]])
    u = Var(u_val)
    out = tape.quantize_direction_ste(u, s)
    tape.backward(tape.sum_(out * Var(3.0 * u_val)))
    np.testing.assert_allclose(u.grad, np.zeros((1, 3)), atol=1e-15)


def test_geometric_ste_projection_formula():
    book = cb.build("fibonacci(64)")
    s = qz.direction_scheme(8, book)
    rng = np.random.default_rng(0)
    u_val = rng.standard_normal((10, 3))
    u_val /= np.linalg.norm(u_val, axis=1, keepdims=True)
    g = rng.standard_normal((10, 3))
    u = Var(u_val)
    tape.backward(tape.sum_(tape.quantize_direction_ste(u, s) * Var(g)))
    expected = g - np.sum(g * u_val, axis=1, keepdims=True) * u_val
    np.testing.assert_allclose(u.grad, expected, atol=1e-14)
    assert np.max(np.abs(np.sum(u.grad * u_val, axis=1))) < 1e-12


def test_hard_assignment_cuts_gradient_everywhere():
    """Hard vector quantization (no surrogate) starves every upstream
    parameter of the direction path, while the projection rule feeds it."""
    book = cb.build("fibonacci(64)")
    s = qz.direction_scheme(8, book)
    rng = np.random.default_rng(1)
    w_val = rng.standard_normal((3, 3))
    x = Var(rng.standard_normal((5, 3)))
    target = Var(rng.standard_normal((5, 3)))

    for hard, expect_zero in ((True, True), (False, False)):
        w = Var(w_val.copy())
        u = tape.vdir(x @ w)
        out = tape.quantize_direction_ste(u, s, hard=hard)
        tape.backward(tape.sum_(out * target))
        if expect_zero:
            np.testing.assert_array_equal(w.grad, np.zeros((3, 3)))
        else:
            assert np.max(np.abs(w.grad)) > 0


def test_orthogonality_stats_recorded():
    book = cb.build("fibonacci(64)")
    s = qz.direction_scheme(8, book)
    tape.debug_checks = True
    tape.reset_gste_stats()
    try:
        u = Var(np.array([[0.0, 1.0, 0.0]]))
        tape.backward(tape.sum_(tape.quantize_direction_ste(u, s) * Var(np.ones((1, 3)))))
    finally:
        tape.debug_checks = False
    assert tape.gste_stats["count"] == 1
    assert tape.gste_stats["max_abs_dot"] < 1e-12


def test_manifold_preserved_to_first_order():
    rng = np.random.default_rng(2)
    u = rng.standard_normal(3)
    u /= np.linalg.norm(u)
    g = rng.standard_normal(3)
    g -= (g @ u) * u  # tangent
    eta = 1e-3
    stepped = u - eta * g
    renorm = stepped / np.linalg.norm(stepped)
    assert np.linalg.norm(renorm - stepped) <= eta**2 * (g @ g)


def test_deterministic_backward():
    rng = np.random.default_rng(3)
    x_val = rng.standard_normal((4, 4))
    grads = []
    for _ in range(2):
        x = Var(x_val.copy())
        y = tape.silu(x @ Var(np.eye(4)))
        tape.backward(tape.sum_(y * y))
        grads.append(x.grad.tobytes())
    assert grads[0] == grads[1]


def test_vnorm_and_vdir_zero_safe():
    v = Var(np.zeros((2, 3)))
    n = tape.vnorm(v)
    d = tape.vdir(v)
    np.testing.assert_array_equal(n.value, [0.0, 0.0])
    np.testing.assert_array_equal(d.value, [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    tape.backward(tape.sum_(n) + tape.sum_(d))
    np.testing.assert_array_equal(v.grad, np.zeros((2, 3)))


def test_fnorm_exact_zero():
    x = Var(np.zeros((3, 3)))
    out = tape.fnorm(x)
    assert out.value == 0.0
    tape.backward(out)
    np.testing.assert_array_equal(x.grad, np.zeros((3, 3)))


# --- finite differences -------------------------------------------------------


def test_fd_smooth_function():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(5)
    dirs = [np.eye(5)[i] for i in range(5)]
    result = tape.finite_difference_check(lambda v: tape.sum_(v * v), x, dirs, h=1e-5)
    assert result.max_rel_err <= 1e-6


def test_fd_inside_quantizer_cell_is_flat():
    s = qz.linear_scheme(8, 0.1)
    x = np.array([0.26])

    def f(v):
        q = tape.quantize_linear_ste(v, s)
        return tape.sum_(q)

    result = tape.finite_difference_check(f, x, [np.array([1.0])], h=1e-5)
    # piecewise-constant forward: the numeric derivative vanishes in a cell
    # while the surrogate gradient reports 1; the checker surfaces both.
    assert result.fd[0] == 0.0
    assert result.proj[0] == 1.0


def test_fd_detects_and_skips_cell_crossings():
    s = qz.linear_scheme(8, 0.1)
    x = np.array([0.2499999])

    def f(v):
        return tape.sum_(tape.quantize_linear_ste(v, s))

    def cell(v):
        return tuple(qz.linear_codes(v, s))

    result = tape.finite_difference_check(f, x, [np.array([1.0])], h=1e-5, cell_fn=cell)
    assert result.skipped[0]
    assert result.max_rel_err == 0.0


def test_fd_through_cosine_attention_path():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((4, 4))

    def f(v):
        q = tape.reshape(v, (2, 4)) @ Var(w)
        qn = q / tape.expand_dims(tape.vnorm(q) + tape.as_var(1e-8), -1)
        logits = tape.as_var(10.0) * tape.sum_(qn, axis=1)
        z = tape.exp(logits - tape.as_var(float(np.max(logits.value))))
        alpha = z / tape.sum_(z)
        return tape.sum_(alpha * alpha)

    x = rng.standard_normal(8)
    dirs = [d / np.linalg.norm(d) for d in rng.standard_normal((6, 8))]
    result = tape.finite_difference_check(f, x, dirs, h=1e-5)
    assert result.max_rel_err <= 1e-5
