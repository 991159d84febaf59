import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cirm import autodiff as ad
from cirm.autodiff import Graph, NonFiniteError, ShapeError, Tensor, grad
from cirm.nets import forward, init_mlp
from cirm.oracles import finite_diff_grad
from cirm.params import ParamSet, grad_penalty_grad, sgd_step
from cirm.validation import primitive_cases, rel_error


def test_elu_values():
    out = ad.elu(Tensor([0.0, 1.0, -1.0])).data
    assert out[0] == 0.0
    assert out[1] == 1.0
    assert out[2] == pytest.approx(np.exp(-1) - 1, abs=1e-12)
    assert out[2] == pytest.approx(-0.632121, abs=1e-6)


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    (g,) = grad(x * x, [x])
    assert g.item() == 6.0


def test_constant_has_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.arange(3.0), requires_grad=True)
    gx, gy = grad(ad.tsum(y) * 0.0 + 5.0 + ad.tsum(x * 0.0), [x, y])
    assert np.all(gx.data == 0.0)
    assert np.all(gy.data == 0.0)


def test_unused_input_gets_exact_zero():
    x = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    _, gu = grad(ad.sq_norm(x), [x, unused])
    assert gu.shape == (2, 2) and np.all(gu.data == 0.0)


def test_non_scalar_root_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        grad(x * 2.0, [x])


def test_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError) as info:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert info.value.op == "matmul"
    assert "(2, 3)" in str(info.value)


def test_nonfinite_root_is_an_error():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with np.errstate(divide="ignore"):
        with pytest.raises(NonFiniteError):
            grad(ad.tsum(ad.log(x)), [x])


def test_two_layer_elu_net_matches_finite_differences():
    rng = np.random.default_rng(0)
    ps = init_mlp(3, (4, 4), 1, rng)
    x = rng.normal(size=(6, 3))
    leaves = ps.leaves()
    gs = grad(ad.tsum(forward(leaves, x)), [leaves[k] for k in ps.names()])
    for k, g in zip(ps.names(), gs):
        def f(v, k=k):
            q = ps.copy()
            q[k] = v
            return ad.tsum(forward(q.leaves(), x)).item()
        assert rel_error(g.data, finite_diff_grad(f, ps[k], 1e-4)) < 1e-5


def test_every_primitive_matches_finite_differences():
    cases = primitive_cases(115, seed=11)
    assert len(cases) >= 100
    worst = max(e for _, e in cases)
    assert worst < 1e-4, [c for c in cases if c[1] >= 1e-4]


def test_graph_visits_each_node_once_in_topological_order():
    x = Tensor(np.ones(2), requires_grad=True)
    h = x * 2.0
    y = ad.tsum(h * h + h)
    g = Graph.trace(y)
    ids = [id(n) for n in g.order]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(g.order)}
    for node in g.order:
        for p in node._parents:
            if id(p) in pos:
                assert pos[id(p)] < pos[id(node)]


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    ps = init_mlp(4, (5,), 1, rng)
    x = rng.normal(size=(8, 4))

    def run():
        leaves = ps.leaves()
        return [g.data for g in grad(ad.tsum(forward(leaves, x)), list(leaves.values()))]

    for a, b in zip(run(), run()):
        assert np.array_equal(a, b)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_dropout_is_identity_at_eval_and_inverted_at_train():
    a = Tensor(np.ones((1000, 10)))
    assert ad.dropout(a, 0.75, None, train=False) is a
    out = ad.dropout(a, 0.75, np.random.default_rng(0), train=True).data
    assert set(np.unique(out)) <= {0.0, 4.0}
    assert abs(out.mean() - 1.0) < 0.05


# -- second order -----------------------------------------------------------------

def test_penalty_gradient_of_square():
    ps = ParamSet({"w": np.array([1.0])}, omega=("w",))
    res = grad_penalty_grad(lambda lv: ad.tsum(lv["w"] * lv["w"]), ps)
    assert res.mode == "nested"
    assert res.value == pytest.approx(4.0)
    assert res.grads["w"][0] == pytest.approx(8.0)


def test_penalty_of_constant_is_zero():
    ps = ParamSet({"w": np.array([0.3]), "t": np.array([2.0])}, omega=("w",))
    for mode in ("nested", "fd"):
        res = grad_penalty_grad(lambda lv: ad.tsum(lv["t"] * 0.0) + 1.0, ps, mode=mode)
        assert res.value == 0.0
        assert all(np.all(g == 0) for g in res.grads.values())


def test_penalty_gradient_linear_cross_entropy_vs_double_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 3))
    y = rng.integers(0, 2, size=(10, 1)).astype(float)
    ps = ParamSet({"phi": rng.normal(size=(3, 2)), "w": rng.normal(size=(2, 1))}, omega=("w",))
    builder = lambda lv: ad.bce_with_logits(ad.matmul(ad.matmul(Tensor(x), lv["phi"]), lv["w"]), y)
    res = grad_penalty_grad(builder, ps)

    def pen_fd(q):
        # inner gradient by finite differences too
        def loss_w(wv):
            r = q.copy()
            r["w"] = wv
            return builder(r.leaves()).item()
        return float(np.sum(finite_diff_grad(loss_w, q["w"], 1e-5) ** 2))

    for k in ("phi", "w"):
        def f(v, k=k):
            q = ps.copy()
            q[k] = v
            return pen_fd(q)
        assert rel_error(res.grads[k], finite_diff_grad(f, ps[k], 1e-4)) < 1e-3


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(-2, 2)), arrays(np.float64, (3,), elements=st.floats(-2, 2)),
       st.floats(0.1, 3.0))
def test_nested_and_fd_modes_agree_on_quadratics(w, t, c):
    # L = c * sum((w * t + w^2)^2) / 2 couples omega=w with theta=t
    ps = ParamSet({"w": w, "t": t}, omega=("w",))
    builder = lambda lv: ad.tsum((lv["w"] * lv["t"] + lv["w"] * lv["w"]) ** 2.0) * (0.5 * c)
    a = grad_penalty_grad(builder, ps, mode="nested")
    b = grad_penalty_grad(builder, ps, mode="fd")
    assert b.mode == "fd"
    for k in ("w", "t"):
        scale = max(np.linalg.norm(a.grads[k]), 1e-3)
        assert np.linalg.norm(a.grads[k] - b.grads[k]) / scale < 1e-2


# -- sgd ---------------------------------------------------------------------------

def test_sgd_examples():
    ps = ParamSet({"p": np.array([1.0])})
    sgd_step(ps, {"p": np.array([1.0])}, 0.5, 0.0)
    assert ps["p"][0] == 0.5
    ps = ParamSet({"p": np.array([0.7])})
    sgd_step(ps, {"p": np.array([0.0])}, 0.3, 0.0)
    assert ps["p"][0] == 0.7
    ps = ParamSet({"p": np.array([2.0])})
    sgd_step(ps, {"p": np.array([0.0])}, 0.1, 0.00125)
    assert ps["p"][0] == pytest.approx(1.99975, abs=1e-15)


@given(arrays(np.float64, (4,), elements=st.floats(-10, 10)), arrays(np.float64, (4,), elements=st.floats(-10, 10)),
       st.floats(1e-4, 1.0), st.floats(0.0, 0.1))
def test_sgd_formula(p, g, lr, wd):
    ps = ParamSet({"p": p.copy()})
    sgd_step(ps, {"p": g}, lr, wd)
    np.testing.assert_allclose(ps["p"], p - lr * (g + wd * p), rtol=0, atol=1e-12)


def test_paramset_partition_is_disjoint_and_covering():
    ps = init_mlp(3, (4,), 1, np.random.default_rng(0))
    assert set(ps.theta) | set(ps.omega) == set(ps.names())
    assert not set(ps.theta) & set(ps.omega)
    with pytest.raises(KeyError):
        ParamSet({"a": np.ones(1)}, omega=("b",))
