import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirm import autodiff as ad
from cirm.autodiff import Tensor
from cirm.envs import EnvironmentData, synth_sem
from cirm.methods import (TRAINERS, DEFAULTS, MethodConfig, bvirm_objectives, default_config, eiil_infer,
                          erm_train, irmg_round, irmv1_loss, linear_stationarity_check, make_trainer, sem_errors)
from cirm.methods.common import as_targets, risk
from cirm.nets import forward, init_mlp
from cirm.oracles import finite_diff_grad, ols_solve
from cirm.variational import VariationalModel, inv_softplus, softplus_np, standard_prior

SMALL = dict(hidden=(8,), epochs=3, batch_size=32, dropout=0.0, weight_decay=0.0)


def toy_env(n=96, seed=0, flip=0.1, d=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    y = np.where(rng.random(n) < flip, 1 - y, y)
    return EnvironmentData(x, y)


def cfg(method, **kw):
    return MethodConfig(method=method, **{**SMALL, **kw})


def losses(trainer, key="loss"):
    return np.array([r[key] for r in trainer.log])


# -- irmv1_loss ------------------------------------------------------------------------

def two_env_batches(seed=0):
    rng = np.random.default_rng(seed)
    return [(rng.normal(size=(20, 3)), rng.integers(0, 2, 20).astype(float)) for _ in range(2)]


def test_irmv1_loss_without_penalty_is_the_risk_sum():
    ps = init_mlp(3, (5,), 1, np.random.default_rng(0))
    batches = two_env_batches()
    total = irmv1_loss(ps, batches, 0.0).item()
    leaves = ps.leaves()
    ref = sum(risk(forward(leaves, x), as_targets(y, "classification"), "classification").item() for x, y in batches)
    assert total == ref


def test_irmv1_penalty_vanishes_at_stationary_logits():
    ps = init_mlp(3, (5,), 1, np.random.default_rng(0))
    ps["head.W"][:] = 0.0
    ps["head.b"][:] = 0.0  # zero logits: d/dw R(w * 0) = 0
    batches = two_env_batches()
    assert irmv1_loss(ps, batches, 1e6).item() == pytest.approx(irmv1_loss(ps, batches, 0.0).item(), abs=1e-12)


def test_irmv1_penalty_matches_scalar_finite_difference():
    ps = init_mlp(3, (5,), 1, np.random.default_rng(1))
    batches = two_env_batches(1)
    pen = irmv1_loss(ps, batches, 1.0).item() - irmv1_loss(ps, batches, 0.0).item()
    leaves = ps.leaves()
    ref = 0.0
    for x, y in batches:
        f = forward(leaves, x).data
        t = as_targets(y, "classification")
        r = lambda w: risk(Tensor(f * w[0]), t, "classification").item()
        ref += finite_diff_grad(r, [1.0], 1e-5)[0] ** 2
    assert pen == pytest.approx(ref, rel=1e-6)


def test_irmv1_loss_needs_an_environment():
    with pytest.raises(ValueError):
        irmv1_loss(init_mlp(3, (5,), 1, np.random.default_rng(0)), [], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_irmv1_penalty_nonnegative(seed):
    ps = init_mlp(3, (4,), 1, np.random.default_rng(seed))
    batches = two_env_batches(seed)
    assert irmv1_loss(ps, batches, 1.0).item() - irmv1_loss(ps, batches, 0.0).item() >= -1e-12


# -- reductions ------------------------------------------------------------------------

def run_stream(method, envs, **kw):
    c = cfg(method, **kw)
    t = make_trainer(c, envs[0].features.shape[1])
    for e in envs:
        t.observe(e)
    return t


def test_irmv1_without_penalty_follows_erm():
    envs = [toy_env(seed=1), toy_env(seed=2)]
    a = run_stream("erm", envs, lr=1e-2)
    b = run_stream("irmv1", envs, lr=1e-2, lam=0.0)
    assert len(a.log) == len(b.log)
    assert np.max(np.abs(losses(a) - losses(b))) < 1e-6
    assert np.array_equal(a.params["head.W"], b.params["head.W"])


def test_cvirmv1_without_penalty_follows_vcl():
    envs = [toy_env(seed=3), toy_env(seed=4)]
    kw = dict(lr=5e-3, n_mc=2, beta=1.0)
    a = run_stream("vcl", envs, lam=0.0, **kw)
    b = run_stream("c-virmv1", envs, lam=0.0, **kw)
    assert np.max(np.abs(losses(a) - losses(b))) < 1e-6


def test_bvirm_degenerates_to_consensus_erm():
    envs = [toy_env(seed=5), toy_env(seed=6)]
    kw = dict(lr=1e-2, rho1=0.0, delta_rho=0.0, epochs=4)
    det = make_trainer(cfg("birm", **kw), 4)
    det.fit(envs)
    var = make_trainer(cfg("bvirm", beta=0.0, sigma0=1e-9, n_mc=1, **kw), 4)
    var.fit(envs)
    assert np.max(np.abs(losses(det, "risk") - losses(var, "risk"))) < 1e-2
    # the consensus classifier ends up in the same place too
    mu = var.vm.mean_params()
    assert np.max(np.abs(mu["head.W"] - det.params["head.W"])) < 1e-2


# -- bvirm objectives --------------------------------------------------------------------

def scalar_model(mu, sigma):
    det_ = {"phi": np.array([mu]), "head.W": np.array([[mu]])}
    from cirm.params import ParamSet
    vm = VariationalModel.from_deterministic(ParamSet(det_, omega=("head.W",)), sigma)
    return vm


def bv_forward(x):
    return lambda p: ad.matmul(ad.reshape(p["phi"], (1, 1)) * Tensor(x), p["head.W"])


def test_bvirm_objectives_kl_gap_is_half():
    vm = scalar_model(1.0, 1.0)
    x, y = np.ones((4, 1)), np.ones((4, 1))
    prior = standard_prior(vm, 1.0)
    rng = np.random.default_rng(0)
    q_phi, q_w = bvirm_objectives(vm, vm.params.leaves(), bv_forward(x), y, prior, 1.0, 3, rng, "regression")
    assert q_phi.item() - q_w.item() == pytest.approx(0.5, abs=1e-12)


def test_bvirm_objectives_equal_risk_without_kl():
    vm = scalar_model(0.3, 0.5)
    x, y = np.ones((4, 1)), np.zeros((4, 1))
    eps = [{"phi": np.array([0.2]), "head.W": np.array([[-0.4]])}]
    for beta, prior in ((0.0, standard_prior(vm, 1.0)), (2.0, vm.prior())):
        q_phi, q_w = bvirm_objectives(vm, vm.params.leaves(), bv_forward(x), y, prior, beta, 1, None,
                                      "regression", eps=eps)
        pred = (0.3 + 0.5 * 0.2) * (0.3 - 0.5 * 0.4)
        assert q_phi.item() == pytest.approx(q_w.item(), abs=1e-12)
        assert q_w.item() == pytest.approx(pred**2, abs=1e-12)


def test_bvirm_objectives_validate():
    vm = scalar_model(0.0, 1.0)
    with pytest.raises(ValueError):
        bvirm_objectives(vm, vm.params.leaves(), bv_forward(np.ones((1, 1))), np.ones((1, 1)),
                         vm.prior(), -1.0, 1, np.random.default_rng(0))


# -- ERM / IRMG ---------------------------------------------------------------------------

def test_erm_separates_a_separable_toy():
    env = toy_env(400, seed=7, flip=0.0, d=2)
    pred = erm_train([env], cfg("erm", lr=1e-2, epochs=60, hidden=(16,)))
    assert pred.accuracy(env.features, env.labels) >= 0.99


def test_erm_constant_label():
    rng = np.random.default_rng(0)
    env = EnvironmentData(rng.normal(size=(64, 3)), np.ones(64))
    pred = erm_train([env], cfg("erm", lr=1e-2, epochs=20))
    assert np.all(pred.logits(rng.normal(size=(50, 3))) > 0)


def test_irmg_single_member_is_the_plain_network():
    t = make_trainer(cfg("irmg"), 4)
    env = toy_env(seed=8)
    x, y = env.features, as_targets(env.labels, "classification")
    irmg_round(t, 0, (x, y))
    leaves = {**t.phi.leaves(()), **t.heads[0].leaves(())}
    ens = t.ensemble_logits(t.phi.leaves(()), [t.heads[0].leaves(())], x, None, train=False).data
    assert np.allclose(ens, forward(leaves, x).data, atol=1e-15)
    r0 = risk(Tensor(ens), y, "classification").item()
    for _ in range(200):
        r = irmg_round(t, 0, (x, y))
    assert r < r0


def test_irmg_twin_environments_reach_equal_risks():
    t = make_trainer(cfg("irmg", lr=1e-2), 4)
    env = toy_env(seed=9)
    batch = (env.features, as_targets(env.labels, "classification"))
    for _ in range(300):
        r0 = irmg_round(t, 0, batch)
        r1 = irmg_round(t, 1, batch)
    assert abs(r0 - r1) < 1e-3


# -- linear tools --------------------------------------------------------------------------

def test_stationarity_residual_vanishes_at_projected_ols():
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(50, 4)), rng.normal(size=(50, 1))
    phi = rng.normal(size=(4, 2))
    w = ols_solve(X @ phi, Y)
    assert linear_stationarity_check(phi, w, X, Y) < 1e-8


def test_stationarity_residual_hand_fixture():
    X, Y, phi = np.array([[1.0, 0.0], [0.0, 2.0]]), np.array([1.0, 4.0]), np.eye(2)
    # E[xx^T] = diag(.5, 2), E[xy] = (.5, 4)
    assert linear_stationarity_check(phi, np.zeros(2), X, Y) == pytest.approx(np.sqrt(16.25), abs=1e-12)
    assert linear_stationarity_check(phi, np.ones(2), X, Y) == pytest.approx(2.0, abs=1e-12)


def test_sem_errors():
    W = np.vstack([np.eye(2), np.zeros((2, 2))])
    assert sem_errors(W, 2) == (0.0, 0.0)
    W[2:] = 1.0
    assert sem_errors(W, 2) == (0.0, 2.0)


SEM_BIRM = dict(optimizer="sgd", lr=1e-3, block_steps=20, block_lr=0.003, epochs=250, batch_size=1000, hidden=())


def test_birm_on_sem_enforces_the_constraint():
    envs = [synth_sem(1000, s, seed=10 + i) for i, s in enumerate((0.1, 1.5))]
    t = make_trainer(default_config("birm", **SEM_BIRM), 8, 4, "regression", model="linear")
    t.fit(envs)
    cons = losses(t, "constraint")
    assert cons[-1] < cons[0] / 10
    X = np.vstack([e.features for e in envs])
    Y = np.vstack([e.labels for e in envs])
    W_ols = ols_solve(X, Y)
    assert np.linalg.norm(t.linear_coefficients()[4:]) < np.linalg.norm(W_ols[4:])


# -- EIIL ------------------------------------------------------------------------------------

def test_eiil_recovers_a_latent_split():
    rng = np.random.default_rng(0)
    z = rng.integers(0, 2, 300)
    logits = np.full(300, 2.0) + 0.1 * rng.normal(size=300)
    y = z.astype(float)  # the reference model is right on z=1 and wrong on z=0
    split = eiil_infer(logits, y, n_iters=2000, lr=1e-2)
    agree = np.mean(split.assignment == z)
    assert max(agree, 1 - agree) >= 0.95
    assert split.status == "ok" and split.penalty > 0


def test_eiil_degenerate_split_warns():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        split = eiil_infer(np.zeros(10), np.ones(10), n_iters=5, jitter=0.0)
    assert split.status == "degenerate"
    assert np.allclose(split.weights, 0.5)
    assert any("one group" in str(m.message) for m in w)


# -- continual variational ---------------------------------------------------------------------

def test_posterior_handoff_is_bit_identical():
    t = make_trainer(cfg("vcl", n_mc=1), 4)
    t.observe(toy_env(seed=11))
    for k in t.model.base_names:
        m, s = t.prior[k]
        assert np.array_equal(m, t.model.params[f"{k}.mu"])
        assert np.array_equal(s, softplus_np(t.model.params[f"{k}.rho"]))
    assert t.history[-1]["head.W"][0] is not t.model.params["head.W.mu"]


def test_cvirmg_huge_beta_pins_the_posterior():
    envs = [toy_env(seed=12), toy_env(seed=13, flip=0.4)]
    t = make_trainer(cfg("c-virmg", beta=1e6, n_mc=1, lr=1e-3, epochs=5), 4)
    t.observe(envs[0])
    p1 = t.predictor()
    t.observe(envs[1])
    p2 = t.predictor()
    a, b = t.history
    for k in a:
        assert np.max(np.abs(a[k][0] - b[k][0])) < 5e-3
    x = np.random.default_rng(0).normal(size=(500, 4))
    assert np.mean((p1.logits(x) > 0) == (p2.logits(x) > 0)) > 0.99


def test_cvirmg_first_environment_halves_the_head():
    t = make_trainer(cfg("c-virmg", n_mc=1), 4)
    t.observe(toy_env(seed=14))
    mu = t.model.mean_params()
    assert np.allclose(t.predictor().params["head.W"], 0.5 * mu["head.W"])


# -- config ---------------------------------------------------------------------------------------

def test_config_defaults_and_validation():
    assert set(DEFAULTS) == set(TRAINERS)
    irm = default_config("irmv1")
    assert irm.lam == 91257.0 and irm.lr == 2.5e-4 and irm.anneal_epoch == irm.epochs // 2
    erm = default_config("erm")
    assert erm.lr == 1e-3 and erm.dropout == 0.75 and erm.weight_decay == 0.00125
    assert default_config("vcl").lr == 5e-3
    cb = default_config("c-bvirm")
    assert (cb.beta, cb.n_mc, cb.rho0, cb.rho1, cb.delta_rho) == (1.0, 5, 10.0, 10.0, 100.0)
    for bad in (dict(lam=-1.0), dict(epochs=0), dict(n_mc=0), dict(lr=0.0), dict(dropout=1.0),
                dict(method="nope"), dict(optimizer="rmsprop")):
        with pytest.raises(ValueError):
            MethodConfig(**bad)


def test_linear_model_only_for_capable_methods():
    with pytest.raises(ValueError):
        make_trainer(default_config("vcl"), 8, 4, "regression", model="linear")


# -- joint steps ------------------------------------------------------------------------------

def test_joint_step_with_one_group_equals_observe():
    env = toy_env(seed=21)
    a, b = make_trainer(cfg("c-virmv1", n_mc=1), 4), make_trainer(cfg("c-virmv1", n_mc=1), 4)
    a.observe(env)
    b.observe_joint([env])
    for k in a.model.params.names():
        assert np.array_equal(a.model.params[k], b.model.params[k])
    assert a.env_count == b.env_count == 1


def test_joint_objective_sums_groups_with_one_kl():
    t = make_trainer(cfg("c-virmv1", n_mc=1, lam=10.0, penalty_anneal_epoch=0), 4)
    e1, e2 = toy_env(n=40, seed=22), toy_env(n=40, seed=23, flip=0.4)
    b1 = (e1.features, as_targets(e1.labels, "classification"))
    b2 = (e2.features, as_targets(e2.labels, "classification"))
    leaves = t.model.params.leaves()

    def obj(batch, kl_w):
        return t.objective(leaves, batch, 0, np.random.default_rng(5), kl_w)[0].item()

    assert obj([b1, b2], 0.0) == pytest.approx(obj([b1], 0.0) + obj([b2], 0.0), rel=1e-12)
    kl_part = obj([b1], 0.7) - obj([b1], 0.0)
    assert obj([b1, b2], 0.7) - obj([b1, b2], 0.0) == pytest.approx(kl_part, rel=1e-9)


def test_joint_step_uses_the_total_sample_count_for_kl():
    t = make_trainer(cfg("c-virmv1", n_mc=1, epochs=1), 4)
    seen = []
    t.kl_weight = lambda n: seen.append(n) or 1.0 / n
    t.observe_joint([toy_env(n=30, seed=24), toy_env(n=50, seed=25)])
    assert seen == [80] and t.env_count == 1


@pytest.mark.parametrize("method", ["c-bvirm", "c-virmg"])
def test_streaming_methods_reject_joint_steps(method):
    t = make_trainer(cfg(method, n_mc=1), 4)
    with pytest.raises(NotImplementedError):
        t.observe_joint([toy_env(seed=26), toy_env(seed=27)])
