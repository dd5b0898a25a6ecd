import math

import numpy as np
import pytest
from scipy.ndimage import correlate
from scipy.special import expit

from cso_unmix.autodiff import Graph, grad_check
from cso_unmix.dista import (
    Checkpoint,
    FingerprintError,
    ModelConfig,
    ParameterError,
    TrainingAborted,
    build_network_graph,
    dynamic_conv,
    dynamic_threshold,
    dynamic_transform,
    dynamic_weight,
    gradient_update,
    infer,
    init_stage_params,
    loss,
    stage_forward,
    train,
)
from cso_unmix.dista.model import evaluate_loss, Network, prepare
from cso_unmix.dista.stage import add_stage, stage_param_names
from cso_unmix.imaging import SensorConfig
from cso_unmix.scenegen import DatasetConfig, generate_dataset, load_split
from cso_unmix.solvers import apply_init


def corr(img, k):
    """Oracle: zero-padded 'same' cross-correlation of one 2-D image."""
    return correlate(img, k, mode="constant", cval=0.0)


def conv_oracle(x, w, b=None):
    # x (C_in, H, W), w (C_out, C_in, 3, 3)
    out = np.array([sum(corr(x[c], w[o, c]) for c in range(x.shape[0])) for o in range(w.shape[0])])
    if b is not None:
        out += b[:, None, None]
    return out


def params_for(C, seed=0, rho=0.1, k=0):
    return init_stage_params(k, C, rho, np.random.default_rng(seed))


# -- gradient_update -----------------------------------------------------------

def test_gradient_update_matches_loop_oracle():
    rng = np.random.default_rng(0)
    G = rng.normal(size=(4, 9))
    s = rng.normal(size=(2, 3, 3))
    z = rng.normal(size=(2, 4))
    r = gradient_update(s, z, G, 0.3)
    for b in range(2):
        sf = s[b].ravel()
        res = [sum(G[i, l] * sf[l] for l in range(9)) - z[b, i] for i in range(4)]
        ref = [sf[l] - 0.3 * sum(G[i, l] * res[i] for i in range(4)) for l in range(9)]
        assert np.max(np.abs(r[b].ravel() - ref)) < 1e-12


def test_gradient_update_fixed_points():
    rng = np.random.default_rng(1)
    G = rng.normal(size=(4, 9))
    s = rng.normal(size=(3, 3, 3))
    z = s.reshape(3, 9) @ G.T
    assert np.max(np.abs(gradient_update(s, z, G, 0.5) - s)) < 1e-12
    assert np.array_equal(gradient_update(s, rng.normal(size=(3, 4)), G, 0.0), s)


# -- dynamic weight / conv ----------------------------------------------------

def test_dynamic_weight_bias_kernel_and_determinism():
    p = params_for(2)
    p["s0.fc1.W"][:] = 0
    p["s0.fc2.W"][:] = 0
    p["s0.fc2.b"] = np.arange(9.0)
    rng = np.random.default_rng(2)
    W = dynamic_weight(rng.normal(size=(3, 5, 5)), p)
    assert W.shape == (3, 3, 3)
    assert all(np.array_equal(W[b], np.arange(9.0).reshape(3, 3)) for b in range(3))
    p = params_for(2)
    s = rng.normal(size=(1, 5, 5))
    assert np.array_equal(dynamic_weight(s, p), dynamic_weight(s.copy(), p))


def test_dynamic_weight_by_hand():
    p = params_for(2, seed=3)
    s = np.random.default_rng(3).normal(size=(1, 4, 4))
    h = np.maximum(p["s0.fc1.W"][:, 0] * s.mean() + p["s0.fc1.b"], 0)
    ref = (p["s0.fc2.W"] @ h + p["s0.fc2.b"]).reshape(3, 3)
    assert np.max(np.abs(dynamic_weight(s, p)[0] - ref)) < 1e-14


def test_dynamic_weight_gradient_wrt_input():
    p = params_for(2, seed=4)
    p["s0.fc1.b"] = np.linspace(-0.3, 0.3, 16)
    g = Graph(p)
    from cso_unmix.dista.stage import add_dynamic_weight

    s = g.input("s", requires_grad=True)
    W = add_dynamic_weight(g, 0, s)
    out = g.sum(g.mul(W, g.const(np.random.default_rng(4).normal(size=(2, 3, 3)))))
    g.forward({"s": np.random.default_rng(5).normal(size=(2, 1, 4, 4))})
    assert g.kink_margin() > 1e-5
    assert grad_check(g, out, wrt=["s"]) < 1e-4


def test_dynamic_conv_examples():
    rng = np.random.default_rng(6)
    r = rng.normal(size=(2, 5, 6))
    eye = np.zeros((2, 3, 3))
    eye[:, 1, 1] = 1
    assert np.array_equal(dynamic_conv(eye, r), r)
    assert not np.any(dynamic_conv(np.zeros((2, 3, 3)), r))
    W = rng.normal(size=(2, 3, 3))
    out = dynamic_conv(W, r)
    for b in range(2):
        assert np.max(np.abs(out[b] - corr(r[b], W[b]))) < 1e-13


def test_dynamic_conv_gradient_both_paths():
    rng = np.random.default_rng(7)
    g = Graph()
    r = g.input("r", requires_grad=True)
    W = g.input("W", requires_grad=True)
    out = g.sum(g.mul(g.dyn_conv2d(r, W), g.const(rng.normal(size=(2, 1, 5, 5)))))
    g.forward({"r": rng.normal(size=(2, 1, 5, 5)), "W": rng.normal(size=(2, 3, 3))})
    assert grad_check(g, out, wrt=["r"]) < 1e-4
    assert grad_check(g, out, wrt=["W"]) < 1e-4


# -- dynamic transform -------------------------------------------------------------

def _branches(r, s, p, C):
    main = np.array([conv_oracle(np.maximum(conv_oracle(r[b][None], p["s0.conv_B"]), 0), p["s0.conv_A"])
                     for b in range(len(r))])
    W = dynamic_weight(s, p)
    aux = expit(np.array([corr(r[b], W[b]) for b in range(len(r))]))
    return main, np.repeat(aux[:, None], C, axis=1)


def test_dynamic_transform_alpha_extremes_and_default():
    C = 3
    rng = np.random.default_rng(8)
    p = params_for(C, seed=8)
    r, s = rng.normal(size=(2, 2, 5, 5))
    main, aux = _branches(r, s, p, C)
    assert np.max(np.abs(dynamic_transform(r, s, p, C, alpha=1.0) - main)) < 1e-12
    assert np.max(np.abs(dynamic_transform(r, s, p, C, alpha=0.0) - aux)) < 1e-12
    assert np.max(np.abs(dynamic_transform(r, s, p, C, alpha=0.7) - (0.7 * main + 0.3 * aux))) < 1e-12
    assert ModelConfig().alpha == 0.7


def test_dynamic_transform_alpha0_ignores_main_kernels():
    C = 2
    rng = np.random.default_rng(9)
    p = params_for(C, seed=9)
    r, s = rng.normal(size=(2, 1, 4, 4))
    a = dynamic_transform(r, s, p, C, alpha=0.0)
    p["s0.conv_A"] = rng.normal(size=p["s0.conv_A"].shape)
    p["s0.conv_B"] = rng.normal(size=p["s0.conv_B"].shape)
    assert np.array_equal(a, dynamic_transform(r, s, p, C, alpha=0.0))


def test_dynamic_transform_rejects_bad_alpha():
    p = params_for(2)
    with pytest.raises(ParameterError):
        dynamic_transform(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), p, 2, alpha=1.2)


# -- dynamic threshold ---------------------------------------------------------------

def threshold_oracle(f, p, C):
    u1 = conv_oracle(f, p["s0.thr_conv1"], p["s0.thr_conv1.b"])
    u2 = conv_oracle(f, p["s0.thr_conv2"], p["s0.thr_conv2.b"])
    u = np.concatenate([u1, u2])
    sa = np.stack([u.mean(axis=0), u.max(axis=0)])
    mask = expit(conv_oracle(sa, p["s0.thr_mask_conv"], p["s0.thr_mask_conv.b"]))
    return np.maximum(conv_oracle(mask * u1 + mask * u2, p["s0.thr_out_conv"], p["s0.thr_out_conv.b"]), 0)


def test_dynamic_threshold_matches_oracle():
    C = 3
    rng = np.random.default_rng(10)
    p = params_for(C, seed=10)
    for name in ("thr_conv1.b", "thr_conv2.b", "thr_mask_conv.b", "thr_out_conv.b"):
        p[f"s0.{name}"] = rng.normal(size=C)
    f = rng.normal(size=(2, C, 5, 6))
    got = dynamic_threshold(f, p)
    for b in range(2):
        assert np.max(np.abs(got[b] - threshold_oracle(f[b], p, C))) < 1e-12


def test_dynamic_threshold_zero_features_constant():
    C = 2
    p = params_for(C, seed=11)
    p["s0.thr_out_conv"][:] = 0
    p["s0.thr_out_conv.b"] = np.array([0.25, -1.0])
    t = dynamic_threshold(np.zeros((1, C, 4, 4)), p)
    assert np.all(t[0, 0] == 0.25) and np.all(t[0, 1] == 0.0)
    # with zero features every map is bias-only; zero padding of the two
    # later convs only disturbs a 2-cell border
    p = params_for(C, seed=11)
    p["s0.thr_out_conv.b"] = np.array([0.3, 0.1])
    p["s0.thr_conv1.b"] = np.array([0.5, -0.2])
    t = dynamic_threshold(np.zeros((1, C, 10, 10)), p)
    assert np.all(t >= 0)
    centre = t[0, :, 2:-2, 2:-2]
    assert np.allclose(centre, centre[:, :1, :1], atol=1e-15)


def test_dynamic_threshold_nonnegative_on_1000_inputs():
    C = 3
    rng = np.random.default_rng(12)
    p = params_for(C, seed=12)
    for name in ("thr_conv1.b", "thr_conv2.b", "thr_mask_conv.b", "thr_out_conv.b"):
        p[f"s0.{name}"] = rng.normal(size=C)
    t = dynamic_threshold(rng.normal(0, 3, size=(1000, C, 5, 5)), p)
    assert t.min() >= 0.0 and t.max() > 0.0


def test_dynamic_threshold_adapts_to_local_blob():
    C = 2
    rng = np.random.default_rng(13)
    p = params_for(C, seed=13)
    p["s0.thr_out_conv.b"] = np.full(C, 1.0)
    f = rng.normal(size=(1, C, 9, 9))
    g = f.copy()
    g[0, :, 4, 4] += 5.0
    diff = np.abs(dynamic_threshold(f, p) - dynamic_threshold(g, p))
    assert diff.max() > 0


# -- stage_forward ---------------------------------------------------------------

def test_stage_linear_round_trip():
    C = 2
    rng = np.random.default_rng(14)
    G = rng.normal(size=(4, 16))
    p = params_for(C, seed=14, rho=0.0)
    delta = np.zeros((3, 3))
    delta[1, 1] = 1
    # B copies r to both channels, A scales them, the inverse undoes it
    p["s0.conv_B"] = np.stack([delta, delta])[:, None]
    p["s0.conv_A"] = np.zeros((C, C, 3, 3))
    p["s0.conv_A"][0, 0] = 2 * delta
    p["s0.conv_A"][1, 1] = 3 * delta
    p["s0.inv_conv_A"] = np.zeros((C, C, 3, 3))
    p["s0.inv_conv_A"][0, 0] = delta / 2
    p["s0.inv_conv_A"][1, 1] = delta / 3
    p["s0.inv_conv_B"] = np.stack([delta, delta])[None] / 2
    p["s0.thr_out_conv"][:] = 0  # theta_d = relu(0) = 0
    p["s0.theta_base"] = np.asarray(-60.0)  # softplus ~ 1e-26
    s = rng.uniform(0.5, 2.0, size=(2, 4, 4))
    out, cache = stage_forward(s, rng.normal(size=(2, 4)), G, p, C, alpha=1.0)
    assert np.array_equal(cache["r"][:, 0], s)
    assert np.max(np.abs(out - s)) < 1e-6


def test_stage_infinite_threshold_gives_constant():
    C = 2
    rng = np.random.default_rng(15)
    G = rng.normal(size=(4, 16))
    p = params_for(C, seed=15)
    p["s0.theta_base"] = np.asarray(1e6)
    out, _ = stage_forward(rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4)), G, p, C)
    assert np.all(out == out.flat[0])


def test_stage_cache_contents():
    C = 3
    rng = np.random.default_rng(16)
    G = rng.normal(size=(4, 25))
    p = params_for(C, seed=16)
    out, cache = stage_forward(rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 4)), G, p, C)
    shapes = {k: v.shape for k, v in cache.items()}
    assert shapes["r"] == (2, 1, 5, 5) and shapes["F_d"] == (2, C, 5, 5) and shapes["U"] == (2, 2 * C, 5, 5)
    assert shapes["SA_avg"] == shapes["SA_max"] == (2, 1, 5, 5) and shapes["theta_d"] == (2, C, 5, 5)
    assert shapes["W"] == (2, 3, 3) and np.array_equal(cache["out"][:, 0], out)
    assert cache["theta_d"].min() >= 0


def static_stage(s, z, G, p, theta):
    """Oracle: classic fixed-transform stage, F~(soft(F(r), theta))."""
    out = []
    for b in range(len(s)):
        sf = s[b].ravel()
        r = (sf - p["s0.rho"] * (G.T @ (G @ sf - z[b]))).reshape(s[b].shape)
        f = conv_oracle(np.maximum(conv_oracle(r[None], p["s0.conv_B"]), 0), p["s0.conv_A"])
        x = np.sign(f) * np.maximum(np.abs(f) - theta, 0)
        out.append(conv_oracle(np.maximum(conv_oracle(x, p["s0.inv_conv_A"]), 0), p["s0.inv_conv_B"])[0])
    return np.array(out)


def test_static_reduction():
    C = 3
    rng = np.random.default_rng(17)
    G = rng.normal(size=(9, 36)) / 3
    p = params_for(C, seed=17, rho=0.2)
    p["s0.thr_out_conv"][:] = 0
    p["s0.thr_out_conv.b"] = np.full(C, 0.05)
    p["s0.theta_base"] = np.asarray(-1.0)
    theta = 0.05 + math.log1p(math.exp(-1.0))
    s = rng.normal(size=(3, 6, 6))
    z = rng.normal(size=(3, 9))
    out, _ = stage_forward(s, z, G, p, C, alpha=1.0)
    assert np.max(np.abs(out - static_stage(s, z, G, p, theta))) < 1e-12


# -- full-stage gradients ----------------------------------------------------------

# Deep graphs have gradient entries near 1e-7, where central-difference
# round-off (about eps * |f| / h) dominates at h = 1e-6; h = 1e-5 balances
# round-off against truncation error.
H = 1e-5


def _smooth_stage_graph(C, seed, stages=1):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(4, 16)) / 2
    while True:
        p = {}
        for k in range(stages):
            p.update(init_stage_params(k, C, 0.1, rng))
            for name in ("thr_conv1.b", "thr_conv2.b", "thr_mask_conv.b", "thr_out_conv.b"):
                p[f"s{k}.{name}"] = rng.normal(0, 0.3, size=C)
        g = Graph(p)
        s = g.input("s", requires_grad=True)
        z = g.input("z", requires_grad=True)
        Gt, Gm = g.const(G.T), g.const(G)
        for k in range(stages):
            s = add_stage(g, k, s, z, Gt, Gm, (2, 4, 4), C, 0.7)
        out = g.sum(g.mul(s, g.const(rng.uniform(-1, 1, size=(2, 1, 4, 4)))))
        g.forward({"s": rng.normal(size=(2, 1, 4, 4)), "z": rng.normal(size=(2, 4))})
        if g.kink_margin() > 10 * H:
            return g, out


@pytest.mark.parametrize("seed", range(3))
def test_full_stage_gradient(seed):
    g, out = _smooth_stage_graph(2, seed)
    assert grad_check(g, out, h=H) < 1e-4


def test_two_stage_gradient():
    g, out = _smooth_stage_graph(2, 7, stages=2)
    assert grad_check(g, out, h=H) < 1e-4


def test_training_graph_gradient():
    rng = np.random.default_rng(8)
    cfg = ModelConfig(num_stages=2, channels=2)
    G = rng.normal(size=(4, 16)) / 2
    while True:
        p = {}
        for k in range(2):
            p.update(init_stage_params(k, 2, 0.1, rng))
        g = build_network_graph(cfg, G, p, 2, (4, 4), training=True)
        g.forward({"z": rng.normal(size=(2, 4)), "s0": rng.normal(size=(2, 1, 4, 4)),
                   "gt": rng.uniform(0, 1, size=(2, 1, 4, 4))})
        if g.kink_margin() > 10 * H:
            break
    assert grad_check(g, "loss", h=H) < 1e-4


# -- loss -----------------------------------------------------------------------

def test_loss_examples():
    gt = np.arange(8.0).reshape(2, 4)
    assert loss(gt, gt, [gt, gt], 0.01) == (0.0, {"discrepancy": 0.0, "constraint": 0.0})
    pred = gt + 1
    assert loss(pred, gt, [pred], 0.0)[0] == 1.0
    with pytest.raises(ValueError):
        loss(gt, gt[:, :3], [], 0.01)
    with pytest.raises(ValueError):
        loss(gt, gt, [gt[:1]], 0.01)


def test_loss_two_sample_toy():
    # M = 2 samples, N_s = 2 cells, N = 2 stages
    gt = np.array([[1.0, 0.0], [0.0, 2.0]])
    final = np.array([[0.5, 0.0], [0.0, 3.0]])
    ident = [np.array([[1.0, 0.1], [0.0, 2.0]]), np.array([[0.8, 0.0], [0.0, 2.0]])]
    # discrepancy (0.25 + 1) / 4 ; constraint 0.01/4 + 0.04/4
    total, parts = loss(final, gt, ident, 0.01)
    assert parts["discrepancy"] == pytest.approx(0.3125, abs=1e-15)
    assert parts["constraint"] == pytest.approx(0.0125, abs=1e-15)
    assert abs(total - (0.3125 + 0.01 * 0.0125)) < 1e-12


def test_graph_loss_matches_numpy_loss():
    rng = np.random.default_rng(18)
    cfg = ModelConfig(num_stages=2, channels=2)
    G = rng.normal(size=(4, 16))
    p = {}
    for k in range(2):
        p.update(init_stage_params(k, 2, 0.1, rng))
    inputs = {"z": rng.normal(size=(3, 4)), "s0": rng.normal(size=(3, 1, 4, 4)), "gt": rng.uniform(size=(3, 1, 4, 4))}
    g = build_network_graph(cfg, G, p, 3, (4, 4), training=True)
    res = g.forward(inputs)
    from cso_unmix.dista.stage import add_dynamic_transform, add_inverse_transform

    idents = []
    for k in range(2):
        h = Graph(p)
        x = h.input("x")
        h.output("o", add_inverse_transform(h, k, add_dynamic_transform(h, k, x, x, 2, 0.7)))
        idents.append(h.forward({"x": inputs["gt"]})["o"])
    total, parts = loss(res["s_final"], inputs["gt"], idents, 0.01)
    assert abs(float(res["loss"]) - total) < 1e-12
    assert abs(float(res["constraint"]) - parts["constraint"]) < 1e-12


# -- training, checkpoints, inference ----------------------------------------------

@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    generate_dataset(DatasetConfig(num_samples=100, rng_seed=5), SensorConfig(), out)
    return out


def test_train_smoke_and_determinism(tiny_data, tmp_path):
    cfg = ModelConfig(num_stages=2, channels=2, epochs=1, batch_size=32, seed=3)
    a = train(tiny_data, cfg)
    assert len(a.trace) == 1 and np.isfinite(a.trace[0]["train_loss"]) and np.isfinite(a.trace[0]["val_loss"])
    b = train(tiny_data, cfg)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    c = train(tiny_data, ModelConfig(num_stages=2, channels=2, epochs=1, batch_size=32, seed=4))
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_checkpoint_round_trip(tiny_data, tmp_path):
    ck = train(tiny_data, ModelConfig(num_stages=2, channels=3, epochs=1, batch_size=50))
    ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.config == ck.config and back.fingerprint == ck.fingerprint and back.trace == ck.trace
    assert np.array_equal(back.init.Q, ck.init.Q)
    assert set(back.params) == set(stage_param_names(0) + stage_param_names(1))
    assert all(np.array_equal(back.params[n], ck.params[n]) for n in ck.params)
    (tmp_path / "bad.ckpt").write_bytes(b"nonsense")
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "bad.ckpt")
    (tmp_path / "cut.ckpt").write_bytes((tmp_path / "m.ckpt").read_bytes() + b"x")
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "cut.ckpt")


def test_infer_zero_stages_is_linear_init(tiny_data):
    ck = train(tiny_data, ModelConfig(num_stages=0, channels=2, epochs=0))
    _, grid, G = prepare(tiny_data, ck.config)
    test = load_split(tiny_data, "test")
    out = infer(ck, test.z, G)
    ref = apply_init(ck.init, test.z.reshape(len(test), -1).T / 255.0).T * 255.0
    assert np.allclose(out.reshape(len(test), -1), ref, atol=1e-10)


def test_infer_deterministic_and_fingerprint(tiny_data):
    ck = train(tiny_data, ModelConfig(num_stages=1, channels=2, epochs=1, batch_size=40))
    _, grid, G = prepare(tiny_data, ck.config)
    z = load_split(tiny_data, "test").z
    a = infer(ck, z, G)
    assert a.shape == (len(z), 33, 33)
    assert np.array_equal(a, infer(ck, z, G))
    # other batch sizes change BLAS summation order only
    assert np.max(np.abs(a - infer(ck, z, G, batch_size=3))) < 1e-12
    with pytest.raises(FingerprintError, match=ck.fingerprint):
        infer(ck, z, G * (1 + 1e-12))


def test_training_reduces_identity_constraint(tiny_data):
    base = dict(num_stages=2, channels=4, batch_size=16, learning_rate=3e-3, seed=1)
    init = train(tiny_data, ModelConfig(epochs=0, **base))
    trained = train(tiny_data, ModelConfig(epochs=6, **base))
    val = load_split(tiny_data, "val")
    _, grid, G = prepare(tiny_data, init.config)
    before = evaluate_loss(Network(init.config, G, init.params, grid.shape), init.init, val, 16)
    after = evaluate_loss(Network(trained.config, G, trained.params, grid.shape), trained.init, val, 16)
    assert after["constraint"] < before["constraint"]
    assert after["loss"] < before["loss"]
    losses = [r["train_loss"] for r in trained.trace]
    assert min(losses[1:]) < losses[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_last_good(tiny_data):
    cfg = ModelConfig(num_stages=1, channels=2, epochs=3, batch_size=40, learning_rate=1e150)
    with pytest.raises(TrainingAborted) as info:
        train(tiny_data, cfg)
    good = info.value.checkpoint
    assert all(np.all(np.isfinite(v)) for v in good.params.values())
    assert all(np.isfinite(r["train_loss"]) for r in good.trace)


def test_model_config_defaults_and_validation():
    cfg = ModelConfig()
    assert (cfg.num_stages, cfg.batch_size, cfg.gamma, cfg.grid_factor, round(1 - cfg.alpha, 12)) == (6, 64, 0.01, 3, 0.3)
    for kw in (dict(num_stages=-1), dict(channels=0), dict(gamma=-1), dict(alpha=1.5)):
        with pytest.raises(ValueError):
            ModelConfig(**kw)
