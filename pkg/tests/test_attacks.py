import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advtrust import nn
from advtrust.attacks import (
    AttackConfig,
    attack_batch,
    deepfool_attack,
    estimate_ddb,
    estimate_ddb_batch,
    pgd_attack,
    pgd_batch,
    rank_correlation,
    steps_profile,
)
from advtrust.errors import ConfigError, PreconditionError

from conftest import dense_net, logistic_net, make_net

WIDE = (-1.0, 1.0)
UNBOUNDED = (-math.inf, math.inf)


def linear_binary(w, b):
    """Logits ``(w.x + b, 0)``; the boundary is the hyperplane ``w.x + b = 0``."""
    w = np.asarray(w, dtype=np.float64)
    return dense_net(np.stack([w, np.zeros_like(w)]), [b, 0.0], dtype=np.float64)


def kinked_boundary_net():
    """
    Score ``g(u, v) = min(u, (u + v)/sqrt 2)`` as logit 1 against a zero logit 0.

    The boundary has two flat pieces with normals (1, 0) and (1, 1)/sqrt 2.
    An L-infinity sign step moves ``g`` by ``s`` on the first piece and by
    ``sqrt(2) s`` on the second.
    """
    r = 1 / math.sqrt(2)
    W1 = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0 - r, -r]])
    W2 = np.array([[0.0, 0.0, 0.0], [1.0, -1.0, -1.0]])
    layers = (
        {"kind": "dense", "in": 2, "out": 3},
        {"kind": "relu"},
        {"kind": "dense", "in": 3, "out": 2},
    )
    spec = nn.ModelSpec(layers, (2,), 2)
    return nn.Network(spec, {0: {"W": W1, "b": np.zeros(3)}, 2: {"W": W2, "b": np.zeros(2)}})


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig.pgd(epsilon=-0.1)
    with pytest.raises(ConfigError):
        AttackConfig.pgd(step_size=0)
    with pytest.raises(ConfigError):
        AttackConfig.pgd(max_steps=0)
    with pytest.raises(ConfigError):
        AttackConfig.deepfool(overshoot=-0.1)
    with pytest.raises(ConfigError):
        AttackConfig(kind="cw")
    cfg = AttackConfig.pgd()
    assert (cfg.epsilon, cfg.step_size, cfg.max_steps, cfg.random_start) == (8 / 255, 2 / 255, 20, False)
    df = AttackConfig.deepfool()
    assert (df.overshoot, df.max_steps) == (0.02, 50)
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg


def test_wrong_kind_for_attack_function():
    with pytest.raises(ConfigError):
        pgd_attack(logistic_net(), np.array([0.5]), AttackConfig.deepfool())
    with pytest.raises(ConfigError):
        deepfool_attack(logistic_net(), np.array([0.5]), AttackConfig.pgd())


def test_input_outside_bounds_is_rejected():
    with pytest.raises(PreconditionError):
        pgd_attack(logistic_net(), np.array([-0.5]), AttackConfig.pgd())


# ---------------------------------------------------------------------------
# PGD


def test_pgd_logistic_flips_after_one_step():
    cfg = AttackConfig.pgd(epsilon=0.3, step_size=0.1, max_steps=10, pixel_bounds=WIDE)
    net = logistic_net().astype(np.float64)
    res = pgd_attack(net, np.array([0.05]), cfg)
    assert res.original_pred == 1 and res.success and res.steps == 1
    assert res.adversarial[0] == pytest.approx(-0.05, abs=1e-12)
    assert res.adversarial_pred == 0
    assert res.delta == pytest.approx(0.1, abs=1e-12)


def test_pgd_logistic_cannot_cross_the_projection_floor():
    cfg = AttackConfig.pgd(epsilon=0.3, step_size=0.1, max_steps=10, pixel_bounds=WIDE)
    net = logistic_net().astype(np.float64)
    seen = []
    res = pgd_attack(net, np.array([0.5]), cfg, callback=lambda t, x: seen.append(float(x[0, 0])))
    assert not res.success and res.steps == cfg.failure_steps == 11
    assert min(seen) == pytest.approx(0.2, abs=1e-12)
    est = estimate_ddb(net, np.array([0.5]), cfg)
    assert est.censored and est.d_f == pytest.approx(0.3)


def test_pgd_vanishing_budget_fails():
    net = make_net("cnn", seed=4)
    x = np.random.default_rng(4).uniform(size=(3, 8, 8)).astype(np.float32)
    res = pgd_attack(net, x, AttackConfig.pgd(epsilon=1e-9, step_size=1e-9))
    assert not res.success


def test_pgd_ball_and_bounds_hold_at_every_iterate():
    rng = np.random.default_rng(21)
    archs = ["cnn", "maxpool2d", "conv2d", "relu"]
    for pair in range(200):
        arch = archs[pair % len(archs)]
        net = make_net(arch, seed=pair)
        shape = net.spec.input_shape
        x = rng.uniform(size=(1,) + shape).astype(np.float32)
        eps = float(rng.uniform(0.005, 0.2))
        cfg = AttackConfig.pgd(epsilon=eps, step_size=float(rng.uniform(0.2, 1.0)) * eps,
                               max_steps=int(rng.integers(1, 12)))

        def check(t, xt, x0=x, eps=eps):
            assert np.abs(xt.astype(np.float64) - x0).max() <= eps + 1e-6
            assert xt.min() >= 0.0 and xt.max() <= 1.0

        out = pgd_batch(net, x, cfg, callback=check)
        check(None, out.adversarial)


def test_pgd_against_given_label_and_without_early_stop():
    net = logistic_net().astype(np.float64)
    cfg = AttackConfig.pgd(epsilon=0.3, step_size=0.1, max_steps=5, pixel_bounds=WIDE)
    # attacking label 0 on a class-1 point pushes x upwards: never flips
    out = pgd_batch(net, np.array([[0.05]]), cfg, labels=np.array([0]))
    assert not out.success[0]
    assert out.adversarial[0, 0] == pytest.approx(0.35)
    full = pgd_batch(net, np.array([[0.05]]), cfg, early_stop=False)
    assert full.success[0] and full.steps[0] == 1
    assert full.adversarial[0, 0] == pytest.approx(-0.25)


def test_pgd_zero_epsilon_is_the_identity():
    net = make_net("cnn", seed=2)
    x = np.random.default_rng(2).uniform(size=(4, 3, 8, 8)).astype(np.float32)
    out = pgd_batch(net, x, AttackConfig.pgd(epsilon=0.0), early_stop=False)
    np.testing.assert_array_equal(out.adversarial, x)


def test_pgd_random_start_stays_in_ball_and_is_seeded():
    net = make_net("cnn", seed=3)
    x = np.random.default_rng(3).uniform(size=(4, 3, 8, 8)).astype(np.float32)
    cfg = AttackConfig.pgd(random_start=True, seed=5, max_steps=3)
    a = pgd_batch(net, x, cfg)
    b = pgd_batch(net, x, cfg)
    np.testing.assert_array_equal(a.adversarial, b.adversarial)
    assert np.abs(a.adversarial - x).max() <= cfg.epsilon + 1e-6


# ---------------------------------------------------------------------------
# DeepFool


def test_deepfool_matches_hyperplane_distance_on_50_classifiers():
    rng = np.random.default_rng(31)
    cfg = AttackConfig.deepfool(pixel_bounds=UNBOUNDED)
    for _ in range(50):
        n = int(rng.integers(2, 40))
        w = rng.normal(size=n)
        x = rng.uniform(size=n)
        b = float(rng.uniform(0.05, 2.0) * np.linalg.norm(w) - w @ x)  # puts x on the positive side
        net = linear_binary(w, b)
        res = deepfool_attack(net, x, cfg)
        analytic = (1 + cfg.overshoot) * abs(w @ x + b) / np.linalg.norm(w)
        assert res.success and res.steps == 1
        assert abs(res.delta - analytic) <= 0.02 * analytic


def test_deepfool_without_overshoot_is_the_point_to_plane_distance():
    rng = np.random.default_rng(32)
    w = rng.normal(size=10)
    x = rng.uniform(size=10)
    b = float(0.7 * np.linalg.norm(w) - w @ x)
    est = estimate_ddb(linear_binary(w, b), x, AttackConfig.deepfool(overshoot=0.0, pixel_bounds=UNBOUNDED))
    assert not est.censored
    assert est.d_f == pytest.approx(0.7, rel=0.02)


def test_deepfool_from_the_boundary_takes_a_tiny_step():
    w = np.array([1.0, -2.0])
    x = np.array([0.4, 0.2])  # w.x = 0
    res = deepfool_attack(linear_binary(w, 0.0), x, AttackConfig.deepfool(pixel_bounds=UNBOUNDED))
    assert res.success and res.steps <= 1
    assert res.delta < 1e-5


def test_deepfool_constant_model_fails():
    net = dense_net(np.zeros((3, 4)), [0.0, 1.0, 0.0])
    res = deepfool_attack(net, np.full(4, 0.5, dtype=np.float32), AttackConfig.deepfool())
    assert not res.success and res.steps == 51
    est = estimate_ddb(net, np.full(4, 0.5, dtype=np.float32), AttackConfig.deepfool())
    assert est.censored and est.d_f == pytest.approx(2.0)  # (hi - lo) * sqrt(4)


def test_ddb_uses_model_prediction_not_ground_truth():
    # logistic model calls x=0.2 class 1; a ground-truth label of 0 is irrelevant to the estimate
    net = logistic_net().astype(np.float64)
    est = estimate_ddb(net, np.array([0.2]), AttackConfig.deepfool(overshoot=0.0, pixel_bounds=WIDE))
    assert est.result.original_pred == 1
    assert est.d_f == pytest.approx(0.2, rel=1e-3)


# ---------------------------------------------------------------------------
# result invariants


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["pgd", "deepfool"]))
def test_result_fields_are_consistent(seed, kind):
    net = make_net("cnn", seed=seed % 40)
    x = np.random.default_rng(seed).uniform(size=(3, 3, 8, 8)).astype(np.float32)
    cfg = AttackConfig.pgd(epsilon=0.1, step_size=0.02) if kind == "pgd" else AttackConfig.deepfool(max_steps=20)
    out = attack_batch(net, x, cfg)
    for i in range(3):
        r = out.result(i)
        assert r.success == (r.adversarial_pred != r.original_pred)
        assert nn.predict(net, r.adversarial) == r.adversarial_pred
        diff = r.adversarial.astype(np.float64) - x[i].astype(np.float64)
        assert abs(r.delta - np.linalg.norm(diff.ravel())) < 1e-6
        assert r.delta >= 0
        if r.success:
            assert 1 <= r.steps <= cfg.max_steps
        else:
            assert r.steps == cfg.failure_steps


def test_threaded_deepfool_matches_serial():
    net = make_net("cnn", seed=6)
    x = np.random.default_rng(6).uniform(size=(8, 3, 8, 8)).astype(np.float32)
    cfg = AttackConfig.deepfool(max_steps=20)
    a = attack_batch(net, x, cfg, threads=1)
    b = attack_batch(net, x, cfg, threads=4)
    np.testing.assert_array_equal(a.adversarial, b.adversarial)
    np.testing.assert_array_equal(a.steps, b.steps)


def test_pgd_ceiling_is_the_l2_radius_of_the_ball():
    cfg = AttackConfig.pgd(epsilon=0.03)
    assert cfg.ceiling(768) == pytest.approx(0.03 * math.sqrt(768))
    assert AttackConfig.pgd(ddb_ceiling=2.5).ceiling(768) == 2.5
    assert AttackConfig.deepfool(pixel_bounds=UNBOUNDED).ceiling(4) == math.inf


# ---------------------------------------------------------------------------
# steps profile


def test_equal_distance_different_steps():
    net = kinked_boundary_net()
    d = 0.105
    flat_side = np.array([d, 5.0])  # nearest piece has normal (1, 0)
    diagonal_side = np.array([5.0, d * math.sqrt(2) - 5.0])  # nearest piece has normal (1, 1)/sqrt 2
    x = np.stack([flat_side, diagonal_side])
    assert nn.predict(net, x).tolist() == [1, 1]
    pgd = AttackConfig.pgd(epsilon=0.5, step_size=0.01, max_steps=50, pixel_bounds=UNBOUNDED)
    deepfool = AttackConfig.deepfool(overshoot=0.0, pixel_bounds=UNBOUNDED)
    prof = steps_profile(net, x, pgd, ddb_cfg=deepfool)
    np.testing.assert_allclose(prof.d_f, [d, d], rtol=1e-3)
    assert prof.d_f[0] == pytest.approx(prof.d_f[1], rel=1e-6)
    assert prof.steps.tolist() == [math.ceil(d / 0.01), math.ceil(d / (0.01 * math.sqrt(2)))]


def test_steps_profile_rows_and_errors():
    net = logistic_net().astype(np.float64)
    cfg = AttackConfig.pgd(epsilon=0.3, step_size=0.1, pixel_bounds=WIDE)
    prof = steps_profile(net, np.array([[0.05]]), cfg, labels=[1], sample_ids=[42])
    rows = list(prof.rows())
    assert rows == [{
        "sample_id": 42, "class": 1, "d_f": pytest.approx(0.1), "censored": 0, "steps": 1,
        "success": 1, "attack_kind": "pgd",
    }]
    with pytest.raises(PreconditionError):
        steps_profile(net, np.zeros((0, 1)), cfg)


def test_rank_correlation():
    d = np.array([0.1, 0.5, 0.2, 0.9])
    assert rank_correlation(d, d**3 + 7) == pytest.approx(1.0)
    assert rank_correlation(d, -d) == pytest.approx(-1.0)
    assert math.isnan(rank_correlation(d, np.ones(4)))


def test_estimate_ddb_batch_marks_censoring():
    net = logistic_net().astype(np.float64)
    cfg = AttackConfig.pgd(epsilon=0.3, step_size=0.1, pixel_bounds=WIDE)
    d_f, censored, _ = estimate_ddb_batch(net, np.array([[0.05], [0.5]]), cfg)
    assert censored.tolist() == [False, True]
    np.testing.assert_allclose(d_f, [0.1, 0.3])
