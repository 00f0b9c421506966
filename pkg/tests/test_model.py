"""Tests for the model: parameter groups, forwards, checkpointing."""

import numpy as np
import pytest

from vicinalda import diffcore as dc
from vicinalda.diffcore import SGD, ShapeError, Tensor, backward
from vicinalda.model import (
    RATIO_GRID,
    classify,
    copy_params,
    emp_forward,
    encode,
    init_model,
    load_checkpoint,
    logits_of,
    one_hot_argmax,
    params_checksum,
    pseudo_labels,
    save_checkpoint,
)

from test_diffcore import assert_grads_close, finite_difference_grads, run_backward


def small_model(seed=0):
    return init_model(d=3, n_classes=4, feat_dim=5, hidden=6, hidden_g=7, seed=seed)


class TestInit:
    def test_seed_determinism(self):
        a, b = small_model(3), small_model(3)
        for (_, ta), (_, tb) in zip(a.named_params(), b.named_params()):
            assert np.array_equal(ta.data, tb.data)

    def test_fresh_logits_finite_and_small(self):
        rng = np.random.default_rng(0)
        p = init_model(d=2, n_classes=2, seed=1)
        x = Tensor(rng.normal(size=(64, 2)))  # standardized-scale inputs
        logits = logits_of(p, x).data
        assert np.all(np.isfinite(logits))
        assert np.mean(np.abs(logits)) < 5.0

    def test_grid_contract(self):
        v = RATIO_GRID.values
        assert len(v) == 11
        assert v[0] == 0.0 and v[-1] == 1.0
        assert np.all(np.diff(v) > 0)

    def test_emp_head_output_width_is_grid_size(self):
        p = small_model()
        assert p.emp_w2.shape[1] == 11


class TestParameterGroups:
    def test_groups_are_disjoint(self):
        p = small_model()
        theta_ids = {id(t) for t in p.theta_params()}
        phi_ids = {id(t) for t in p.phi_params()}
        assert not theta_ids & phi_ids
        assert len(theta_ids) + len(phi_ids) == len(p.named_params())

    def test_phi_step_never_changes_theta(self):
        rng = np.random.default_rng(4)
        p = small_model()
        theta_before = params_checksum(p.theta_params())
        opt_phi = SGD(p.phi_params(), lr=0.1, momentum=0.9)
        zs = Tensor(rng.normal(size=(8, 5)))
        zt = Tensor(rng.normal(size=(8, 5)))
        backward(dc.tmean(emp_forward(p, zs, zt)))
        opt_phi.step()
        assert params_checksum(p.theta_params()) == theta_before

    def test_theta_step_never_changes_phi(self):
        rng = np.random.default_rng(5)
        p = small_model()
        phi_before = params_checksum(p.phi_params())
        opt_theta = SGD(p.theta_params(), lr=0.1, momentum=0.9)
        x = Tensor(rng.normal(size=(8, 3)))
        backward(dc.tmean(logits_of(p, x)))
        for t in p.phi_params():
            t.zero_grad()
        opt_theta.step()
        assert params_checksum(p.phi_params()) == phi_before


class TestForwards:
    def test_zero_weights_zero_features(self):
        p = small_model()
        for t in p.theta_params():
            t.data = np.zeros_like(t.data)
        x = Tensor(np.random.default_rng(0).normal(size=(4, 3)))
        assert np.array_equal(encode(p, x).data, np.zeros((4, 5)))

    def test_duplicated_row_gives_identical_features(self):
        p = small_model()
        row = np.random.default_rng(1).normal(size=3)
        z = encode(p, Tensor(np.stack([row, row])))
        assert np.array_equal(z.data[0], z.data[1])

    def test_encode_gradient_check(self):
        rng = np.random.default_rng(6)
        p = small_model()
        x = Tensor(rng.normal(size=(4, 3)))
        params = p.theta_params()[:4]
        fn = lambda: dc.tmean(encode(p, x) * Tensor(rng_const))
        rng_const = rng.normal(size=(4, 5))
        assert_grads_close(run_backward(fn, params), finite_difference_grads(fn, params))

    def test_classify_gradient_check(self):
        rng = np.random.default_rng(7)
        p = small_model()
        z = Tensor(rng.normal(size=(4, 5)))
        params = [p.cls_w, p.cls_b]
        const = rng.normal(size=(4, 4))
        fn = lambda: dc.tmean(classify(p, z) * Tensor(const))
        assert_grads_close(run_backward(fn, params), finite_difference_grads(fn, params))

    def test_classify_shape_error(self):
        p = small_model()
        with pytest.raises(ShapeError):
            classify(p, Tensor(np.zeros((2, 3))))

    def test_emp_forward_zero_weights_uniform(self):
        p = small_model()
        for t in p.phi_params():
            t.data = np.zeros_like(t.data)
        rng = np.random.default_rng(2)
        logits = emp_forward(p, Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(3, 5))))
        assert np.array_equal(logits.data, np.zeros((3, 11)))
        probs = dc.softmax_np(logits.data)
        soft = probs @ RATIO_GRID.values
        assert np.allclose(soft, 0.5, atol=1e-15)

    def test_emp_forward_row_independence_under_permutation(self):
        p = small_model()
        rng = np.random.default_rng(3)
        zs, zt = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        out = emp_forward(p, Tensor(zs), Tensor(zt)).data
        perm = np.array([3, 0, 4, 1, 2])
        out_p = emp_forward(p, Tensor(zs[perm]), Tensor(zt[perm])).data
        assert np.array_equal(out_p, out[perm])

    def test_emp_forward_row_untouched_by_other_pair_perturbation(self):
        p = small_model()
        rng = np.random.default_rng(17)
        zs, zt = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        base = emp_forward(p, Tensor(zs), Tensor(zt)).data
        zt2 = zt.copy()
        zt2[2] += 100.0  # perturb pair 2 only
        after = emp_forward(p, Tensor(zs), Tensor(zt2)).data
        keep = np.arange(5) != 2
        assert np.array_equal(after[keep], base[keep])

    def test_emp_forward_gradient_check_wrt_phi(self):
        rng = np.random.default_rng(8)
        p = small_model()
        zs = Tensor(rng.normal(size=(3, 5)))
        zt = Tensor(rng.normal(size=(3, 5)))
        const = rng.normal(size=(3, 11))
        params = p.phi_params()
        fn = lambda: dc.tmean(emp_forward(p, zs, zt) * Tensor(const))
        assert_grads_close(run_backward(fn, params), finite_difference_grads(fn, params))


class TestPseudoLabels:
    def test_clear_argmax(self):
        p = small_model()
        # steer the classifier so logits equal the features' first column
        logits = np.array([[0.1, 3.0, -1.0, 0.0], [2.0, 1.0, 5.0, -2.0]])
        got = one_hot_argmax(logits, 4)
        assert np.array_equal(got, [[0, 1, 0, 0], [0, 0, 1, 0]])

    def test_tie_break_lowest_index(self):
        logits = np.array([[1.0, 1.0, 0.0], [0.5, 2.0, 2.0]])
        got = one_hot_argmax(logits, 3)
        assert np.array_equal(got, [[1, 0, 0], [0, 1, 0]])

    def test_agreement_with_argmax_oracle(self):
        rng = np.random.default_rng(9)
        p = init_model(d=3, n_classes=6, seed=2)
        xt = Tensor(rng.normal(size=(40, 3)))
        got = pseudo_labels(p, xt).data
        logits = logits_of(p, xt).data
        for i in range(40):
            best = max(range(6), key=lambda k: (logits[i, k], -k))
            assert got[i].argmax() == best
            assert got[i].sum() == 1.0

    def test_idempotent_on_consistent_predictions(self):
        p = init_model(d=3, n_classes=4, seed=3)
        rng = np.random.default_rng(10)
        xt = Tensor(rng.normal(size=(12, 3)))
        first = pseudo_labels(p, xt).data
        second = pseudo_labels(p, xt).data
        assert np.array_equal(first, second)

    def test_no_gradient_flows(self):
        p = small_model()
        xt = Tensor(np.random.default_rng(11).normal(size=(5, 3)))
        labels = pseudo_labels(p, xt)
        assert labels.requires_grad is False
        assert labels._parents == ()


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path):
        p = init_model(d=2, n_classes=2, seed=42)
        rng = np.random.default_rng(12)
        for _, t in p.named_params():  # make contents nontrivial
            t.data = t.data + rng.normal(scale=0.01, size=t.data.shape)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(p, path)
        q = load_checkpoint(path)
        for (na, ta), (nb, tb) in zip(p.named_params(), q.named_params()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)
        assert q.dims() == p.dims()
        assert q.seed == p.seed
        save_checkpoint(q, str(tmp_path / "model2.ckpt"))
        assert open(path, "rb").read() == open(str(tmp_path / "model2.ckpt"), "rb").read()

    def test_copy_params_is_deep(self):
        p = small_model()
        q = copy_params(p)
        q.enc_w1.data[0, 0] += 1.0
        assert p.enc_w1.data[0, 0] != q.enc_w1.data[0, 0]
