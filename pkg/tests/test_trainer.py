from dataclasses import replace

import numpy as np
import pytest

from dmg_lab.data import SyntheticSpec, generate
from dmg_lab.masks import MaskBank
from dmg_lab.model import build_network, domain_masks, forward, forward_masked, predict_proba
from dmg_lab.numeric import make_rng, softmax_xent
from dmg_lab.trainer import TrainConfig, loss_total, select_checkpoint, train

from conftest import central_diff


def small_net(seed=0, masked=None, n_heads=1, hidden=(6,), task_hidden=(5,), in_dim=4, C=3):
    return build_network(in_dim, C, make_rng(seed), hidden, task_hidden, masked_layers=masked,
                         n_heads=n_heads, final_init_std=0.5)


def bank_for(net, domains=("a", "b", "c"), seed=1):
    rng = make_rng(seed)
    return MaskBank(list(domains), net.mask_specs(), [rng.normal(size=(len(domains), s.k)) for s in net.mask_specs()])


@pytest.fixture(scope="module")
def tiny_suite():
    return generate(SyntheticSpec(p=3, q=1, C=3, n=90, shared_dims=4, specific_dims=2, seed=0))


class TestForward:
    def test_all_ones_mask_is_bit_identical_to_unmasked(self, rng):
        net = small_net()
        x = rng.normal(size=(7, 4))
        ones = [np.ones(s.k) for s in net.mask_specs()]
        plain, _ = forward(net, x)
        masked = forward_masked(net, None, x, mode="given", masks=ones)
        assert np.array_equal(plain, masked)

    def test_saturated_soft_equals_unmasked(self, rng):
        net = small_net()
        bank = MaskBank.saturated(["a", "b"], net.mask_specs())
        x = rng.normal(size=(7, 4))
        np.testing.assert_allclose(forward_masked(net, bank, x, "a", mode="soft"), forward(net, x)[0], atol=1e-9)

    def test_sampled_expectation_matches_soft(self, rng):
        # one masked layer feeding the logits directly: logits are linear in the mask
        net = build_network(3, 2, make_rng(0), hidden=(8,), task_hidden=(), final_init_std=1.0)
        bank = MaskBank(["a", "b"], net.mask_specs(), [np.zeros((2, 8))])
        x = np.tile(rng.normal(size=(1, 3)), (100_000, 1))
        sampled = forward_masked(net, bank, x, "a", rng=make_rng(5), mode="sampled")
        soft = forward_masked(net, bank, x[:1], "a", mode="soft")[0]
        se = sampled.std(axis=0, ddof=1) / np.sqrt(sampled.shape[0])
        assert np.all(np.abs(sampled.mean(axis=0) - soft) <= 3 * se)

    def test_unknown_domain(self, rng):
        net = small_net()
        with pytest.raises(KeyError):
            forward_masked(net, bank_for(net), rng.normal(size=(2, 4)), "zzz", mode="soft")

    def test_mask_width_mismatch(self, rng):
        net = small_net()
        with pytest.raises(ValueError):
            forward(net, rng.normal(size=(2, 4)), [np.ones(3), np.ones(5)])

    def test_identical_heads_average_to_single_head(self, rng):
        multi = small_net(masked=[], n_heads=3)
        single = small_net(masked=[])
        for k in list(multi.params):
            if ".h" in k:
                base = k.split(".h")[0] + "." + k.rsplit(".", 1)[1]
                multi.params[k] = single.params[base].copy()
            else:
                multi.params[k] = single.params[k].copy()
        x = rng.normal(size=(5, 4))
        np.testing.assert_allclose(predict_proba(multi, x), predict_proba(single, x), rtol=0, atol=1e-15)


class TestLoss:
    def test_no_incentive_is_plain_xent(self, rng):
        net = small_net()
        bank = bank_for(net)
        x, y, d = rng.normal(size=(8, 4)), rng.integers(0, 3, 8), rng.integers(0, 3, 8)
        total, _, parts = loss_total(net, bank, x, y, d, rng=make_rng(2))
        masks = domain_masks(bank, d, "sampled", make_rng(2))
        expected = softmax_xent(forward(net, x, masks)[0], y)[0]
        assert total == expected == parts["class"]

    def test_identical_saturated_masks_penalty_is_one(self, rng):
        net = small_net(masked=[0])
        bank = MaskBank.saturated(["a", "b"], net.mask_specs())
        x, y = rng.normal(size=(4, 4)), rng.integers(0, 3, 4)
        total, _, parts = loss_total(net, bank, x, y, np.array([0, 1, 0, 1]), lambda_O=1.0, rng=make_rng(0))
        assert parts["siou"] == pytest.approx(1.0, abs=1e-8)
        assert total == pytest.approx(parts["class"] + 1.0, abs=1e-8)

    @pytest.mark.parametrize("lam_O,lam_S", [(0.0, 0.0), (0.7, 0.0), (0.0, 0.3)])
    def test_full_gradient_soft_relaxation(self, rng, lam_O, lam_S):
        net = small_net(seed=3)
        bank = bank_for(net, seed=4)
        x, y, d = rng.normal(size=(6, 4)), rng.integers(0, 3, 6), np.array([0, 1, 2, 0, 1, 2])

        def f():
            return loss_total(net, bank, x, y, d, lam_O, lam_S, mask_mode="soft")[0]

        _, grads, _ = loss_total(net, bank, x, y, d, lam_O, lam_S, mask_mode="soft")
        for name, p in net.params.items():
            np.testing.assert_allclose(grads[name], central_diff(f, p), rtol=1e-3, atol=1e-6, err_msg=name)
        for l, p in enumerate(bank.params):
            np.testing.assert_allclose(grads[f"mask{l}"], central_diff(f, p), rtol=1e-3, atol=1e-6)

    def test_multihead_gradient(self, rng):
        net = small_net(seed=5, masked=[], n_heads=2)
        x, y, h = rng.normal(size=(6, 4)), rng.integers(0, 3, 6), np.array([0, 1, 1, 0, 1, 0])

        def f():
            return loss_total(net, None, x, y, h, head=h)[0]

        _, grads, _ = loss_total(net, None, x, y, h, head=h)
        for name, p in net.params.items():
            np.testing.assert_allclose(grads[name], central_diff(f, p), rtol=1e-3, atol=1e-6, err_msg=name)

    def test_sum_reduction_scales_class_term(self, rng):
        net = small_net()
        x, y, d = rng.normal(size=(5, 4)), rng.integers(0, 3, 5), np.zeros(5, int)
        mean, gm, _ = loss_total(net, None, x, y, d)
        total, gs, _ = loss_total(net, None, x, y, d, class_reduction="sum")
        assert total == pytest.approx(5 * mean)
        np.testing.assert_allclose(gs["F0.W"], 5 * gm["F0.W"])

    def test_unknown_domain_tag(self, rng):
        net = small_net()
        with pytest.raises(KeyError):
            loss_total(net, bank_for(net), rng.normal(size=(2, 4)), [0, 1], [0, 7], rng=make_rng(0))

    def test_nonfinite_loss_names_component(self, rng):
        net = small_net()
        net.params["T1.W"][:] = np.nan
        with pytest.raises(FloatingPointError, match="class"):
            loss_total(net, None, rng.normal(size=(2, 4)), [0, 1], [0, 0])


class TestSelection:
    def test_examples(self):
        assert select_checkpoint([0.5, 0.9, 0.7]) == 2
        assert select_checkpoint([0.4, 0.4, 0.4]) == 1
        assert select_checkpoint([0.3]) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            select_checkpoint([])


class TestConfig:
    def test_both_incentives_rejected(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_O=0.1, lambda_S=0.1)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            TrainConfig(method="mldg")

    def test_from_dict_rejects_unknown(self):
        with pytest.raises(KeyError):
            TrainConfig.from_dict({"lambda_X": 1})


FAST = dict(epochs=3, hidden=(16,), task_hidden=(8, 8), lr0=1e-3, lr_schedule="constant")


class TestTrain:
    def test_deterministic(self, tiny_suite):
        cfg = TrainConfig(method="dmg", lambda_O=0.1, seed=4, **FAST)
        _, r1 = train(cfg, tiny_suite)
        _, r2 = train(cfg, tiny_suite)
        d1, d2 = r1.to_dict(), r2.to_dict()
        d1.pop("wall_time_s"), d2.pop("wall_time_s")
        assert d1 == d2

    def test_saturated_dmg_reproduces_aggregate(self, tiny_suite):
        agg = TrainConfig(method="aggregate", lambda_O=0.0, seed=2, **FAST)
        dmg = replace(agg, method="dmg", mask_init="saturated")
        ck_a, r_a = train(agg, tiny_suite)
        ck_d, r_d = train(dmg, tiny_suite)
        assert r_a.loss_class == r_d.loss_class
        assert r_a.val_mean == r_d.val_mean
        for k, v in ck_a.net.params.items():
            assert np.array_equal(v, ck_d.net.params[k]), k

    def test_multiheaded_has_one_head_per_source(self, tiny_suite):
        ck, rep = train(TrainConfig(method="multiheaded", lambda_O=0.0, **FAST), tiny_suite)
        assert ck.net.n_heads == 3 and ck.bank is None
        assert len(rep.val_mean) == 3

    def test_selected_epoch_maximizes_val(self, tiny_suite):
        ck, rep = train(TrainConfig(method="dmg", **FAST), tiny_suite)
        assert rep.selected_epoch == int(np.argmax(rep.val_mean)) + 1 == ck.epoch
        assert all(np.isfinite(rep.loss_class)) and all(np.isfinite(rep.loss_penalty))

    def test_dmg_needs_two_sources(self):
        suite = generate(SyntheticSpec(p=1, q=0, C=2, n=40, shared_dims=2, specific_dims=1))
        with pytest.raises(ValueError):
            train(TrainConfig(method="dmg", **FAST), suite)
        train(TrainConfig(method="aggregate", lambda_O=0.0, **FAST), suite)

    def test_weight_decay_changes_trajectory(self, tiny_suite):
        cfg = TrainConfig(method="aggregate", lambda_O=0.0, **FAST)
        _, a = train(cfg, tiny_suite)
        _, b = train(replace(cfg, weight_decay=0.5), tiny_suite)
        assert a.loss_class != b.loss_class

    def test_per_domain_batch_sampling_runs(self, tiny_suite):
        _, rep = train(TrainConfig(method="dmg", mask_sampling="per-domain-batch", balance_domains=True, **FAST),
                       tiny_suite)
        assert len(rep.loss_class) == 3
