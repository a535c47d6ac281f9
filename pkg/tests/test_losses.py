import math

import numpy as np
import pytest
import torch

from selpda.data import Batch, Domain
from selpda.errors import ContractError, TrainingError
from selpda.losses import (
    LossReport,
    LossWeights,
    adversarial_terms,
    l_adv,
    l_class,
    l_diff,
    l_ent,
    l_recon,
    l_sim,
    objective,
    prediction_entropy,
    sim_per_sample,
    total_loss,
    weighted_nll,
)

T = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))  # noqa: E731


def _batches(task, n=6):
    source, target, _ = task
    return (Batch(source.images[:n], source.labels[:n], Domain.SOURCE),
            Batch(target.images[:n], None, Domain.TARGET))


class TestSim:
    def test_identity(self):
        x = T(np.random.default_rng(0).normal(size=(3, 2, 4, 4)))
        assert float(l_sim(x, x)) == 0.0
        assert float(l_sim(x, x, "dsn")) == 0.0

    def test_worked_example(self):
        # (1/2)(1 + 4) + (1/4)(1 + 2)^2
        assert float(l_sim(T([[1.0, 2.0]]), T([[0.0, 0.0]]))) == pytest.approx(4.75, abs=1e-9)

    @pytest.mark.parametrize("variant, expected", [("printed", 2 * 0.5**2), ("dsn", 0.0)])
    def test_constant_shift(self, variant, expected):
        x = T(np.random.default_rng(1).uniform(size=(2, 3, 4, 4)))
        assert float(l_sim(x, x + 0.5, variant)) == pytest.approx(expected, abs=1e-9)

    @pytest.mark.parametrize("variant", ["printed", "dsn"])
    def test_nonnegative(self, variant):
        rng = np.random.default_rng(2)
        for _ in range(200):
            x, y = T(rng.normal(size=(4, 7))), T(rng.normal(size=(4, 7)) * rng.uniform(0, 5))
            assert torch.all(sim_per_sample(x, y, variant) >= -1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            l_sim(T(np.zeros((2, 3))), T(np.zeros((2, 4))))

    def test_unknown_variant(self):
        with pytest.raises(ContractError):
            l_sim(T(np.zeros((1, 3))), T(np.zeros((1, 3))), "l2")


class TestRecon:
    def test_zero_weights_leave_target_term(self, tiny_bundle, tiny_task):
        src, tgt = _batches(tiny_task)
        zero = l_recon(tiny_bundle, src, tgt, np.zeros(6))
        target_only = sim_per_sample(tiny_bundle.reconstruct(T(tgt.images), "target"), T(tgt.images)).mean()
        assert float(zero.detach()) == pytest.approx(float(target_only.detach()), abs=1e-12)

    def test_unit_weights_equal_unweighted(self, tiny_bundle, tiny_task):
        src, tgt = _batches(tiny_task)
        xs, xt = T(src.images), T(tgt.images)
        plain = (sim_per_sample(tiny_bundle.reconstruct(xs, "source"), xs).mean()
                 + sim_per_sample(tiny_bundle.reconstruct(xt, "target"), xt).mean())
        assert float(l_recon(tiny_bundle, src, tgt, np.ones(6)).detach()) == pytest.approx(float(plain.detach()), abs=1e-12)

    def test_perfect_decoders(self, tiny_bundle, tiny_task):
        src, tgt = _batches(tiny_task)
        tiny_bundle.reconstruct = lambda x, domain: x
        assert float(l_recon(tiny_bundle, src, tgt, np.ones(6))) == 0.0

    def test_missing_labels(self, tiny_bundle, tiny_task):
        _, tgt = _batches(tiny_task)
        with pytest.raises(ContractError):
            l_recon(tiny_bundle, tgt, tgt, np.ones(6))


class TestClass:
    def test_one_hot_is_zero(self):
        probs = T(np.eye(4)[[0, 2, 3]])
        labels = torch.tensor([0, 2, 3])
        assert float(weighted_nll(probs, labels, T(np.ones(3)))) == 0.0

    def test_uniform_is_log_c(self, tiny_bundle, tiny_task):
        with torch.no_grad():
            tiny_bundle.label_classifier.fc.weight.zero_()
            tiny_bundle.label_classifier.fc.bias.zero_()
        src, _ = _batches(tiny_task)
        assert float(l_class(tiny_bundle, src, np.ones(6))) == pytest.approx(math.log(6), abs=1e-9)
        assert math.log(6) == pytest.approx(1.7918, abs=1e-4)

    def test_zero_weight_sample(self):
        logits = T(np.random.default_rng(3).normal(size=(3, 4))).requires_grad_()
        labels = torch.tensor([0, 1, 1])
        w = T([1.0, 0.0, 0.0])
        loss = weighted_nll(torch.softmax(logits, 1), labels, w, reduction="sum")
        loss.backward()
        assert torch.all(logits.grad[1:] == 0)
        assert torch.any(logits.grad[0] != 0)

    def test_label_out_of_range(self, tiny_bundle, tiny_task):
        src, _ = _batches(tiny_task)
        with pytest.raises(ContractError):
            l_class(tiny_bundle, src, np.ones(3))


class TestAdv:
    def test_constant_half(self, tiny_bundle, tiny_task):
        last = tiny_bundle.domain_classifier.net[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.zero_()
        src, tgt = _batches(tiny_task)
        assert float(l_adv(tiny_bundle, src, tgt, np.ones(6))) == pytest.approx(2 * math.log(2), abs=1e-6)

    def test_zero_source_weights(self, tiny_bundle, tiny_task):
        src, tgt = _batches(tiny_task)
        xt = T(tgt.images)
        d_t = tiny_bundle.discriminate(tiny_bundle.content(xt))
        expected = -torch.log(1 - d_t).mean()
        assert float(l_adv(tiny_bundle, src, tgt, np.zeros(6))) == pytest.approx(float(expected), abs=1e-12)

    def test_saturated_discriminator_is_clamped(self):
        eps = 1e-7
        value = adversarial_terms(T([1.0, 1.0]), T([0.0, 0.0]), T([1.0, 1.0]), eps)
        assert float(value) == pytest.approx(-2 * math.log(1 - eps), rel=1e-9)
        assert math.isfinite(float(adversarial_terms(T([0.0]), T([1.0]), T([1.0]), eps)))

    def test_swap_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            d_s, d_t = T(rng.uniform(0.01, 0.99, 5)), T(rng.uniform(0.01, 0.99, 5))
            ones = T(np.ones(5))
            a = adversarial_terms(d_s, d_t, ones)
            b = adversarial_terms(1 - d_t, 1 - d_s, ones)
            assert float(a) == pytest.approx(float(b), abs=1e-9)

    def test_strict_mode_literal_term(self):
        d_s, d_t = T([0.6]), T([0.3])
        strict = adversarial_terms(d_s, d_t, T([1.0]), strict=True)
        assert float(strict) == pytest.approx(-math.log(0.6) - (1 - math.log(0.3)), abs=1e-12)


class TestEnt:
    def test_one_hot_zero(self):
        assert float(prediction_entropy(T(np.eye(5)))) == 0.0

    def test_uniform_log_c(self):
        assert float(prediction_entropy(T(np.full((3, 6), 1 / 6)))) == pytest.approx(math.log(6), abs=1e-12)

    def test_bounds_and_strict_max(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            p = rng.dirichlet(np.ones(6) * rng.uniform(0.05, 5), size=4)
            h = prediction_entropy(T(p), reduction="sum") / 4
            assert 0 <= float(h) < math.log(6)

    def test_bundle_level(self, tiny_bundle, tiny_task):
        _, tgt = _batches(tiny_task)
        assert 0 <= float(l_ent(tiny_bundle, tgt)) <= math.log(6)


class TestDiff:
    def test_orthogonal(self):
        c = T([[1, 0], [-1, 0], [1, 0], [-1, 0]])
        s = T([[0, 1], [0, 1], [0, -1], [0, -1]])
        assert float(l_diff(c, s)) == pytest.approx(0.0, abs=1e-15)

    def test_identical_positive(self):
        h = T(np.random.default_rng(6).normal(size=(5, 3)))
        assert float(l_diff(h, h)) > 0

    def test_single_sample(self):
        assert float(l_diff(T([[1.0, 0.0]]), T([[0.0, 1.0]]))) == 0.0


class TestTotal:
    def test_lambda_zero(self):
        _, report = total_loss(3.0, 1.0, 0.7, 0.2, LossWeights(lambda_recon=0.0))
        assert report.total == pytest.approx(1.9, abs=1e-12)

    def test_arithmetic(self):
        _, report = total_loss(2.0, 1.0, 1.0, 0.5, LossWeights(1e-4))
        assert report.total == pytest.approx(2.5002, abs=1e-12)
        assert report.to_dict()["class"] == 1.0

    def test_diff_enabled(self):
        _, report = total_loss(2.0, 1.0, 1.0, 0.5, LossWeights(1e-4, lambda_diff=0.1), diff=3.0)
        assert report.total == pytest.approx(2.8002, abs=1e-12)

    @pytest.mark.parametrize("term", ["recon", "class", "adv", "ent"])
    def test_nan_raises(self, term):
        values = {"recon": 1.0, "class_": 1.0, "adv": 1.0, "ent": 1.0}
        values["class_" if term == "class" else term] = float("nan")
        with pytest.raises(TrainingError, match=term):
            total_loss(values["recon"], values["class_"], values["adv"], values["ent"], LossWeights())

    def test_weights_validation(self):
        with pytest.raises(ContractError):
            LossWeights(lambda_recon=-1)
        with pytest.raises(ContractError):
            LossWeights(epsilon_log=0.01)

    def test_report_roundtrip(self):
        r = LossReport(1, 2, 3, 4, 0, 10)
        assert LossReport.from_dict(r.to_dict()) == r


def test_objective_matches_individual_terms(tiny_bundle, tiny_task):
    src, tgt = _batches(tiny_task)
    w = np.array([1, 0, 1, 1, 0, 1.0])
    weights = LossWeights(lambda_recon=0.3)
    _, report = objective(tiny_bundle, src, tgt, w, 0.5, weights)
    assert report.recon == pytest.approx(float(l_recon(tiny_bundle, src, tgt, w)), abs=1e-12)
    assert report.class_ == pytest.approx(float(l_class(tiny_bundle, src, w)), abs=1e-12)
    assert report.adv == pytest.approx(float(l_adv(tiny_bundle, src, tgt, w, 0.5)), abs=1e-12)
    assert report.ent == pytest.approx(float(l_ent(tiny_bundle, tgt)), abs=1e-12)
    assert report.total == pytest.approx(0.3 * report.recon + report.class_ + report.adv + report.ent, abs=1e-9)
