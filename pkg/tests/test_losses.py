import itertools

import numpy as np
import pytest

from app.models.errors import InvalidArgumentError, ShapeError
from app.models.schemas import LossWeights
from app.services.autodiff import ParamStore, backward, constant, grad_check
from app.services.losses import (adversarial_losses, assignment_cost, cd_loss, degrade_prediction, stack_batches,
                                 total_loss, wasserstein_loss)
from app.services.metrics import chamfer


def test_cd_loss_agrees_with_metric(rng):
    a, b = rng.normal(size=(12, 3)), rng.normal(size=(9, 3))
    assert cd_loss(constant(a), b).item() == pytest.approx(chamfer(a, b), rel=1e-12)


def test_cd_loss_averages_over_batch(rng):
    a, b = rng.normal(size=(2, 6, 3)), rng.normal(size=(2, 5, 3))
    expected = (chamfer(a[0], b[0]) + chamfer(a[1], b[1])) / 2.0
    assert cd_loss(constant(a), b).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ShapeError):
        cd_loss(constant(a), b[:1])


def test_cd_loss_gradient(rng):
    store = ParamStore()
    store.create("pred", rng.normal(size=(1, 6, 3)))
    target = rng.normal(size=(1, 7, 3))
    assert grad_check(lambda s: cd_loss(s["pred"], target), store).passed


def test_degrade_prediction_keeps_predicted_points(rng):
    completed = constant(rng.normal(size=(2, 16, 3)))
    templates = rng.normal(size=(2, 4, 3))
    degraded = degrade_prediction(completed, templates, k=2, out_size=4, rng=np.random.default_rng(0))
    assert degraded.shape == (2, 4, 3)
    for b in range(2):
        for point in degraded.values[b]:
            assert np.any(np.all(completed.values[b] == point, axis=1))


def brute_transport(fake, real):
    costs = np.sqrt(((fake[:, None, :] - real[None, :, :]) ** 2).sum(-1))
    n = fake.shape[0]
    return min(sum(costs[i, p[i]] for i in range(n)) / n for p in itertools.permutations(range(n)))


def test_assignment_cost_matches_enumeration(rng):
    for _ in range(5):
        fake, real = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        cost, cols = assignment_cost(fake, real)
        assert cost == pytest.approx(brute_transport(fake, real), rel=1e-12)
        assert sorted(cols.tolist()) == list(range(5))


def test_assignment_cost_rejects_mismatched_sets(rng):
    with pytest.raises(ShapeError):
        assignment_cost(rng.normal(size=(3, 4)), rng.normal(size=(4, 4)))


def test_wasserstein_loss_is_zero_for_permuted_copy(rng):
    store = ParamStore()
    real = rng.normal(size=(4, 6))
    store.create("z", real[[2, 0, 3, 1]])
    loss = wasserstein_loss(store["z"], real)
    assert loss.item() == 0.0
    backward(loss)
    assert np.all(store["z"].grad == 0.0)


def test_wasserstein_gradient(rng):
    store = ParamStore()
    store.create("z", rng.normal(size=(4, 6)))
    real = rng.normal(size=(4, 6))
    assert grad_check(lambda s: wasserstein_loss(s["z"], real), store).passed


def test_least_squares_adversarial_objectives():
    gen, disc = adversarial_losses(constant([1.0, 1.0]), constant([0.0, 0.0]))
    assert disc.item() == 0.0
    assert gen.item() == 0.5
    gen, disc = adversarial_losses(constant([0.0]), constant([1.0]))
    assert disc.item() == 1.0
    assert gen.item() == 0.0


def test_total_loss_weights():
    ones = {name: constant(1.0) for name in ("cd_ref", "cd_aux_ref", "cd_tar", "cd_aux_tar", "wasserstein")}
    assert total_loss(ones, LossWeights()).item() == pytest.approx(2.001, abs=1e-12)
    with_adv = dict(ones, adv_gen=constant(2.0))
    assert total_loss(with_adv, LossWeights(), adversarial=True).item() == pytest.approx(2.201, abs=1e-12)
    assert total_loss(with_adv, LossWeights()).item() == pytest.approx(2.001, abs=1e-12)
    assert total_loss({"adv_gen": constant(3.0)}, LossWeights(), adversarial=True).item() == pytest.approx(0.3)


def test_total_loss_rejects_unknown_terms():
    with pytest.raises(InvalidArgumentError):
        total_loss({"emd": constant(1.0)}, LossWeights())


def test_stack_batches_concatenates_along_batch_axis(rng):
    a, b = constant(rng.normal(size=(2, 6))), constant(rng.normal(size=(3, 6)))
    assert stack_batches(a, b).shape == (5, 6)
    assert stack_batches(a) is a
