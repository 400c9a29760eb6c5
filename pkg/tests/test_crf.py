import math

import numpy as np
import pytest

from crfrefine.config import CrfParams
from crfrefine.crf import (
    UnaryField, energy, mean_field_infer, refine_segmentation, unary_from_probabilities
)
from crfrefine.errors import GridTooLargeError, InvalidInputError, InvalidParameterError
from crfrefine.experiment import synth_fixture
from crfrefine.metrics import confusion, dice
from crfrefine.tensors import SliceImage, argmax_labels
from tests.utils.mocks import flat_image, mask, random_prob, two_label_prob

NO_PAIRWISE = CrfParams(w1=0.0, w2=0.0)


def softmax(logits):
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def assert_valid_distribution(q):
    assert np.all(q >= 0.0) and np.all(q <= 1.0)
    assert np.allclose(q.sum(axis=-1), 1.0, atol=1e-6)


def test_unary_examples():
    unary = unary_from_probabilities(two_label_prob([[0.0, math.exp(-1.0)]]))
    assert unary.u[0, 0, 0] == 0.0
    assert not math.copysign(1.0, float(unary.u[0, 0, 0])) < 0
    assert unary.u[0, 0, 1] == pytest.approx(18.4207, abs=1e-4)
    assert unary.u[0, 1, 1] == pytest.approx(1.0, abs=1e-6)


def test_unary_floor_range():
    prob = two_label_prob([[0.5]])
    for floor in (0.0, 1.0, -1e-3):
        with pytest.raises(InvalidParameterError, match="floor"):
            unary_from_probabilities(prob, floor)
    assert unary_from_probabilities(two_label_prob([[0.0]]), floor=0.5).u[0, 0, 1] == \
        pytest.approx(math.log(2.0), abs=1e-6)


def test_unary_field_validation():
    with pytest.raises(InvalidInputError):
        UnaryField(np.full((2, 2, 2), -1.0))
    with pytest.raises(InvalidInputError):
        UnaryField(np.zeros((2, 2)))


def test_energy_without_pairwise_is_unary_sum():
    rng = np.random.default_rng(0)
    unary = UnaryField(rng.uniform(0.0, 5.0, size=(3, 4, 2)))
    labels = mask(rng.integers(0, 2, size=(3, 4)))
    expected = sum(float(unary.u[y, x, labels.label[y, x]]) for y in range(3) for x in range(4))
    assert energy(labels, unary, flat_image(3, 4), NO_PAIRWISE) == pytest.approx(expected, rel=1e-12)


def test_energy_single_pixel():
    unary = UnaryField(np.array([[[0.25, 2.0]]]))
    assert energy(mask([[1]]), unary, flat_image(1, 1), CrfParams()) == pytest.approx(2.0)


def test_energy_two_pixels_one_bandwidth_apart():
    unary = UnaryField(np.array([[[0.5, 1.0], [2.0, 0.25]]]))
    params = CrfParams(w1=3.0, sigma_alpha=1.0, sigma_beta=26.0)
    u_sum = 0.5 + 0.25
    value = energy(mask([[0, 1]]), unary, flat_image(1, 2), params)
    assert value == pytest.approx(u_sum + 3.0 * math.exp(-0.5), rel=1e-6)
    assert value - u_sum == pytest.approx(1.81959, abs=1e-5)
    # equal labels pay no pairwise cost
    assert energy(mask([[0, 0]]), unary, flat_image(1, 2), params) == pytest.approx(2.5)


def test_energy_counts_each_pair_once():
    unary = UnaryField(np.zeros((1, 6, 2)))
    params = CrfParams(w1=1.0, sigma_alpha=5.0)
    value = energy(mask([[1, 0, 0, 0, 0, 0]]), unary, flat_image(1, 6), params)
    assert value == pytest.approx(sum(math.exp(-0.5 * (j / 5.0) ** 2) for j in range(1, 6)), rel=1e-6)


def test_energy_smoothness_kernel():
    unary = UnaryField(np.zeros((1, 2, 2)))
    params = CrfParams(w1=0.0, w2=2.0, sigma_gamma=2.0)
    image = SliceImage(np.array([[0.0, 255.0]]))
    assert energy(mask([[0, 1]]), unary, image, params) == pytest.approx(2.0 * math.exp(-0.125), rel=1e-6)


def test_energy_grid_cap():
    unary = UnaryField(np.zeros((65, 65, 2)))
    labels = mask(np.zeros((65, 65)))
    with pytest.raises(GridTooLargeError, match="4096"):
        energy(labels, unary, flat_image(65, 65), CrfParams())
    small = UnaryField(np.zeros((3, 3, 2)))
    with pytest.raises(GridTooLargeError):
        energy(mask(np.zeros((3, 3))), small, flat_image(3, 3), CrfParams(), max_pixels=8)


def test_energy_shape_mismatch():
    with pytest.raises(InvalidInputError, match="shape mismatch"):
        energy(mask([[0, 1]]), UnaryField(np.zeros((1, 3, 2))), flat_image(1, 2), CrfParams())


def test_zero_iterations_is_softmax_of_negative_unary():
    rng = np.random.default_rng(1)
    unary = unary_from_probabilities(random_prob(rng, 5, 6, labels=3))
    q = mean_field_infer(unary, flat_image(5, 6), CrfParams(iterations=0))
    assert np.allclose(q.prob, softmax(-unary.u.astype(np.float64)), atol=1e-7)


def test_zero_weights_leave_q_unchanged():
    rng = np.random.default_rng(2)
    unary = unary_from_probabilities(random_prob(rng, 6, 6))
    image = SliceImage(rng.uniform(0, 255, size=(6, 6)))
    start = mean_field_infer(unary, image, NO_PAIRWISE.model_copy(update={"iterations": 0}))
    after = mean_field_infer(unary, image, NO_PAIRWISE.model_copy(update={"iterations": 7}))
    assert np.array_equal(start.prob, after.prob)


@pytest.mark.parametrize("filter_mode", ["lattice", "brute_force"])
def test_uniform_unary_keeps_uniform_q(filter_mode):
    unary = UnaryField(np.full((4, 5, 2), math.log(2.0)))
    q = mean_field_infer(unary, flat_image(4, 5), CrfParams(w2=1.0), filter_mode)
    assert np.allclose(q.prob, 0.5, atol=1e-6)


def test_brute_force_and_lattice_agree_on_small_grid():
    rng = np.random.default_rng(3)
    lung = rng.uniform(0.3, 1.0, size=(3, 3))
    unary = unary_from_probabilities(two_label_prob(lung))
    image = flat_image(3, 3)
    exact = mean_field_infer(unary, image, CrfParams(), "brute_force")
    approx = mean_field_infer(unary, image, CrfParams(), "lattice")
    assert np.max(np.abs(exact.prob - approx.prob)) <= 0.05


def test_monitor_sees_every_iterate():
    rng = np.random.default_rng(4)
    unary = unary_from_probabilities(random_prob(rng, 8, 8, labels=3))
    seen = []

    def monitor(iteration, q):
        assert q.shape == (8, 8, 3)
        assert_valid_distribution(q)
        with pytest.raises(ValueError):
            q[0, 0, 0] = 0.0
        seen.append(iteration)

    mean_field_infer(unary, SliceImage(rng.uniform(0, 255, (8, 8))), CrfParams(iterations=4),
                     monitor=monitor)
    assert seen == [0, 1, 2, 3, 4]


def test_early_stop():
    rng = np.random.default_rng(5)
    unary = unary_from_probabilities(random_prob(rng, 6, 6))
    seen = []
    mean_field_infer(unary, flat_image(6, 6), CrfParams(iterations=10),
                     monitor=lambda i, q: seen.append(i), early_stop_tol=1.0)
    assert seen == [0, 1]


def test_label_permutation_equivariance():
    rng = np.random.default_rng(6)
    unary = unary_from_probabilities(random_prob(rng, 6, 7, labels=3))
    image = SliceImage(rng.uniform(0, 255, (6, 7)))
    order = [2, 0, 1]
    q = mean_field_infer(unary, image, CrfParams(w2=1.0), "brute_force")
    permuted = mean_field_infer(UnaryField(unary.u[:, :, order]), image, CrfParams(w2=1.0), "brute_force")
    assert np.allclose(permuted.prob, q.prob[:, :, order], atol=1e-6)


def test_large_unaries_dominate():
    rng = np.random.default_rng(7)
    lung = rng.uniform(0.05, 0.35, size=(8, 8))
    lung = np.where(rng.uniform(size=(8, 8)) < 0.5, lung, 1.0 - lung)
    unary = unary_from_probabilities(two_label_prob(lung))
    strong = UnaryField(unary.u * 1000.0)
    q = mean_field_infer(strong, flat_image(8, 8), CrfParams(), "brute_force")
    assert np.array_equal(np.argmax(q.prob, axis=2), np.argmin(strong.u, axis=2))


def test_unknown_filter_mode():
    unary = UnaryField(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidParameterError, match="filter mode"):
        mean_field_infer(unary, flat_image(2, 2), CrfParams(), "fft")


def test_refine_without_iterations_is_argmax():
    rng = np.random.default_rng(8)
    prob = random_prob(rng, 9, 9, labels=3)
    refined = refine_segmentation(prob, SliceImage(rng.uniform(0, 255, (9, 9))), CrfParams(iterations=0))
    assert refined == argmax_labels(prob)


def test_refine_keeps_confident_predictions():
    fixture = synth_fixture(seed=5, index=0, height=32, width=32, noise_level=0.0)
    prob = two_label_prob(np.where(fixture.truth.label == 1, 0.995, 0.005))
    assert refine_segmentation(prob, fixture.image, CrfParams()) == fixture.truth


def test_refine_repairs_flip_noise():
    fixture = synth_fixture(seed=9, index=0, height=32, width=32, noise_level=0.05)
    raw = dice(confusion(argmax_labels(fixture.prob), fixture.truth))
    refined = dice(confusion(refine_segmentation(fixture.prob, fixture.image, CrfParams()), fixture.truth))
    assert refined >= raw


def test_refine_shape_mismatch():
    with pytest.raises(InvalidInputError, match="refine"):
        refine_segmentation(two_label_prob(np.full((3, 3), 0.5)), flat_image(3, 4), CrfParams())
