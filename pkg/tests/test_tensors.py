import math

import numpy as np
import pytest

from crfrefine.errors import InvalidInputError
from crfrefine.tensors import (
    DenseTensor, LabelMask, ProbabilityMap, SliceImage, argmax_labels,
    rescale_to_byte_range, softmax_normalize
)
from tests.utils.mocks import mask


def test_softmax_symmetric_scores():
    prob = softmax_normalize(np.zeros((1, 1, 2)))
    assert prob.prob[0, 0].tolist() == [0.5, 0.5]


def test_softmax_ln2():
    prob = softmax_normalize(np.array([[[math.log(2.0), 0.0]]]))
    assert prob.prob[0, 0, 0] == pytest.approx(2 / 3, abs=1e-6)
    assert prob.prob[0, 0, 1] == pytest.approx(1 / 3, abs=1e-6)


def test_softmax_random_field_sums_to_one():
    scores = np.random.default_rng(0).normal(scale=5.0, size=(4, 4, 3))
    prob = softmax_normalize(scores)
    assert np.allclose(prob.prob.sum(axis=2, dtype=np.float64), 1.0, atol=1e-6)


def test_softmax_invariant_to_per_pixel_shift():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(5, 3, 4))
    shifted = scores + rng.normal(scale=100.0, size=(5, 3, 1))
    assert np.allclose(softmax_normalize(scores).prob, softmax_normalize(shifted).prob, atol=1e-6)


def test_softmax_rejects_non_finite():
    scores = np.zeros((2, 2, 2))
    scores[1, 1, 0] = np.nan
    with pytest.raises(InvalidInputError, match="finite"):
        softmax_normalize(scores)


@pytest.mark.parametrize("pixel, expected", [
    ([0.9, 0.1], 0),
    ([0.5, 0.5], 0),
    ([0.2, 0.5, 0.3], 1),
])
def test_argmax_labels(pixel, expected):
    label = argmax_labels(ProbabilityMap(np.array([[pixel]])))
    assert label.label[0, 0] == expected
    assert label.n_labels == len(pixel)


def test_rescale_constant_field():
    assert rescale_to_byte_range(np.full((3, 3), 7.0)).tolist() == [[0] * 3] * 3


def test_rescale_endpoints_and_midpoint():
    assert rescale_to_byte_range(np.array([0.0, 1.0])).tolist() == [0, 255]
    assert rescale_to_byte_range(np.array([0.0, 0.5, 1.0])).tolist() == [0, 128, 255]


def test_rescale_is_affine_in_range():
    out = rescale_to_byte_range(np.array([[-2.0, 3.0], [0.5, 8.0]]))
    assert out.dtype == np.uint8
    assert out.tolist() == [[0, 128], [64, 255]]


def test_probability_map_rejects_bad_sums():
    with pytest.raises(InvalidInputError, match="sum"):
        ProbabilityMap(np.array([[[0.6, 0.6]]]))


def test_probability_map_rejects_out_of_range():
    with pytest.raises(InvalidInputError, match=r"\[0, 1\]"):
        ProbabilityMap(np.array([[[1.5, -0.5]]]))


def test_probability_map_needs_two_labels():
    with pytest.raises(InvalidInputError):
        ProbabilityMap(np.ones((2, 2, 1)))


def test_probability_map_load_renormalizes():
    raw = np.array([[[0.3, 0.700004]]], dtype=np.float32)
    prob = ProbabilityMap.load(raw)
    assert abs(float(prob.prob.sum(dtype=np.float64)) - 1.0) < 1e-6
    assert prob.prob.dtype == np.float32
    assert prob.shape == (1, 1)
    assert prob.labels == 2


def test_probability_map_is_read_only():
    prob = ProbabilityMap(np.full((2, 2, 2), 0.5))
    with pytest.raises(ValueError):
        prob.prob[0, 0, 0] = 1.0


def test_slice_image_validation():
    with pytest.raises(InvalidInputError, match="2D"):
        SliceImage(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidInputError, match="finite"):
        SliceImage(np.array([[0.0, np.inf]]))
    image = SliceImage(np.zeros((3, 5)))
    assert (image.height, image.width) == (3, 5)
    assert image.intensity.dtype == np.float32


def test_label_mask_validation_and_equality():
    with pytest.raises(InvalidInputError, match="< 2"):
        mask([[0, 2]])
    with pytest.raises(InvalidInputError):
        LabelMask(np.zeros((2, 2)), n_labels=1)
    assert mask([[0, 1]]) == mask([[0, 1]])
    assert mask([[0, 1]]) != mask([[1, 0]])
    assert mask([[0, 1]]) != mask([[0, 1]], n_labels=3)


def test_dense_tensor_validation():
    with pytest.raises(InvalidInputError, match="does not match"):
        DenseTensor(dims=(2, 3), data=np.zeros(5, dtype=np.uint8))
    with pytest.raises(InvalidInputError, match="unsupported"):
        DenseTensor(dims=(2,), data=np.zeros(2, dtype=np.float64))
    with pytest.raises(InvalidInputError):
        DenseTensor(dims=(0,), data=np.zeros(0, dtype=np.uint8))


def test_dense_tensor_bitwise_equality():
    a = DenseTensor.from_array(np.array([[0.0, 1.5]], dtype=np.float32))
    b = DenseTensor(dims=(1, 2), data=np.array([0.0, 1.5], dtype=np.float32))
    negative_zero = DenseTensor.from_array(np.array([[-0.0, 1.5]], dtype=np.float32))
    assert a == b
    assert a != negative_zero
    assert a.to_array().shape == (1, 2)
    assert a != DenseTensor.from_array(np.array([0.0, 1.5], dtype=np.float32))


def test_rescale_spans_the_full_double_range():
    with np.errstate(all="raise"):
        out = rescale_to_byte_range(np.array([-1e308, 0.0, 1e308]))
    assert out.tolist() == [0, 128, 255]


def test_rescale_rejects_non_finite_field():
    with pytest.raises(InvalidInputError, match="field must be finite"):
        rescale_to_byte_range(np.array([0.0, np.inf]))
