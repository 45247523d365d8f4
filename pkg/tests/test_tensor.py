import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adavit import tensor as T
from adavit.checks import op_cases
from adavit.gradcheck import gradcheck
from adavit.tensor import Tensor, ShapeError


def rand(rng, *shape, grad=True):
    return Tensor(rng.uniform(-2, 2, size=shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity(rng):
    X = rng.standard_normal((2, 3))
    out = T.matmul(T.tensor(np.eye(2)), T.tensor(X))
    np.testing.assert_array_equal(out.data, X)


def test_matmul_hand_arithmetic():
    out = T.tensor([[1.0, 2.0]]) @ T.tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((3, 4)), T.zeros((3, 2)))


def test_matmul_gradcheck_elementwise(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    res = gradcheck(T.matmul, [a, b], n_dirs=2, elementwise_limit=64)
    assert res.max_rel_err < 1e-6


def test_batched_matmul_shared_rhs(rng):
    a, b = rand(rng, 2, 3, 4), rand(rng, 4, 5)
    assert gradcheck(T.matmul, [a, b]).max_rel_err < 1e-6


# -- softmax ----------------------------------------------------------------

def test_softmax_uniform():
    out = T.softmax(T.tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_large_inputs_are_stable():
    out = T.softmax(T.tensor([1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_against_high_precision():
    mpmath.mp.dps = 50
    ex = [mpmath.e ** k for k in (1, 2, 3)]
    expected = [float(e / sum(ex)) for e in ex]
    out = T.softmax(T.tensor([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out.data, expected, rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(T.tensor(x), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


# -- layer norm ---------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 16), elements=st.floats(-100, 100)))
def test_layer_norm_standardises(x):
    if np.any(x.std(axis=-1) < 1e-2):
        return
    out = T.layer_norm(T.tensor(x), None, None, eps=0.0).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-9)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-6)


# -- conv and pooling ---------------------------------------------------------

def test_conv3d_averaging_kernel(rng):
    vol = rng.uniform(0, 1, (1, 8, 8, 8))
    W = np.full((1, 1, 8, 8, 8), 1 / 512)
    out = T.conv3d(T.tensor(vol), T.tensor(W), T.zeros(1), stride=8)
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == pytest.approx(vol.mean(), abs=1e-14)


def test_conv3d_patch_path_matches_general_path(rng):
    x = rand(rng, 2, 8, 4, 4, grad=False)
    W = rand(rng, 3, 2, 2, 2, 2, grad=False)
    fast = T.conv3d(x, W, stride=2).data
    slow = T._offset_conv(x, W, 2, 0, (4, 2, 2)).data
    np.testing.assert_allclose(fast, slow, atol=1e-13)


def test_conv3d_indivisible_extent():
    with pytest.raises(ShapeError):
        T.conv3d(T.zeros((1, 10, 8, 8)), T.zeros((4, 1, 8, 8, 8)), stride=8)


def test_transposed_conv_requires_kernel_equal_stride():
    with pytest.raises(ShapeError):
        T.transposed_conv3d(T.zeros((2, 2, 2, 2)), T.zeros((2, 3, 3, 3, 3)), stride=2)


def test_max_over_axis_elementwise():
    out = T.max_over_axis(T.tensor([[1.0, 5.0], [3.0, 2.0]]), axis=0)
    assert out.data.tolist() == [3.0, 5.0]


def test_max_tie_routes_to_lowest_index():
    x = T.tensor([[2.0, 1.0], [2.0, 4.0]], requires_grad=True)
    T.max_over_axis(x, axis=0).sum().backward()
    assert x.grad.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_segment_max_tie_routes_to_lowest_row():
    x = T.tensor([[1.0], [3.0], [3.0], [0.0]], requires_grad=True)
    out = T.segment_reduce(x, [1, 0, 0, 1], 2, "max")
    assert out.data.ravel().tolist() == [3.0, 1.0]
    out.sum().backward()
    assert x.grad.ravel().tolist() == [1.0, 1.0, 0.0, 0.0]


def test_segment_reduce_requires_coverage():
    with pytest.raises(ShapeError):
        T.segment_reduce(T.zeros((2, 3)), [0, 0], 2, "max")


# -- finite-difference checks for every differentiable op --------------------

@pytest.mark.parametrize("name", list(op_cases()))
def test_op_gradcheck(name):
    fn, inputs = op_cases()[name]
    res = gradcheck(fn, inputs, name=name, elementwise_limit=40)
    assert res.max_rel_err < 1e-5, (name, res.max_rel_err)


# -- determinism, dtype and serialisation ------------------------------------

def test_forward_is_bitwise_deterministic(rng):
    x = rand(rng, 2, 8, 8, 8, grad=False)
    W = rand(rng, 4, 2, 3, 3, 3, grad=False)
    a = T.conv3d(x, W, stride=1, padding=1).data
    b = T.conv3d(x, W, stride=1, padding=1).data
    assert a.tobytes() == b.tobytes()


def test_float32_storage_is_preserved(rng):
    x = Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    y = T.gelu(T.layer_norm(x, None, None))
    assert y.dtype == np.float32
    y.sum().backward()
    assert x.grad.dtype == np.float32


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_tensor_blob_roundtrip(rng, dtype):
    arr = rng.standard_normal((2, 3, 4)).astype(dtype)
    blob = T.tensor_to_bytes(arr)
    assert blob[:6] == b"ATNSR1"
    back, end = T.tensor_from_bytes(blob)
    assert end == len(blob)
    assert back.dtype == dtype and back.tobytes() == arr.tobytes()


def test_suffix_broadcast_only():
    with pytest.raises(ShapeError):
        T.add(T.zeros((4, 5)), T.zeros(4))


def test_no_grad_records_nothing(rng):
    x = rand(rng, 3)
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_param_store_order_and_duplicates():
    store = T.ParamStore()
    for n in ["b", "a", "c"]:
        store.add(n, np.zeros(2))
    assert store.names() == ["b", "a", "c"]
    with pytest.raises(KeyError):
        store.add("a", np.zeros(2))
