import numpy as np
import pytest

from blockcnn.errors import CheckpointError, DimensionError, StateError, TrainingError
from blockcnn.model import AlignedDownsample, BlockCNN, ModelConfig, Variant
from blockcnn.nn import (
    Adam,
    ArchConfig,
    BatchNorm2d,
    Conv2d,
    LeakyReLU,
    ResidualBlock,
    Sequential,
    batchnorm,
    conv2d,
    leaky_relu,
    load_checkpoint,
    mse_loss,
    residual_block_apply,
    save_checkpoint,
)

from gradcheck import assert_grads, check_layer, full_model_grad_errors


def test_conv_forward_hand_value():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 3, 3))
    assert conv2d(x, w, np.array([1.0]))[0, 0, 0, 0] == 37
    padded = conv2d(x, w, np.zeros(1), pad=1)
    assert padded.shape == (1, 1, 3, 3) and padded[0, 0, 0, 0] == 0 + 1 + 3 + 4


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y = conv2d(x, w, b, stride=3)
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for o in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, o, i, j] = np.sum(x[n, :, 3 * i : 3 * i + 3, 3 * j : 3 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(DimensionError):
        conv2d(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_leaky_relu_values():
    np.testing.assert_allclose(leaky_relu(np.array([-1.0, 0.0, 2.0])), [-0.2, 0.0, 2.0])


def test_batchnorm_train_normalizes_and_tracks():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(8, 2, 4, 4))
    rm, rv = np.zeros(2), np.ones(2)
    y = batchnorm(x, np.ones(2), np.zeros(2), rm, rv, train=True)
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))


def test_batchnorm_eval_uses_running_stats():
    x = np.full((1, 1, 2, 2), 5.0)
    y = batchnorm(x, np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]), train=False)
    np.testing.assert_allclose(y, 2.0 * 4.0 / np.sqrt(4.0 + 1e-5) + 1.0)


def test_mse_loss_and_grad():
    loss, g = mse_loss(np.array([1.0, 3.0]), np.array([0.0, 0.0]))
    assert loss == 5.0
    np.testing.assert_allclose(g, [1.0, 3.0])
    with pytest.raises(DimensionError):
        mse_loss(np.zeros(2), np.zeros(3))


def test_conv_gradients():
    rng = np.random.default_rng(2)
    assert_grads(check_layer(Conv2d("c", 3, 4), rng.normal(size=(2, 3, 6, 6))))


def test_strided_conv_gradients():
    rng = np.random.default_rng(3)
    assert_grads(check_layer(Conv2d("c", 2, 3, kernel=3, stride=3, pad=0), rng.normal(size=(2, 2, 9, 9))))


@pytest.mark.parametrize("train", [True, False])
def test_batchnorm_gradients(train):
    rng = np.random.default_rng(4)
    assert_grads(check_layer(BatchNorm2d("bn", 3), rng.normal(1, 2, size=(4, 3, 3, 3)), train=train))


def test_leaky_relu_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 4, 4))
    x[np.abs(x) < 0.05] = 0.5  # keep away from the kink
    assert_grads(check_layer(LeakyReLU("a"), x))


def test_residual_block_gradients():
    rng = np.random.default_rng(6)
    assert_grads(check_layer(ResidualBlock("r", 3), rng.normal(size=(3, 3, 5, 5))))


def test_aligned_downsample_gradients():
    rng = np.random.default_rng(7)
    assert_grads(check_layer(AlignedDownsample("d", 2), rng.normal(size=(2, 2, 24, 24))))


@pytest.mark.parametrize("variant", [Variant.AR, Variant.PRED])
def test_full_model_gradients(variant):
    assert_grads(full_model_grad_errors(variant))


def test_adam_first_step_moves_by_lr():
    # with bias correction the first step is lr * sign(g) (up to eps)
    p = {"w": np.array([1.0, -2.0, 0.5])}
    opt = Adam(lr=0.01)
    opt.step(p, {"w": np.array([3.0, -0.1, 0.0])})
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 0.5], atol=1e-6)


def test_adam_weight_decay_enters_gradient():
    p = {"w": np.array([2.0])}
    Adam(lr=0.1, weight_decay=0.5).step(p, {"w": np.array([0.0])})
    np.testing.assert_allclose(p["w"], [1.9], atol=1e-6)


def test_adam_descends_quadratic():
    p = {"w": np.array([5.0, -3.0])}
    opt = Adam(lr=0.1)
    for _ in range(500):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.abs(p["w"]).max() < 0.05


def test_initialization_is_seeded():
    a = Sequential([Conv2d("c", 3, 4), ResidualBlock("r", 4)])
    b = Sequential([Conv2d("c", 3, 4), ResidualBlock("r", 4)])
    a.initialize(11)
    b.initialize(11)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    b.initialize(12)
    assert not np.array_equal(a.params["c.weight"], b.params["c.weight"])


def test_backward_before_forward():
    net = Sequential([Conv2d("c", 3, 4)])
    net.initialize(0)
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 4, 3, 3), dtype=np.float32))


def test_residual_block_functional_form():
    rng = np.random.default_rng(8)
    block = ResidualBlock("res", 4)
    params = {}
    block.init(params, rng)
    x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
    np.testing.assert_array_equal(residual_block_apply(x, params), block.forward(params, x, False, False))


def test_extreme_inputs_stay_finite():
    model = BlockCNN(ModelConfig(Variant.AR, channels=8, n_res_blocks=2))
    model.params["head.weight"][...] = 0.1
    for value in (-1.0, 1.0):
        out = model.forward(np.full((2, 3, 24, 24), value, dtype=np.float32), train=True)
        assert np.isfinite(out).all()
        assert np.isfinite(model.backward(np.ones_like(out))).all()


def test_nonfinite_forward_raises():
    net = Sequential([Conv2d("c", 3, 4)])
    net.initialize(0)
    x = np.zeros((1, 3, 3, 3), dtype=np.float32)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError):
        net.forward(x)


def test_checkpoint_roundtrip_bitwise():
    rng = np.random.default_rng(9)
    tensors = {"a.weight": rng.normal(size=(2, 3, 3, 3)).astype(np.float32), "b": np.arange(4, dtype=np.float32)}
    arch = ArchConfig(1, 0, 32, 2)
    data = save_checkpoint(tensors, arch)
    back_arch, back = load_checkpoint(data)
    assert back_arch == arch and list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == tensors[k].tobytes()
    assert save_checkpoint(back, back_arch) == data


def test_checkpoint_header_layout():
    data = save_checkpoint({}, ArchConfig(1, 0, 64, 9))
    assert data[:4] == b"BCKP"
    assert data[4:] == bytes([1, 1, 0]) + (64).to_bytes(4, "little") + (9).to_bytes(4, "little") + bytes(4)


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_checkpoint_truncation(cut):
    data = save_checkpoint({"x": np.ones((2, 2), dtype=np.float32)}, ArchConfig(0, 0, 8, 1))
    with pytest.raises(CheckpointError):
        load_checkpoint(data[:cut])


def test_checkpoint_bad_magic_and_trailing():
    data = save_checkpoint({"x": np.ones(2, dtype=np.float32)}, ArchConfig(0, 0, 8, 1))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(data + b"\0")


def test_model_checkpoint_architecture_mismatch():
    model = BlockCNN(ModelConfig(Variant.PRED, channels=8, n_res_blocks=2))
    data = model.to_bytes()
    with pytest.raises(CheckpointError):
        BlockCNN.from_bytes(data, expect=ModelConfig(Variant.PRED, channels=16, n_res_blocks=2))
    with pytest.raises(CheckpointError):
        BlockCNN.from_bytes(data, expect=ModelConfig(Variant.AR, channels=8, n_res_blocks=2))
    # header claims a different size than the tensors carry
    forged = data[:4] + bytes([1, 1, 0]) + (16).to_bytes(4, "little") + data[11:]
    with pytest.raises(CheckpointError):
        BlockCNN.from_bytes(forged)
