import numpy as np
import pytest

from app.core.errors import EmptyMask, FormatError, MissingAsset, NoTrainingData, ShapeMismatch
from app.models.network import ArchitectureConfig, LayerSpec, NetworkParams, TrainConfig
from app.models.stack import FlowerStackBatch, SparseDepthMap
from app.services.depth_network import layers
from app.services.depth_network.network import (
    backward,
    build_network,
    build_specs,
    forward,
    init_params,
    masked_mse,
    masked_mse_grad,
)
from app.services.depth_network.optimizer import TRAINABLE, adam_step, init_adam
from app.services.depth_network.trainer import DepthNetworkTrainer, predict_sparse, train, write_loss_history
from app.services.depth_network.weights import load_weights, save_weights

STEP = 1e-6

TINY_ARCH = ArchitectureConfig(
    in_channels=21, patch_size=23, encoder_channels=[4, 4], encoder_strides=[2, 2], mlp_features=[8]
)


def close_enough(numeric: float, analytic: float) -> bool:
    scale = max(abs(numeric) + abs(analytic), 1e-5)
    return abs(numeric - analytic) <= 1e-4 * scale


def network_loss(params, x, gt, mask) -> float:
    out, _ = forward(params, x, mode="train")
    return masked_mse(out, gt, mask)


def check_parameter_gradients(params: NetworkParams, x: np.ndarray, samples_per_array: int = 0, seed: int = 0):
    """Compare analytic parameter gradients with central differences."""
    rng = np.random.default_rng(seed)
    out, caches = forward(params, x, mode="train")
    gt = rng.normal(size=out.shape)
    mask = (rng.random(out.shape) < 0.5).astype(np.float64)
    mask.flat[0] = 1.0
    grads = backward(params, caches, masked_mse_grad(out, gt, mask))

    checked = 0
    for layer, layer_grads in zip(params.arrays, grads):
        for name in TRAINABLE:
            if name not in layer:
                continue
            arr = layer[name]
            indices = list(np.ndindex(arr.shape))
            if samples_per_array and len(indices) > samples_per_array:
                picks = rng.choice(len(indices), samples_per_array, replace=False)
                indices = [indices[i] for i in picks]
            for idx in indices:
                old = arr[idx]
                arr[idx] = old + STEP
                plus = network_loss(params, x, gt, mask)
                arr[idx] = old - STEP
                minus = network_loss(params, x, gt, mask)
                arr[idx] = old
                numeric = (plus - minus) / (2 * STEP)
                assert close_enough(numeric, layer_grads[name][idx]), (name, idx, numeric, layer_grads[name][idx])
                checked += 1
    assert checked > 0


def check_input_gradient(forward_fn, backward_fn, x: np.ndarray, seed: int = 0):
    """Compare the analytic input gradient of a layer with central differences."""
    rng = np.random.default_rng(seed)
    out, cache = forward_fn(x)
    weights = rng.normal(size=out.shape)
    dx, _ = backward_fn(weights, cache)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + STEP
        plus = float(np.sum(forward_fn(x)[0] * weights))
        x[idx] = old - STEP
        minus = float(np.sum(forward_fn(x)[0] * weights))
        x[idx] = old
        assert close_enough((plus - minus) / (2 * STEP), dx[idx])


def single_layer(spec: LayerSpec, seed: int = 0) -> NetworkParams:
    return init_params([spec], seed=seed, dtype=np.float64)


def test_conv_gradients():
    """Test strided convolution gradients."""
    spec = LayerSpec(kind="conv", stride=2, padding=1, in_channels=3, out_channels=2)
    params = single_layer(spec)
    x = np.random.default_rng(1).normal(size=(2, 3, 7, 7))
    check_parameter_gradients(params, x)

    w, b = params.arrays[0]["weight"], params.arrays[0]["bias"]
    check_input_gradient(lambda v: layers.conv_forward(v, w, b, 2, 1), layers.conv_backward, x)


def test_transposed_conv_gradients():
    """Test transposed convolution gradients with output padding."""
    spec = LayerSpec(kind="transposedconv", stride=2, padding=1, output_padding=1, in_channels=2, out_channels=3)
    params = single_layer(spec)
    x = np.random.default_rng(2).normal(size=(2, 2, 4, 4))
    out, _ = forward(params, x)
    assert out.shape == (2, 3, 8, 8)
    check_parameter_gradients(params, x)

    w, b = params.arrays[0]["weight"], params.arrays[0]["bias"]
    check_input_gradient(
        lambda v: layers.transposed_conv_forward(v, w, b, 2, 1, 1), layers.transposed_conv_backward, x
    )


def test_batchnorm_gradients():
    """Test train-mode batch normalization gradients."""
    params = single_layer(LayerSpec(kind="batchnorm", in_channels=3, out_channels=3))
    params.arrays[0]["gamma"][:] = [0.5, 1.5, -1.0]
    params.arrays[0]["beta"][:] = [0.1, -0.2, 0.3]
    x = np.random.default_rng(3).normal(size=(4, 3, 5, 5))
    check_parameter_gradients(params, x)

    layer = params.arrays[0]

    def bn(v):
        return layers.batchnorm_forward(
            v, layer["gamma"], layer["beta"], layer["running_mean"].copy(), layer["running_var"].copy(), True
        )

    check_input_gradient(bn, layers.batchnorm_backward, x)


def test_fully_connected_gradients():
    """Test fully connected gradients with an unflattened output."""
    spec = LayerSpec(kind="fullyconnected", in_features=48, out_features=18, out_shape=(2, 3, 3))
    params = single_layer(spec)
    x = np.random.default_rng(4).normal(size=(3, 3, 4, 4))
    out, _ = forward(params, x)
    assert out.shape == (3, 2, 3, 3)
    check_parameter_gradients(params, x)

    w, b = params.arrays[0]["weight"], params.arrays[0]["bias"]
    check_input_gradient(lambda v: layers.fc_forward(v, w, b, (2, 3, 3)), layers.fc_backward, x)


def test_composed_network_gradients():
    """Test end-to-end gradients of a small encoder, bottleneck and decoder."""
    arch = ArchitectureConfig(in_channels=3, patch_size=7, encoder_channels=[2, 3], encoder_strides=[2, 1], mlp_features=[4])
    params = init_params(build_specs(arch), seed=5, dtype=np.float64)
    x = np.random.default_rng(6).normal(size=(2, 3, 7, 7))
    out, _ = forward(params, x)
    assert out.shape == (2, 1, 7, 7)
    check_parameter_gradients(params, x, samples_per_array=6, seed=7)


def test_relu_blocks_negative_inputs():
    """Test that ReLU passes no gradient to negative pre-activations."""
    x = -np.random.default_rng(8).random((2, 3, 4, 4)) - 0.1
    out, cache = layers.relu_forward(x)
    assert np.all(out == 0)
    dx, _ = layers.relu_backward(np.ones_like(x), cache)
    assert np.all(dx == 0)


def test_one_by_one_conv_sums_channels():
    """Test that an all-ones 1x1 kernel sums the input channels."""
    x = np.random.default_rng(9).random((2, 3, 5, 5))
    out, _ = layers.conv_forward(x, np.ones((1, 3, 1, 1)), np.zeros(1), stride=1, padding=0)
    np.testing.assert_allclose(out, x.sum(axis=1, keepdims=True), rtol=1e-12)


def test_zero_loss_gives_zero_gradients():
    """Test that a perfect prediction yields zero parameter gradients."""
    params = init_params(build_specs(TINY_ARCH), seed=0, dtype=np.float64)
    x = np.random.default_rng(10).random((2, 21, 23, 23))
    out, caches = forward(params, x, mode="train")
    mask = np.ones_like(out)
    grads = backward(params, caches, masked_mse_grad(out, out.copy(), mask))
    for layer_grads in grads:
        for g in layer_grads.values():
            assert np.all(g == 0)


def test_masked_mse():
    """Test the masked loss and its failure modes."""
    assert masked_mse(np.array([2.0, 4.0]), np.array([1.0, 4.0]), np.array([1.0, 1.0])) == 0.5
    assert masked_mse(np.array([2.0, 4.0]), np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0
    with pytest.raises(EmptyMask):
        masked_mse(np.array([2.0]), np.array([1.0]), np.array([0.0]))
    with pytest.raises(ShapeMismatch):
        masked_mse(np.array([2.0, 1.0]), np.array([1.0]), np.array([1.0]))


def test_default_architecture_output_shape():
    """Test that the default network maps 21-channel stacks to one depth map."""
    params = build_network(ArchitectureConfig(), seed=0)
    x = np.random.default_rng(11).random((2, 21, 23, 23)).astype(np.float32)
    out, _ = forward(params, x, mode="eval")
    assert out.shape == (2, 1, 23, 23)

    again, _ = forward(params, x, mode="eval")
    assert np.array_equal(out, again)


def test_network_rejects_wrong_channels():
    """Test the input channel check."""
    params = build_network(TINY_ARCH)
    with pytest.raises(ShapeMismatch):
        forward(params, np.zeros((1, 3, 23, 23), dtype=np.float32))


def test_adam_first_step_closed_form():
    """Test that the first Adam step moves by lr * g / (|g| + eps)."""
    spec = LayerSpec(kind="fullyconnected", in_features=2, out_features=1)
    params = NetworkParams(
        specs=[spec], arrays=[{"weight": np.array([[0.5, -0.5]]), "bias": np.array([0.0])}]
    )
    before = params.clone()
    grads = [{"weight": np.array([[0.2, -3.0]]), "bias": np.array([1e-3])}]
    config = TrainConfig(learning_rate=0.01)
    params, state = adam_step(params, grads, init_adam(params), config)

    assert state.step == 1
    for name in ("weight", "bias"):
        g = grads[0][name]
        expected = before.arrays[0][name] - config.learning_rate * g / (np.abs(g) + config.eps)
        np.testing.assert_allclose(params.arrays[0][name], expected, rtol=1e-9)


def test_adam_zero_gradient_keeps_params():
    """Test that zero gradients leave parameters unchanged."""
    params = build_network(TINY_ARCH)
    before = params.clone()
    state = init_adam(params)
    zeros = [{k: np.zeros_like(v) for k, v in layer.items() if k in TRAINABLE} for layer in params.arrays]
    for _ in range(3):
        params, state = adam_step(params, zeros, state, TrainConfig())
    for a, b in zip(params.arrays, before.arrays):
        for name in a:
            assert np.array_equal(a[name], b[name])


def random_stacks(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    batch = FlowerStackBatch(
        tensor=rng.random((n, 21, 23, 23)),
        coords=np.array([[i, 0] for i in range(n)]),
        centroids=np.array([[12.0 + 24 * i, 12.0] for i in range(n)]),
    )
    gt = SparseDepthMap(
        coords=batch.coords, centroids=batch.centroids, depths=1.0 + 0.1 * np.arange(n), source="synthetic"
    )
    return batch, gt


def test_train_is_deterministic():
    """Test that equal seeds reproduce the loss history and weights."""
    stacks, gt = random_stacks(16)
    config = TrainConfig(epochs=3, batch_size=8, seed=3)
    first = train(stacks, gt, config, arch=TINY_ARCH)
    second = train(stacks, gt, config, arch=TINY_ARCH)

    assert len(first.loss_history) == 3
    assert first.loss_history == second.loss_history
    for a, b in zip(first.params.arrays, second.params.arrays):
        for name in a:
            assert np.array_equal(a[name], b[name])


def test_train_overfits_single_stack():
    """Test that one stack is fitted almost exactly."""
    stacks, _ = random_stacks(1)
    gt = SparseDepthMap(coords=stacks.coords, centroids=stacks.centroids, depths=np.array([5.0]))
    result = train(stacks, gt, TrainConfig(epochs=150, batch_size=1, learning_rate=0.01), arch=TINY_ARCH)
    assert result.loss_history[-1] < 0.1 * result.loss_history[0]
    assert result.params.is_finite()


def test_train_without_matching_ground_truth():
    """Test that stacks without any ground truth are rejected."""
    stacks, _ = random_stacks(4)
    gt = SparseDepthMap(coords=np.array([[99, 99]]), centroids=np.array([[0.0, 0.0]]), depths=np.array([1.0]))
    with pytest.raises(NoTrainingData):
        train(stacks, gt, TrainConfig(epochs=1), arch=TINY_ARCH)


def test_predict_sparse_keys_and_clamping():
    """Test that every stack gets one positive depth under its own key."""
    stacks, _ = random_stacks(5)
    params = build_network(TINY_ARCH, seed=1)
    sparse = predict_sparse(params, stacks, min_depth=0.25, batch_size=2)

    assert sparse.source == "predicted"
    assert sparse.keys() == [(i, 0) for i in range(5)]
    assert np.all(sparse.depths >= 0.25)
    assert np.all(np.isfinite(sparse.depths))


def test_trainer_uses_pipeline_config(tmp_path):
    """Test the trainer service with a tiny configured architecture."""
    from app.models.pipeline import PipelineConfig

    config = PipelineConfig(epochs=2, batch_size=4, encoder_channels=[4, 4], encoder_strides=[2, 2], mlp_features=[8])
    stacks, gt = random_stacks(6)
    trainer = DepthNetworkTrainer(config)
    result = trainer.fit(stacks, gt)
    assert len(result.loss_history) == 2
    assert len(trainer.predict(result.params, stacks)) == 6

    path = tmp_path / "loss.csv"
    write_loss_history(path, result.loss_history)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,mean_loss"
    assert len(lines) == 3


def test_weights_round_trip(tmp_path):
    """Test that saved weights reload into the same architecture."""
    params = build_network(TINY_ARCH, seed=4)
    path = tmp_path / "weights.mldn"
    save_weights(path, params)
    loaded = load_weights(path, TINY_ARCH)

    for a, b in zip(params.arrays, loaded.arrays):
        assert a.keys() == b.keys()
        for name in a:
            assert np.array_equal(a[name].astype(np.float32), b[name])


def test_weights_errors(tmp_path):
    """Test missing files, foreign files and architecture mismatches."""
    with pytest.raises(MissingAsset):
        load_weights(tmp_path / "missing.mldn", TINY_ARCH)

    path = tmp_path / "weights.mldn"
    save_weights(path, build_network(TINY_ARCH))
    other = TINY_ARCH.model_copy(update={"encoder_channels": [4, 8]})
    with pytest.raises(FormatError):
        load_weights(path, other)

    foreign = tmp_path / "foreign.mldn"
    foreign.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError):
        load_weights(foreign, TINY_ARCH)

    truncated = tmp_path / "truncated.mldn"
    truncated.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        load_weights(truncated, TINY_ARCH)


@pytest.mark.slow
def test_network_learns_plane_depths():
    """Test learning on rendered planes and prediction on an unseen depth."""
    from app.models.pipeline import PipelineConfig
    from app.models.scene import SyntheticScene, TexturedPlane
    from app.services.hexgrid import build_grid
    from app.services.plenoptic import PlenopticProcessor
    from app.services.synth import default_grid_calibration, render_plenoptic_rgb

    grid = build_grid(default_grid_calibration(320, 240))
    processor = PlenopticProcessor(PipelineConfig())

    def plane_stacks(depth: float, seed: int):
        scene = SyntheticScene(planes=[TexturedPlane(depth_m=depth, texture_seed=seed)])
        rgb, sparse = render_plenoptic_rgb(scene, grid)
        return processor.extract_stacks(rgb, grid), sparse

    tensors, depths = [], []
    for i, depth in enumerate((1.0, 1.2, 1.4, 1.6, 1.8, 2.0)):
        batch, sparse = plane_stacks(depth, seed=i)
        tensors.append(batch.tensor)
        depths.append(np.full(len(batch), depth))
    n = sum(len(t) for t in tensors)
    assert n >= 512
    stacks = FlowerStackBatch(
        tensor=np.concatenate(tensors),
        coords=np.stack([np.arange(n), np.zeros(n)], axis=1),
        centroids=np.zeros((n, 2)),
    )
    gt = SparseDepthMap(coords=stacks.coords, centroids=stacks.centroids, depths=np.concatenate(depths))

    # default topology and optimiser settings, fewer epochs
    result = train(stacks, gt, TrainConfig(epochs=30))
    assert result.params.specs == build_specs(ArchitectureConfig())
    assert result.loss_history[-1] <= 0.1 * result.loss_history[0]

    held_out, _ = plane_stacks(1.5, seed=100)
    predicted = predict_sparse(result.params, held_out)
    assert abs(np.median(predicted.depths) - 1.5) / 1.5 < 0.05

    near = predict_sparse(result.params, plane_stacks(1.1, seed=101)[0])
    far = predict_sparse(result.params, plane_stacks(1.9, seed=102)[0])
    assert np.median(near.depths) < np.median(far.depths)
