import warnings

import numpy as np
import pytest
import torch

from data import make_masked_batch, next_item_windows
from errors import ArchMismatchError, ArtifactError, ConfigError, InputError, TrainingError
from frameworks import FrameworkSpec, build_loss_spec
from model import (
    AdamState, BackwardCounter, GradientContext, ParamVector, configure_threads, forward, grad_log_prob,
    grad_sum_log_prob, init_params, load_checkpoint, probabilities, representations, round_to_storage,
    save_checkpoint, score_items, segment_shapes, train_step,
)

from conftest import tiny_model_config


def windows_for(split, config):
    return next_item_windows(split.train_prefixes, config.max_len, config.mask_token)


def log_prob(params, window, position, item):
    return float(np.log(probabilities(params, window.reshape(1, -1), [position])[0, item - 1]))


# ========================
# PARAMETERS
# ========================

def test_init_is_deterministic(tiny_config):
    a, b = init_params(tiny_config, 7), init_params(tiny_config, 7)
    assert np.array_equal(a.flat(), b.flat())
    assert not np.array_equal(a.flat(), init_params(tiny_config, 8).flat())


def test_init_layer_norms(tiny_params):
    for name, t in tiny_params.segments.items():
        if name.endswith(".scale"):
            assert torch.all(t == 1.0)
        if name.endswith(".shift"):
            assert torch.all(t == 0.0)


def test_segment_layout_is_name_sorted(tiny_config):
    names = list(segment_shapes(tiny_config))
    assert names == sorted(names)


def test_from_flat_rejects_wrong_size(tiny_config):
    with pytest.raises(ArchMismatchError):
        ParamVector.from_flat(tiny_config, np.zeros(3))


# ========================
# FORWARD
# ========================

def test_probabilities_sum_to_one(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    probs = probabilities(tiny_params, windows, positions)
    assert probs.shape == (tiny_split.num_users, 12)
    assert (probs >= 0).all()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_zeroed_output_path_gives_uniform(tiny_params, tiny_split, tiny_config):
    segments = {n: t.clone() for n, t in tiny_params.segments.items()}
    segments["item_embedding"].zero_()
    segments["item_bias"].zero_()
    params = ParamVector(tiny_config, segments)
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    np.testing.assert_allclose(probabilities(params, windows, positions), 1.0 / 12, atol=1e-12)


def test_out_of_range_item_is_input_error(tiny_params, tiny_config):
    window = np.zeros((1, tiny_config.max_len), dtype=np.int64)
    window[0, -1] = tiny_config.mask_token + 1
    with pytest.raises(InputError):
        probabilities(tiny_params, window, [tiny_config.max_len - 1])


def test_wrong_window_length_is_input_error(tiny_params):
    with pytest.raises(InputError):
        probabilities(tiny_params, np.ones((1, 3), dtype=np.int64), [2])


def test_output_projection_is_tied_to_item_embedding(tiny_params, tiny_config):
    T, item = tiny_config.max_len, 7
    without = np.array([[0, 0, 0, 1, 2, 3, 4, tiny_config.mask_token]])
    containing = np.array([[0, 0, 0, item, 2, 3, 4, tiny_config.mask_token]])
    segments = {n: t.clone() for n, t in tiny_params.segments.items()}
    segments["item_embedding"][item] += 0.1 * torch.arange(tiny_config.d_model, dtype=torch.float64)
    bumped = ParamVector(tiny_config, segments)

    before = forward(tiny_params, without, T - 1).logits.numpy()[0]
    after = forward(bumped, without, T - 1).logits.numpy()[0]
    others = np.arange(tiny_config.num_items) != item - 1
    assert abs(after[item - 1] - before[item - 1]) > 1e-6
    np.testing.assert_allclose(after[others], before[others], rtol=0, atol=1e-12)

    def rep(params, windows):
        return representations(params.segments, windows, tiny_config).detach().numpy()

    np.testing.assert_array_equal(rep(bumped, without), rep(tiny_params, without))
    assert not np.allclose(rep(bumped, containing), rep(tiny_params, containing))


def test_scalar_query_position_raises_no_warnings(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        probs = probabilities(tiny_params, windows, tiny_config.max_len - 1, chunk=2)
    np.testing.assert_allclose(probs, probabilities(tiny_params, windows, positions), rtol=0, atol=1e-12)


def test_scoring_does_not_depend_on_worker_count(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    try:
        configure_threads(1)
        serial = score_items(tiny_params, windows, chunk=2), probabilities(tiny_params, windows, positions, chunk=2)
        configure_threads(3)
        parallel = score_items(tiny_params, windows, chunk=2), probabilities(tiny_params, windows, positions, chunk=2)
    finally:
        configure_threads(1)
    assert np.array_equal(serial[0], parallel[0])
    assert np.array_equal(serial[1], parallel[1])


def test_configure_threads_rejects_zero():
    with pytest.raises(ConfigError):
        configure_threads(0)


# ========================
# GRADIENTS
# ========================

def test_item_bias_gradient_is_onehot_minus_p(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    p = probabilities(tiny_params, windows[:1], positions[:1])[0]
    bias = tiny_params.segment_slices()["item_bias"]
    for item in (1, 5, 12):
        g = grad_log_prob(tiny_params, windows[0], int(positions[0]), item)[bias]
        expected = -p.copy()
        expected[item - 1] += 1.0
        np.testing.assert_allclose(g, expected, atol=1e-12)


def test_expected_score_is_zero(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    ctx = GradientContext(tiny_params, windows[:1], positions[:1])
    p = ctx.probs[0]
    total = sum(p[j - 1] * ctx.grad(j) for j in range(1, 13))
    assert np.max(np.abs(total)) < 1e-8


def test_gradient_matches_finite_differences(tiny_config, tiny_split):
    params = init_params(tiny_config, seed=11)
    windows, positions, targets = windows_for(tiny_split, tiny_config)
    window, position, item = windows[1], int(positions[1]), int(targets[1])
    analytic = grad_log_prob(params, window, position, item)
    theta = params.flat()

    pick = np.random.default_rng(0)
    coords = []
    for sl in params.segment_slices().values():
        size = min(3, sl.stop - sl.start)
        coords.extend(int(c) for c in pick.choice(np.arange(sl.start, sl.stop), size=size, replace=False))
    for k in coords:
        h = 1e-5 * max(1.0, abs(theta[k]))
        up, down = theta.copy(), theta.copy()
        up[k] += h
        down[k] -= h
        fd = (log_prob(ParamVector.from_flat(tiny_config, up), window, position, item)
              - log_prob(ParamVector.from_flat(tiny_config, down), window, position, item)) / (2 * h)
        assert abs(fd - analytic[k]) <= 1e-3 * abs(analytic[k]) + 1e-6, k


def test_batch_of_one_equals_single_gradient(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    single = grad_log_prob(tiny_params, windows[2], int(positions[2]), 4)
    batch = grad_sum_log_prob(tiny_params, windows[2:3], positions[2:3], 4)
    assert np.array_equal(single, batch)


def test_duplicated_window_doubles_gradient(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    single = grad_log_prob(tiny_params, windows[0], int(positions[0]), 3)
    double = grad_sum_log_prob(tiny_params, np.stack([windows[0], windows[0]]), positions[:2], 3)
    np.testing.assert_allclose(double, 2 * single, atol=1e-10)


def test_batch_gradient_is_sum_of_singles(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    rows = [0, 2, 3, 5]
    summed = sum(grad_log_prob(tiny_params, windows[r], int(positions[r]), 7) for r in rows)
    counter = BackwardCounter()
    batch = grad_sum_log_prob(tiny_params, windows[rows], positions[rows], 7, counter)
    np.testing.assert_allclose(batch, summed, atol=1e-8)
    assert counter.count == 1


def test_per_window_items(tiny_params, tiny_split, tiny_config):
    windows, positions, targets = windows_for(tiny_split, tiny_config)
    summed = sum(grad_log_prob(tiny_params, windows[r], int(positions[r]), int(targets[r])) for r in range(3))
    batch = grad_sum_log_prob(tiny_params, windows[:3], positions[:3], targets[:3])
    np.testing.assert_allclose(batch, summed, atol=1e-8)


def test_gradient_rejects_bad_item(tiny_params, tiny_split, tiny_config):
    windows, positions, _ = windows_for(tiny_split, tiny_config)
    with pytest.raises(InputError):
        grad_log_prob(tiny_params, windows[0], int(positions[0]), 13)


# ========================
# TRAINING STEP
# ========================

def _step(params, split, loss_spec, seed):
    rng = np.random.default_rng(seed)
    batch = make_masked_batch(split.train_prefixes, params.config.max_len, 0.3, rng, params.config.mask_token)
    return train_step(params, batch, loss_spec, AdamState(params), rng)


def test_zero_lambda_matches_pure_cross_entropy(tiny_params, tiny_split):
    spec = build_loss_spec(FrameworkSpec("cl4srec", lambda_cl=0.0), tiny_split)
    a = _step(tiny_params, tiny_split, spec, 3)
    b = _step(tiny_params, tiny_split, None, 3)
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert a.cl_loss == 0.0


def test_train_step_is_deterministic(tiny_params, tiny_split):
    spec = build_loss_spec(FrameworkSpec("duorec_unsup"), tiny_split)
    a = _step(tiny_params, tiny_split, spec, 9)
    b = _step(tiny_params, tiny_split, spec, 9)
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert a.ce_loss == b.ce_loss and a.cl_loss == b.cl_loss


def test_loss_decreases_on_planted_pattern():
    config = tiny_model_config(num_items=6, lr=1e-2, dropout=0.1, init_std=0.02)
    prefixes = [tuple([1, 2, 3, 4, 5, 6][(u % 6):] + [1, 2, 3, 4, 5, 6][:(u % 6)]) for u in range(20)]
    params = init_params(config, 0)
    state = AdamState(params)
    rng = np.random.default_rng(0)
    losses = []
    for _ in range(50):
        batch = make_masked_batch(prefixes, config.max_len, 0.3, rng, config.mask_token)
        step = train_step(params, batch, None, state, rng)
        params = step.params
        losses.append(step.ce_loss)
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_non_finite_loss_raises_training_error(tiny_params, tiny_split):
    segments = {n: t.clone() for n, t in tiny_params.segments.items()}
    segments["item_bias"][0] = float("nan")
    params = ParamVector(tiny_params.config, segments)
    with pytest.raises(TrainingError) as exc:
        _step(params, tiny_split, None, 0)
    assert exc.value.diagnostics["params_finite"] is False


# ========================
# CHECKPOINT FILES
# ========================

def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = save_checkpoint(tiny_params, tmp_path / "m.ckpt")
    loaded = load_checkpoint(path, tiny_params.config)
    assert np.array_equal(loaded.flat(), round_to_storage(tiny_params).flat())


def test_checkpoint_arch_mismatch(tmp_path, tiny_params):
    path = save_checkpoint(tiny_params, tmp_path / "m.ckpt")
    with pytest.raises(ArchMismatchError):
        load_checkpoint(path, tiny_model_config(d_model=4))


def test_checkpoint_bad_magic(tmp_path, tiny_config):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(ArtifactError):
        load_checkpoint(path, tiny_config)
