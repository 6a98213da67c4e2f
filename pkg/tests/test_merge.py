import json

import numpy as np
import pytest

from errors import ConfigError, MergeError, ValidationError
from fisher import SamplingSpec, estimate_fisher, save_fisher
from merge import (
    MergeRecipe, apply_recipe, fallback_mask, fisher_merge, merge_fisher, merge_objective, merge_objective_grad,
    merge_uniform, posterior_sample,
)
from model import (
    ModelConfig, ParamVector, init_params, load_checkpoint, round_to_storage, save_checkpoint, segment_shapes,
)

from conftest import tiny_model_config


SMALL = ModelConfig(num_items=1, d_model=2, n_heads=1, n_layers=0, max_len=1)
MEDIUM = ModelConfig(num_items=20, d_model=4, n_heads=1, n_layers=0, max_len=4)


def size_of(config):
    return sum(int(np.prod(s)) for s in segment_shapes(config).values())


def vec(values, config=SMALL):
    return ParamVector.from_flat(config, np.resize(np.asarray(values, dtype=np.float64), size_of(config)))


def fill(values, config=SMALL):
    return np.resize(np.asarray(values, dtype=np.float64), size_of(config))


# ========================
# UNIFORM
# ========================

def test_uniform_two_members():
    merged = merge_uniform([vec([1, 3]), vec([3, 5])])
    assert np.array_equal(merged.flat(), fill([2, 4]))


def test_uniform_three_members():
    merged = merge_uniform([vec([0]), vec([3]), vec([6])])
    assert np.array_equal(merged.flat(), fill([3]))


def test_uniform_single_entry_is_identity(tiny_params):
    assert merge_uniform([tiny_params]) is tiny_params


def test_uniform_arch_mismatch():
    with pytest.raises(MergeError):
        merge_uniform([vec([1]), vec([1], MEDIUM)])


# ========================
# FISHER-WEIGHTED
# ========================

def test_hand_example_is_exact():
    merged = fisher_merge([vec([2]), vec([6])], [fill([3]), fill([1])])
    assert np.array_equal(merged.flat(), fill([3.0]))


def test_equal_fishers_match_uniform(rng):
    members = [ParamVector.from_flat(MEDIUM, rng.normal(size=size_of(MEDIUM))) for _ in range(3)]
    F = fill([0.7], MEDIUM)
    merged = fisher_merge(members, [F, F, F])
    np.testing.assert_allclose(merged.flat(), merge_uniform(members).flat(), rtol=0, atol=1e-12)


def test_unconstrained_coordinate_falls_back_to_mean():
    merged = fisher_merge([vec([1]), vec([3])], [fill([0.0]), fill([0.0])])
    assert np.array_equal(merged.flat(), fill([2.0]))
    assert fallback_mask([fill([0.0]), fill([0.0])], [1, 1], 1e-12).all()


def test_fallback_threshold_uses_unnormalised_lambdas():
    members = [vec([0]), vec([6])]
    fishers = [fill([1e-12]), fill([2e-13])]
    merged = fisher_merge(members, fishers, lambdas=[1, 1])
    np.testing.assert_allclose(merged.flat(), fill([1.0]), rtol=1e-12)
    assert not fallback_mask(fishers, [1, 1], 1e-12).any()

    weak = [fill([4e-13]), fill([4e-13])]
    assert np.array_equal(fisher_merge(members, weak, lambdas=[1, 1]).flat(), fill([3.0]))
    assert fallback_mask(weak, [1, 1], 1e-12).all()


def test_identical_members_are_returned_exactly(rng):
    theta = ParamVector.from_flat(MEDIUM, rng.normal(size=size_of(MEDIUM)))
    fishers = [rng.gamma(1.0, size=size_of(MEDIUM)) for _ in range(4)]
    merged = fisher_merge([theta] * 4, fishers, lambdas=[1, 2, 3, 4])
    assert np.array_equal(merged.flat(), theta.flat())


def test_convexity_on_random_recipes(tiny_config):
    rng = np.random.default_rng(0)
    P = size_of(tiny_config)
    for _ in range(-(-10_000 // P)):
        M = int(rng.integers(2, 5))
        thetas = rng.normal(scale=3.0, size=(M, P))
        fishers = rng.gamma(0.5, size=(M, P)) * (rng.random((M, P)) < 0.7)
        lambdas = rng.uniform(0.1, 5.0, size=M)
        merged = fisher_merge([ParamVector.from_flat(tiny_config, t) for t in thetas], list(fishers), lambdas).flat()
        assert (merged >= thetas.min(axis=0)).all()
        assert (merged <= thetas.max(axis=0)).all()


def test_rescaling_is_bit_identical(rng):
    members = [ParamVector.from_flat(MEDIUM, rng.normal(size=size_of(MEDIUM))) for _ in range(3)]
    fishers = [rng.uniform(0.5, 2.0, size=size_of(MEDIUM)) for _ in range(3)]
    lambdas = [1, 2, 4]
    base = fisher_merge(members, fishers, lambdas).flat()
    assert np.array_equal(base, fisher_merge(members, fishers, [7 * x for x in lambdas]).flat())
    assert np.array_equal(base, fisher_merge(members, [f * 2.0 ** 10 for f in fishers], lambdas).flat())
    assert np.array_equal(base, fisher_merge(members, [f * 2.0 ** -6 for f in fishers], lambdas).flat())


def test_merge_maximises_objective(rng):
    members = [ParamVector.from_flat(MEDIUM, rng.normal(size=size_of(MEDIUM))) for _ in range(3)]
    fishers = [rng.uniform(0.1, 3.0, size=size_of(MEDIUM)) for _ in range(3)]
    merged = fisher_merge(members, fishers).flat()
    best = merge_objective(merged, members, fishers)
    for _ in range(1000):
        assert merge_objective(merged + rng.normal(scale=0.05, size=merged.size), members, fishers) <= best
    assert np.max(np.abs(merge_objective_grad(merged, members, fishers))) <= 1e-8


def test_objective_single_member_peak(tiny_params):
    F = np.ones(len(tiny_params))
    assert merge_objective(tiny_params, [tiny_params], [F]) == 0.0


def test_objective_scales_with_lambda(rng):
    members = [vec([1, 2]), vec([3, -1])]
    fishers = [fill([1.0]), fill([2.0])]
    theta = fill([0.5, 0.5])
    assert merge_objective(theta, members, fishers, [7, 7]) == pytest.approx(7 * merge_objective(theta, members, fishers, [1, 1]))


def test_negative_fisher_is_validation_error():
    with pytest.raises(ValidationError):
        fisher_merge([vec([1]), vec([2])], [fill([1.0]), fill([-1.0])])


def test_length_mismatch_is_merge_error():
    with pytest.raises(MergeError):
        fisher_merge([vec([1]), vec([2])], [fill([1.0])])


# ========================
# POSTERIOR SAMPLES
# ========================

def test_posterior_sample_moments():
    rng = np.random.default_rng(21)
    theta = ParamVector.from_flat(MEDIUM, rng.normal(size=size_of(MEDIUM)))
    F = rng.uniform(0.5, 4.0, size=size_of(MEDIUM))
    draws = np.stack([s.flat() for s in posterior_sample(theta, F, 10_000, 1.0, np.random.default_rng(5))])
    std = 1.0 / np.sqrt(F + 1.0)
    z = (draws.mean(axis=0) - theta.flat()) / (std / np.sqrt(10_000))
    assert np.mean(np.abs(z) <= 3.0) >= 0.97
    np.testing.assert_allclose(draws.var(axis=0), std ** 2, rtol=0.1)


def test_posterior_sample_large_fisher_pins_coordinates(tiny_params):
    F = np.full(len(tiny_params), 1e30)
    sample = posterior_sample(tiny_params, F, 1, 1e-12, np.random.default_rng(0))[0]
    np.testing.assert_allclose(sample.flat(), tiny_params.flat(), atol=1e-12)


def test_posterior_sample_is_reproducible(tiny_params):
    F = np.ones(len(tiny_params))
    a = posterior_sample(tiny_params, F, 3, 1.0, np.random.default_rng(2))
    b = posterior_sample(tiny_params, F, 3, 1.0, np.random.default_rng(2))
    assert all(np.array_equal(x.flat(), y.flat()) for x, y in zip(a, b))


def test_posterior_sample_needs_positive_epsilon(tiny_params):
    with pytest.raises(ConfigError):
        posterior_sample(tiny_params, np.ones(len(tiny_params)), 1, 0.0, np.random.default_rng(0))


# ========================
# RECIPES AND FILES
# ========================

def write_members(tmp_path, split, config):
    entries = []
    for i in range(2):
        params = init_params(config, i)
        ckpt = save_checkpoint(params, tmp_path / f"m{i}.ckpt")
        fisher = estimate_fisher(params, split, SamplingSpec("topk", 3), batch_size=2, seed=i)
        fpath = save_fisher(fisher, tmp_path / f"m{i}.fisher")
        entries.append({"checkpoint": ckpt.name, "fisher": fpath.name, "lambda": 1.0 + i})
    return entries


def test_recipe_validation():
    with pytest.raises(ConfigError):
        MergeRecipe.from_dict({"entries": []})
    with pytest.raises(ConfigError):
        MergeRecipe.from_dict({"entries": [{"checkpoint": "a.ckpt"}], "mode": "fisher"})
    with pytest.raises(ConfigError):
        MergeRecipe.from_dict({"entries": [{"checkpoint": "a.ckpt", "lambda": 0}], "mode": "uniform"})
    with pytest.raises(ConfigError):
        MergeRecipe.from_dict({"entries": [{"checkpoint": "a.ckpt"}], "mode": "average"})


def test_uniform_recipe_matches_merge_uniform(tmp_path, tiny_split):
    config = tiny_model_config()
    entries = write_members(tmp_path, tiny_split, config)
    (tmp_path / "recipe.json").write_text(json.dumps({"mode": "uniform", "entries": entries}))
    recipe = MergeRecipe.from_json(tmp_path / "recipe.json")
    merged = apply_recipe(recipe, config)
    loaded = [load_checkpoint(tmp_path / e["checkpoint"], config) for e in entries]
    assert np.array_equal(merged.params.flat(), merge_uniform(loaded).flat())


def test_fisher_recipe_writes_provenance(tmp_path, tiny_split):
    config = tiny_model_config()
    entries = write_members(tmp_path, tiny_split, config)
    recipe = MergeRecipe.from_dict({"mode": "fisher", "entries": entries}, base_dir=tmp_path)
    merged = merge_fisher(recipe, config)
    path = merged.save(tmp_path / "merged.ckpt")
    sidecar = json.loads((tmp_path / "merged.ckpt.json").read_text())
    assert sidecar["recipe_digest"] == recipe.digest()
    assert [e["lambda"] for e in sidecar["entries"]] == [1.0, 2.0]
    assert all(len(e["checkpoint_sha256"]) == 64 for e in sidecar["entries"])
    assert np.array_equal(load_checkpoint(path, config).flat(), round_to_storage(merged.params).flat())


def test_merge_fisher_needs_fisher_mode(tmp_path):
    recipe = MergeRecipe.from_dict({"mode": "uniform", "entries": [{"checkpoint": "a.ckpt"}]})
    with pytest.raises(ConfigError):
        merge_fisher(recipe, tiny_model_config())
