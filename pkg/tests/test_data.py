import numpy as np
import pytest

from data import (
    IGNORE_LABEL, PAD_ID, Interaction, build_dataset, eval_windows, generate_synthetic, load_dataset,
    make_masked_batch, next_item_windows, pad_window, parse_ratings, read_ratings, save_dataset,
    split_leave_one_out, subsample_users,
)
from errors import ArtifactError, ConfigError, DataError, EmptyDatasetError, ParseError

from conftest import TINY_SEQUENCES, interactions_from


# ========================
# PARSING
# ========================

def test_parse_single_line():
    assert parse_ratings(["1::1193::5::978300760"]) == [Interaction(1, 1193, 5, 978300760)]


def test_parse_empty_input():
    assert parse_ratings([]) == []


def test_parse_non_numeric_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_ratings(["1::x::5::0"])
    assert exc.value.line_no == 1


def test_parse_wrong_field_count_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_ratings(["1::2::3::4", "", "1::2::3"])
    assert exc.value.line_no == 3


def test_parse_accepts_crlf_and_bom(tmp_path):
    path = tmp_path / "ratings.dat"
    path.write_bytes("\ufeff1::10::5::1\r\n2::20::4::2\r\n".encode("utf-8"))
    assert read_ratings(path) == [Interaction(1, 10, 5, 1), Interaction(2, 20, 4, 2)]


def test_parse_rejects_rating_out_of_range():
    with pytest.raises(ParseError):
        parse_ratings(["1::2::9::4"])


# ========================
# DATASET
# ========================

def test_build_dataset_orders_by_timestamp_and_remaps():
    interactions = [Interaction(1, 7, 5, 2), Interaction(1, 7, 5, 1), Interaction(1, 9, 5, 3)]
    dataset = build_dataset(interactions, min_seq_len=3)
    assert dataset.sequences == ((1, 1, 2),)
    assert dataset.item_map == (7, 9)
    assert dataset.decode_items(dataset.sequences[0]) == [7, 7, 9]


def test_build_dataset_drops_short_users():
    interactions = interactions_from([[1, 2], [3, 4, 5]])
    dataset = build_dataset(interactions, min_seq_len=3)
    assert dataset.user_ids == (2,)


def test_build_dataset_timestamp_ties_keep_file_order():
    interactions = [Interaction(1, 30, 5, 5), Interaction(1, 10, 5, 5), Interaction(1, 20, 5, 5)]
    dataset = build_dataset(interactions, min_seq_len=3)
    assert dataset.decode_items(dataset.sequences[0]) == [30, 10, 20]


def test_build_dataset_empty_raises():
    with pytest.raises(EmptyDatasetError):
        build_dataset(interactions_from([[1, 2]]), min_seq_len=3)


def test_build_dataset_min_len_below_three_is_config_error():
    with pytest.raises(ConfigError):
        build_dataset(interactions_from(TINY_SEQUENCES), min_seq_len=2)


def test_dense_ids_are_a_bijection():
    interactions = interactions_from([[40, 10, 30], [10, 70, 40, 30]])
    dataset = build_dataset(interactions, min_seq_len=3)
    dense = sorted({i for seq in dataset.sequences for i in seq})
    assert dense == list(range(1, dataset.num_items + 1))
    assert dataset.decode_items(dense) == [10, 30, 40, 70]


# ========================
# SPLIT
# ========================

def test_split_positions():
    dataset = build_dataset(interactions_from([[3, 5, 2, 8], [1, 2, 3]]), min_seq_len=3)
    split = split_leave_one_out(dataset)
    decode = dataset.decode_items
    assert decode(split.train_prefixes[0]) == [3, 5]
    assert decode([split.valid_targets[0], split.test_targets[0]]) == [2, 8]
    assert decode(split.train_prefixes[1]) == [1]
    assert decode([split.valid_targets[1], split.test_targets[1]]) == [2, 3]


def test_split_round_trip(tiny_dataset, tiny_split):
    for row, seq in enumerate(tiny_dataset.sequences):
        assert tiny_split.sequence(row) == seq


def test_split_rejects_short_sequence(tiny_dataset):
    from data import _dataset_from_parts
    bad = _dataset_from_parts([1], [[1, 2]], [1, 2])
    with pytest.raises(DataError):
        split_leave_one_out(bad)


# ========================
# MASKED BATCHES
# ========================

def test_masked_batch_label_iff_mask(tiny_split, rng):
    batch = make_masked_batch(tiny_split.train_prefixes, 8, 0.4, rng, tiny_split.mask_token)
    assert np.array_equal(batch.labels != IGNORE_LABEL, batch.inputs == batch.mask_token)
    assert ((batch.labels != IGNORE_LABEL).sum(axis=1) >= 1).all()


def test_masked_batch_high_probability_masks_everything(tiny_split):
    batch = make_masked_batch(tiny_split.train_prefixes, 8, 0.999999, np.random.default_rng(0), tiny_split.mask_token)
    real = batch.inputs != PAD_ID
    assert (batch.inputs[real] == batch.mask_token).all()
    for b, prefix in enumerate(tiny_split.train_prefixes):
        assert list(batch.labels[b][real[b]]) == list(prefix[-8:])


def test_masked_batch_is_deterministic(tiny_split):
    a = make_masked_batch(tiny_split.train_prefixes, 8, 0.3, np.random.default_rng(5), tiny_split.mask_token)
    b = make_masked_batch(tiny_split.train_prefixes, 8, 0.3, np.random.default_rng(5), tiny_split.mask_token)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


def test_masked_batch_keeps_last_t_items():
    prefix = list(range(1, 11))
    batch = make_masked_batch([prefix], 4, 0.5, np.random.default_rng(0), 99)
    restored = np.where(batch.labels[0] != IGNORE_LABEL, batch.labels[0], batch.inputs[0])
    assert list(restored) == [7, 8, 9, 10]


def test_masked_batch_rejects_bad_probability(tiny_split, rng):
    with pytest.raises(ConfigError):
        make_masked_batch(tiny_split.train_prefixes, 8, 1.0, rng, tiny_split.mask_token)


def test_pad_window_left_pads():
    assert pad_window([4, 5], 4) == [0, 0, 4, 5]
    assert pad_window([1, 2, 3, 4, 5], 3) == [3, 4, 5]


# ========================
# WINDOWS
# ========================

def test_next_item_windows_hide_last_prefix_item(tiny_split):
    windows, positions, targets = next_item_windows(tiny_split.train_prefixes, 8, tiny_split.mask_token)
    assert (positions == 7).all()
    assert (windows[:, -1] == tiny_split.mask_token).all()
    assert list(targets) == [p[-1] for p in tiny_split.train_prefixes]
    assert list(windows[0][-4:-1]) == list(tiny_split.train_prefixes[0][-4:-1])


def test_eval_windows_test_and_valid(tiny_split):
    windows, targets = eval_windows(tiny_split, 8, "test")
    assert list(targets) == list(tiny_split.test_targets)
    assert windows[0][-2] == tiny_split.valid_targets[0]
    windows, targets = eval_windows(tiny_split, 8, "valid")
    assert list(targets) == list(tiny_split.valid_targets)
    assert windows[0][-2] == tiny_split.train_prefixes[0][-1]
    with pytest.raises(ConfigError):
        eval_windows(tiny_split, 8, "train")


# ========================
# SYNTHETIC DATA AND FILES
# ========================

def test_generate_synthetic_is_deterministic():
    kwargs = dict(num_users=10, num_items=30, min_len=5, max_len=9, num_patterns=3, noise=0.2, seed=7)
    assert generate_synthetic(**kwargs) == generate_synthetic(**kwargs)
    assert generate_synthetic(**kwargs) != generate_synthetic(**{**kwargs, "seed": 8})


def test_subsample_users_keeps_at_most_max_users():
    interactions = interactions_from([[1, 2, 3]] * 10)
    kept = subsample_users(interactions, 4, seed=1)
    assert len({x.user_id for x in kept}) == 4
    assert kept == subsample_users(interactions, 4, seed=1)
    assert subsample_users(interactions, None, seed=1) == interactions


def test_dataset_file_round_trip(tmp_path):
    dataset = build_dataset(interactions_from([[40, 10, 30], [10, 70, 40, 30]]), min_seq_len=3)
    path = save_dataset(dataset, tmp_path / "d.mrgd")
    loaded = load_dataset(path)
    assert loaded == dataset
    assert np.array_equal(loaded.popularity, dataset.popularity)


def test_dataset_file_bad_magic(tmp_path):
    path = tmp_path / "bad.mrgd"
    path.write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(ArtifactError):
        load_dataset(path)


def test_dataset_file_truncated(tmp_path, tiny_dataset):
    path = save_dataset(tiny_dataset, tmp_path / "d.mrgd")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ArtifactError):
        load_dataset(path)
