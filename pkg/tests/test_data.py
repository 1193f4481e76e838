"""Synthetic stream generation and raw-tensor dataset ingestion."""

import numpy as np
import pytest

from convprompt import data as dm


def small_stream(seed=0, **overrides):
    cfg = dm.StreamConfig(num_tasks=3, classes_per_task=2, samples_per_class=5,
                          image_size=16, seed=seed, **overrides)
    return dm.generate_stream(cfg)


def test_stream_is_deterministic_and_seed_sensitive():
    a = small_stream()
    b = small_stream()
    c = small_stream(seed=1)
    for ta, tb in zip(a.tasks, b.tasks):
        assert np.array_equal(ta.train_x, tb.train_x)
        assert np.array_equal(ta.test_x, tb.test_x)
        assert ta.class_names == tb.class_names
    assert a.tasks[0].class_names != c.tasks[0].class_names or not np.array_equal(
        a.tasks[0].train_x, c.tasks[0].train_x)


def test_class_labels_are_globally_disjoint():
    stream = small_stream()
    stream.validate_disjoint()
    all_ids = [cid for t in stream.tasks for cid in t.class_ids]
    assert sorted(all_ids) == list(range(6))
    stream.tasks[2].class_ids[0] = stream.tasks[0].class_ids[0]
    with pytest.raises(ValueError):
        stream.validate_disjoint()


def test_split_sizes_and_pixel_range():
    stream = small_stream()
    for task in stream.tasks:
        assert len(task.train_y) == 2 * 4   # round(5 * 0.8) per class
        assert len(task.test_y) == 2 * 1
        assert task.train_x.shape[1:] == (3, 16, 16)
        assert task.train_x.min() >= 0.0 and task.train_x.max() <= 1.0


def test_attributes_name_the_template_factors():
    stream = small_stream()
    task = stream.tasks[0]
    for name in task.class_names:
        color, shape, freq = name.split("-", 2)
        attrs = task.attributes[name]
        assert f"{color} fill" in attrs
        assert f"{shape} outline" in attrs
        assert f"{freq} stripes" in attrs


def test_render_template_paints_shape_over_stripes():
    img = dm.render_template("square", "red", "low-frequency", 16, 8, 8)
    assert img.shape == (3, 16, 16)
    # center pixel carries the fill color, corner keeps the gray stripes
    assert np.allclose(img[:, 8, 8], dm.COLORS["red"])
    corner = img[:, 0, 0]
    assert corner[0] == corner[1] == corner[2]


def test_too_many_classes_rejected():
    with pytest.raises(ValueError):
        dm.StreamConfig(num_tasks=80, classes_per_task=2)


def test_cpds_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tasks = [([0, 1], rng.normal(size=(4, 3, 8, 8)),
              np.array([0, 1, 0, 1])),
             ([2], rng.normal(size=(2, 3, 8, 8)), np.array([2, 2]))]
    path = tmp_path / "stream.cpds"
    dm.save_cpds(path, tasks)
    back = dm.load_cpds(path)
    assert len(back) == 2
    for (ids_a, x_a, y_a), (ids_b, x_b, y_b) in zip(tasks, back):
        assert ids_a == ids_b
        assert np.array_equal(x_a, x_b)
        assert np.array_equal(np.asarray(y_a), y_b)


def test_cpds_rejects_bad_magic_and_foreign_labels(tmp_path):
    bad = tmp_path / "bad.cpds"
    bad.write_bytes(b"NOPE" + b"\x00" * 8)
    with pytest.raises(ValueError):
        dm.load_cpds(bad)
    path = tmp_path / "mismatch.cpds"
    dm.save_cpds(path, [([0], np.zeros((1, 1, 2, 2)), np.array([5]))])
    with pytest.raises(ValueError):
        dm.load_cpds(path)
