import numpy as np
import pytest

from metapool.data import (
    ClassImageStore,
    DataError,
    SyntheticTaskSpec,
    Task,
    TaskSet,
    add_salt_pepper,
    augment_rotations,
    gen_synthetic_tasks,
    load_character_dataset,
    make_glyph_store,
    reference_pool_1d,
    reference_pool_2d,
    rotate_cw,
    sample_episode,
    split_classes,
)


def brute_force_reference(x, dimensionality):
    """Independent re-implementation of the ground-truth pooling rules."""
    if dimensionality == "1d":
        out = np.zeros(len(x) // 2)
        for k in range(len(out)):
            a, b = x[2 * k], x[2 * k + 1]
            out[k] = max(a, b) if k < len(out) // 2 else (a + b) / 2
        return out
    h, w = x.shape
    out = np.zeros((h // 2, w // 2))
    for r in range(h // 2):
        for c in range(w // 2):
            a, b = x[2 * r, 2 * c], x[2 * r + 1, 2 * c]
            out[r, c] = max(a, b) if r < h // 4 else (a + b) / 2
    return out


def test_reference_1d_rules():
    x = np.zeros(60)
    x[0], x[1] = 0.2, 0.8
    x[58], x[59] = 0.2, 0.8
    y = reference_pool_1d(x)
    assert y[0] == 0.8      # max rule, first half
    assert y[29] == 0.5     # average rule, second half


def test_reference_matches_brute_force_1000_cases():
    rng = np.random.default_rng(0)
    for _ in range(500):
        x = rng.uniform(size=60)
        assert np.array_equal(reference_pool_1d(x), brute_force_reference(x, "1d"))
    for _ in range(500):
        x = rng.uniform(size=(12, 12))
        assert np.array_equal(reference_pool_2d(x), brute_force_reference(x, "2d"))


def test_gen_synthetic_tasks_counts_and_dims():
    spec = SyntheticTaskSpec("1d", in_dim=60, sets_per_task=20, task_count=25, seed=3)
    ts = gen_synthetic_tasks(spec)
    assert len(ts) == 25
    t = ts.tasks[0]
    assert t.x_tr.shape == (1, 60) and t.x_val.shape == (19, 60)
    assert t.y_tr.shape == (1, 30) and t.y_val.shape == (19, 30)
    assert np.array_equal(t.y_val[3], reference_pool_1d(t.x_val[3]))


def test_gen_synthetic_tasks_deterministic():
    spec = SyntheticTaskSpec("2d", in_dim=12, sets_per_task=4, task_count=3, seed=9)
    a, b = gen_synthetic_tasks(spec), gen_synthetic_tasks(spec)
    assert all(np.array_equal(x.x_val, y.x_val) for x, y in zip(a.tasks, b.tasks))


def test_minibatch_sampling_sorted_without_replacement():
    ts = TaskSet([Task(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), task_id=i)
                  for i in range(10)])
    rng = np.random.default_rng(0)
    batch = ts.sample_minibatch(4, rng)
    ids = [t.task_id for t in batch]
    assert ids == sorted(ids) and len(set(ids)) == 4


# -- character store ----------------------------------------------------------

def _png_store(tmp_path, classes=3, instances=4, size=16, value=None):
    from PIL import Image

    rng = np.random.default_rng(1)
    for c in range(classes):
        d = tmp_path / f"class{c}"
        d.mkdir()
        for i in range(instances):
            arr = (rng.uniform(size=(size, size)) * 255).astype(np.uint8) \
                if value is None else np.full((size, size), value, dtype=np.uint8)
            Image.fromarray(arr, mode="L").save(d / f"img{i}.png")
    return str(tmp_path)


def test_load_character_dataset(tmp_path):
    root = _png_store(tmp_path, classes=2, instances=20)
    store = load_character_dataset(root, image_size=8)
    assert store.classes == ["class0", "class1"]
    assert store.images["class0"].shape == (20, 8, 8)
    assert all(0.0 <= v <= 1.0 for v in store.images["class0"].ravel())


def test_load_inverts_polarity(tmp_path):
    root = _png_store(tmp_path, classes=1, instances=2, value=255)
    store = load_character_dataset(root, image_size=8)
    assert np.allclose(store.images["class0"], 0.0)  # white source -> 0


def test_load_empty_directory_errors(tmp_path):
    with pytest.raises(DataError):
        load_character_dataset(str(tmp_path))
    with pytest.raises(DataError, match="does not exist"):
        load_character_dataset(str(tmp_path / "missing"))


def test_split_classes():
    store = make_glyph_store(10, instances=3, size=12, seed=5)
    train, held = split_classes(store, 7, seed=2)
    assert len(train.classes) == 7 and len(held.classes) == 3
    assert set(train.classes) | set(held.classes) == set(store.classes)
    assert not (set(train.classes) & set(held.classes))
    again = split_classes(store, 7, seed=2)
    assert again[0].classes == train.classes


def test_augment_rotations_group_property():
    store = make_glyph_store(2, instances=2, size=12, seed=4)
    out = augment_rotations(store)
    assert len(out.classes) == 8
    base = store.images[store.classes[0]]
    r90 = out.images[f"{store.classes[0]}/rot90"]
    # three more quarter turns reproduce the original bitwise
    assert np.array_equal(rotate_cw(r90, 3), base)


def test_rotation_index_mapping():
    img = np.arange(12.0).reshape(3, 4)
    rot = rotate_cw(img, 1)
    assert rot[0, 0] == img[2, 0]  # (0,0) <- (H-1, 0)
    assert rot.shape == (4, 3)


def test_augment_rejects_non_square():
    store = ClassImageStore({"a": np.zeros((2, 3, 4))})
    with pytest.raises(DataError):
        augment_rotations(store)


# -- episodes -------------------------------------------------------------------

def test_episode_sizes_one_shot():
    store = make_glyph_store(8, instances=20, size=12, seed=0)
    ep = sample_episode(store, way=5, shot=1, queries=19, seed=11)
    assert ep.x_tr.shape[0] == 5 and ep.x_val.shape[0] == 95
    assert sorted(set(ep.y_tr)) == [0, 1, 2, 3, 4]


def test_episode_sizes_five_shot():
    store = make_glyph_store(8, instances=20, size=12, seed=0)
    ep = sample_episode(store, way=5, shot=5, queries=15, seed=11)
    assert ep.x_tr.shape[0] == 25 and ep.x_val.shape[0] == 75


def test_episode_deterministic_and_disjoint():
    store = make_glyph_store(6, instances=10, size=12, seed=1)
    a = sample_episode(store, 5, 2, 4, seed=3)
    b = sample_episode(store, 5, 2, 4, seed=3)
    assert np.array_equal(a.x_tr, b.x_tr) and np.array_equal(a.x_val, b.x_val)
    # no image appears in both splits
    flat_tr = {img.tobytes() for img in a.x_tr}
    flat_val = {img.tobytes() for img in a.x_val}
    assert not (flat_tr & flat_val)


def test_episode_insufficient_instances():
    store = make_glyph_store(5, instances=3, size=12, seed=1)
    with pytest.raises(DataError):
        sample_episode(store, way=5, shot=2, queries=4, seed=0)
    with pytest.raises(DataError):
        sample_episode(store, way=9, shot=1, queries=1, seed=0)


# -- noise ------------------------------------------------------------------------

def test_salt_pepper_extremes():
    img = np.random.default_rng(2).uniform(0.2, 0.8, size=(8, 8))
    assert np.array_equal(add_salt_pepper(img, 0.0, seed=1), img)
    noisy = add_salt_pepper(img, 1.0, seed=1)
    assert set(np.unique(noisy)) <= {0.0, 1.0}


def test_salt_pepper_replacement_count_binomial():
    img = np.full((28, 28), 0.5)
    counts = []
    for seed in range(50):
        noisy = add_salt_pepper(img, 0.5, seed=seed)
        counts.append(np.sum(noisy != 0.5))
    # replaced ~ Binomial(784, 0.5) minus the rare salt==0.5 coincidence (none:
    # salt values are exactly 0 or 1); 3 sigma around 392
    assert abs(np.mean(counts) - 392) < 3 * 14


def test_salt_pepper_rejects_bad_ratio():
    with pytest.raises(DataError):
        add_salt_pepper(np.zeros((2, 2)), 1.5, seed=0)


def test_salt_pepper_deterministic():
    img = np.random.default_rng(3).uniform(size=(6, 6))
    assert np.array_equal(add_salt_pepper(img, 0.3, seed=9),
                          add_salt_pepper(img, 0.3, seed=9))


# -- glyphs -----------------------------------------------------------------------

def test_glyph_store_contract():
    store = make_glyph_store(4, instances=5, size=20, seed=7)
    assert len(store.classes) == 4
    for label in store.classes:
        stack = store.images[label]
        assert stack.shape == (5, 20, 20)
        assert stack.min() >= 0.0 and stack.max() <= 1.0
    again = make_glyph_store(4, instances=5, size=20, seed=7)
    assert all(np.array_equal(store.images[c], again.images[c]) for c in store.classes)


def test_glyph_classes_are_distinct():
    store = make_glyph_store(3, instances=2, size=16, seed=8)
    a, b = store.images["glyph000"][0], store.images["glyph001"][0]
    assert not np.allclose(a, b)
