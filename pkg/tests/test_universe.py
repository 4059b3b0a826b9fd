import csv
import dataclasses
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperguide import universe as U
from hyperguide.universe import TaskParams, TaskSpec, UniverseConfig


def make_task(alpha=0.3, radius=1.0, pattern=0, sigma=0.2, n_classes=4, seed=0):
    cfg = UniverseConfig(n_classes=n_classes, n_patterns=1 if n_classes == 2 else 8)
    p = TaskParams(alpha, radius, pattern, sigma)
    return TaskSpec(99, p, U.encode_descriptor(p, cfg), seed, n_classes)


def test_sample_task_deterministic():
    cfg = UniverseConfig(seed=3)
    a, b = U.sample_task(cfg, 5), U.sample_task(cfg, 5)
    assert a == b and np.array_equal(a.descriptor, b.descriptor)


def test_sixty_four_distinct_tasks():
    tasks = U.task_list(UniverseConfig(seed=7), range(64))
    assert len({t.params for t in tasks}) == 64


def test_alpha_marginal_mean_full_circle():
    cfg = UniverseConfig(seed=1, alpha_max=2 * math.pi)
    alphas = np.array([U.sample_task(cfg, i).params.alpha for i in range(10_000)])
    se = alphas.std(ddof=1) / math.sqrt(alphas.size)
    assert abs(alphas.mean() - math.pi) < 3 * se


def test_default_alpha_range_is_one_cluster_spacing():
    cfg = UniverseConfig()
    alphas = [U.sample_task(cfg, i).params.alpha for i in range(500)]
    assert 0 <= min(alphas) and max(alphas) < math.pi / 2


def test_params_within_ranges():
    cfg = UniverseConfig(seed=2)
    for t in U.task_list(cfg, range(200)):
        p = t.params
        assert 0.5 <= p.radius <= 2.0 and 0.15 <= p.sigma <= 0.45 and 0 <= p.pattern < 8
        assert abs(np.linalg.norm(t.descriptor) - 1) < 1e-9


def test_pattern_table_rows_are_distinct_permutations():
    table = U.pattern_table(4, 8)
    assert table.shape == (8, 4)
    assert len({tuple(r) for r in table}) == 8
    assert all(sorted(r) == [0, 1, 2, 3] for r in table)
    assert list(table[0]) == [0, 1, 2, 3]


def test_zero_support_split():
    support, query = U.realize_split(make_task(), 0, 10, 1)
    assert len(support) == 0 and len(query) == 10


def test_noiseless_points_sit_on_centers():
    t = make_task(sigma=0.0)
    _, q = U.realize_split(t, 0, 100, 0)
    centers = U.cluster_centers(t)
    labels = U.cluster_labels(t)
    for x, y in zip(q.x, q.y):
        c = int(np.flatnonzero(labels == y)[0])
        assert np.array_equal(x, centers[c])


def test_class_frequencies_uniform():
    _, q = U.realize_split(make_task(), 0, 4000, 3)
    counts = np.bincount(q.y, minlength=4)
    sd = math.sqrt(4000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 1000) < 3 * sd)


def test_split_validation():
    with pytest.raises(ValueError):
        U.realize_split(make_task(), -1, 5, 0)
    with pytest.raises(ValueError):
        U.realize_split(make_task(), 3, 0, 0)


def test_split_deterministic_and_disjoint():
    t = make_task()
    s1, q1 = U.realize_split(t, 20, 30, 4)
    s2, q2 = U.realize_split(t, 20, 30, 4)
    assert np.array_equal(s1.x, s2.x) and np.array_equal(q1.y, q2.y)
    _, other = U.realize_split(t, 20, 30, 5)
    rows = {tuple(r) for r in np.vstack([s1.x, q1.x])}
    assert not rows & {tuple(r) for r in other.x}
    assert not {tuple(r) for r in s1.x} & {tuple(r) for r in q1.x}


def test_descriptor_unit_norm_and_pattern_sensitivity():
    cfg = UniverseConfig(seed=4)
    descs = [U.encode_descriptor(TaskParams(0.4, 1.2, k, 0.3), cfg) for k in range(8)]
    for a, b in itertools.combinations(descs, 2):
        assert a @ b < 1 - 1e-6


def test_descriptor_independent_of_data_seed():
    cfg = UniverseConfig()
    p = TaskParams(0.2, 1.0, 3, 0.25)
    t1 = TaskSpec(0, p, U.encode_descriptor(p, cfg), 1, 4)
    t2 = TaskSpec(0, p, U.encode_descriptor(p, cfg), 12345, 4)
    assert np.array_equal(t1.descriptor, t2.descriptor)


def test_descriptor_noise_changes_but_stays_unit():
    p = TaskParams(0.2, 1.0, 3, 0.25)
    clean = U.encode_descriptor(p, UniverseConfig())
    noisy = U.encode_descriptor(p, UniverseConfig(descriptor_noise=0.3))
    assert not np.allclose(clean, noisy)
    assert abs(np.linalg.norm(noisy) - 1) < 1e-12
    assert np.array_equal(noisy, U.encode_descriptor(p, UniverseConfig(descriptor_noise=0.3)))


def test_bayes_noiseless_is_one():
    acc, _ = U.bayes_accuracy(make_task(sigma=0.0), 2000)
    assert acc == 1.0


def test_bayes_huge_noise_is_chance():
    acc, se = U.bayes_accuracy(make_task(sigma=1e3), 20_000)
    assert abs(acc - 0.25) < 4 * max(se, 0.003)


def test_bayes_two_class_matches_erf():
    # antipodal centers at distance 2r; project onto their axis: error = Phi(-r / sigma)
    t = make_task(alpha=0.0, radius=1.0, sigma=0.5, n_classes=2)
    acc, se = U.bayes_accuracy(t, 50_000)
    exact = 0.5 * (1 + math.erf(2.0 / math.sqrt(2)))
    assert abs(acc - exact) < 3 * se


def test_bayes_requires_enough_samples():
    with pytest.raises(ValueError):
        U.bayes_accuracy(make_task(), 999)


def test_descriptors_injective_on_universe():
    d = np.stack([t.descriptor for t in U.task_list(UniverseConfig(seed=9), range(64))])
    cos = d @ d.T
    np.fill_diagonal(cos, -1)
    assert 1 - cos.max() > 1e-4


def test_every_class_present_when_large():
    for seed in range(30):
        t = U.sample_task(UniverseConfig(seed=seed), seed)
        _, q = U.realize_split(t, 0, 32, seed)
        assert set(q.y.tolist()) == {0, 1, 2, 3}


def test_descriptor_mask_nested_and_fractional():
    cfg = UniverseConfig()
    idx = list(range(64))
    full, half, tenth = (U.descriptor_mask(cfg, f, idx) for f in (1.0, 0.5, 0.1))
    assert full.all()
    assert np.all(half[tenth]) and tenth.sum() <= half.sum()
    assert 20 <= half.sum() <= 44
    with pytest.raises(ValueError):
        U.descriptor_mask(cfg, 0.0, idx)


def test_config_validation():
    with pytest.raises(ValueError):
        UniverseConfig(n_classes=1)
    with pytest.raises(ValueError):
        UniverseConfig(sigma_range=(0.0, 0.3))
    with pytest.raises(ValueError):
        UniverseConfig(n_patterns=30)
    cfg = UniverseConfig()
    assert cfg.train_indices == list(range(64)) and cfg.test_indices == list(range(64, 80))


def test_export_csv(tmp_path):
    path = U.export_task_csv(make_task(), tmp_path / "t.csv", 3, 4, 0)
    rows = list(csv.DictReader(open(path)))
    assert [r["split"] for r in rows] == ["support"] * 3 + ["query"] * 4


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * math.pi, exclude_max=True), st.floats(0.5, 2.0), st.integers(0, 7),
       st.integers(0, 1000))
def test_descriptor_always_unit(alpha, r, k, seed):
    d = U.encode_descriptor(TaskParams(alpha, r, k, 0.2), UniverseConfig(seed=seed))
    assert abs(np.linalg.norm(d) - 1) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 50))
def test_labels_in_range(seed, n):
    t = U.sample_task(UniverseConfig(), seed % 80)
    s, q = U.realize_split(t, n, n, seed)
    for part in (s, q):
        assert part.y.min() >= 0 and part.y.max() < 4 and np.all(np.isfinite(part.x))


def test_frozen_config_replace():
    cfg = dataclasses.replace(UniverseConfig(), seed=5)
    assert cfg.seed == 5
