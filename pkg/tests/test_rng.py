"""Keyed counter-based noise: stability, block continuity, CRN."""

import numpy as np

from neumannlab.rng import NoiseSource, derive_key


def test_derive_key_is_stable_across_runs():
    # frozen values: the key schedule is part of the determinism contract,
    # changing it silently would break every seeded artifact
    assert derive_key(0, "bsde") == derive_key(0, "bsde")
    assert derive_key(0, "bsde") != derive_key(1, "bsde")
    assert derive_key(0, "bsde") != derive_key(0, "direct")
    assert 0 <= derive_key(12345, "x") < 2 ** 64


def test_block_draws_continue_the_stream():
    key = derive_key(9, "blocks")
    a = NoiseSource(key, 16, 2)
    b = NoiseSource(key, 16, 2)
    one_shot = a.normals(10)
    first = b.normals(4)
    second = b.normals(6)
    assert np.array_equal(one_shot, np.concatenate([first, second], axis=1))


def test_paths_are_independent_of_cloud_size():
    # path i's noise depends only on (key, i), not on how many paths run
    key = derive_key(2, "cloud")
    small = NoiseSource(key, 8, 1).normals(5)
    big = NoiseSource(key, 32, 1).normals(5)
    assert np.array_equal(small, big[:8])


def test_distinct_labels_decorrelate():
    n = 4000
    x = NoiseSource(derive_key(0, "a"), n, 1).normals(1)[:, 0, 0]
    y = NoiseSource(derive_key(0, "b"), n, 1).normals(1)[:, 0, 0]
    r = np.corrcoef(x, y)[0, 1]
    assert abs(r) < 0.05
    assert abs(x.mean()) < 5.0 / np.sqrt(n)


def test_shared_label_gives_common_random_numbers():
    key = derive_key(31, "crn")
    u = NoiseSource(key, 100, 3).normals(7)
    v = NoiseSource(key, 100, 3).normals(7)
    assert np.array_equal(u, v)
