import numpy as np
import pytest

from driftback.shapes import FAMILIES, make_corpus, sample_shape


@pytest.mark.parametrize("family", FAMILIES)
def test_samples_are_normalized(family):
    pts = sample_shape(family, 300, np.random.default_rng(0))
    assert pts.shape == (300, 3)
    np.testing.assert_allclose(pts.mean(axis=0), 0, atol=1e-9)
    assert np.linalg.norm(pts, axis=1).max() == pytest.approx(1.0, abs=1e-9)


def test_corpus_is_reproducible_and_labelled():
    a = make_corpus(3, per_class=4, n=64, seed=1)
    b = make_corpus(3, per_class=4, n=64, seed=1)
    assert len(a) == 12 and a.families == FAMILIES[:3]
    assert np.array_equal(a.labels, np.repeat([0, 1, 2], 4))
    assert all(np.array_equal(x, y) for x, y in zip(a.clouds, b.clouds))
    c = make_corpus(3, per_class=4, n=64, seed=2)
    assert not np.array_equal(a.clouds[0], c.clouds[0])


def test_split_is_per_class_and_disjoint():
    corpus = make_corpus(4, per_class=10, n=32, seed=0)
    train, test = corpus.split(0.2, seed=3)
    assert len(train) == 32 and len(test) == 8
    assert np.bincount(test.labels).tolist() == [2, 2, 2, 2]
    ids = {c.tobytes() for c in train.clouds}
    assert not any(c.tobytes() in ids for c in test.clouds)
    again = corpus.split(0.2, seed=3)[1]
    assert all(np.array_equal(x, y) for x, y in zip(test.clouds, again.clouds))


def test_bad_family_count():
    with pytest.raises(ValueError):
        make_corpus(9)
