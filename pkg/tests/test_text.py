import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phraseground.text import (
    CategoryModel, HashedEmbedder, Phrase, WordVectorTable, assign_category,
    embed_phrase, extract_nouns, fit_categories, tokenize, within_cluster_cost,
)


# ---------------------------------------------------------------------------
# tokenize

def test_tokenize_basic():
    assert tokenize("A small baby").tokens == ("a", "small", "baby")


def test_tokenize_strips_punctuation():
    assert tokenize("red-bus!").tokens == ("red", "bus")


def test_tokenize_trims():
    assert tokenize("  boy  ").tokens == ("boy",)


def test_tokenize_rejects_empty():
    with pytest.raises(ValueError):
        tokenize("   ")
    with pytest.raises(ValueError):
        tokenize("!!!")
    with pytest.raises(ValueError):
        Phrase((), "")


# ---------------------------------------------------------------------------
# embedding

def test_embed_deterministic():
    e = HashedEmbedder(dim=16)
    p = tokenize("red bus")
    assert np.array_equal(embed_phrase(p, e), embed_phrase(p, HashedEmbedder(dim=16)))


def test_embed_mean_pooling_ignores_repeats():
    e = HashedEmbedder(dim=16)
    a = embed_phrase(tokenize("baby"), e)
    b = embed_phrase(tokenize("baby baby"), e)
    assert np.allclose(a, b)


def test_embed_permutation_invariant():
    e = HashedEmbedder(dim=16)
    a = embed_phrase(tokenize("red bus"), e)
    b = embed_phrase(tokenize("bus red"), e)
    assert np.allclose(a, b)


def test_shared_head_noun_is_closer_in_cosine():
    # phrases sharing the noun should beat phrases sharing nothing,
    # averaged over a small synthetic template vocabulary
    e = HashedEmbedder(dim=64)
    nouns = ["dog", "bus", "chair", "bottle"]
    attrs = ["red", "small", "tall", "shiny"]

    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    same, diff = [], []
    for n in nouns:
        for a1 in attrs:
            for a2 in attrs:
                if a1 == a2:
                    continue
                u = embed_phrase(tokenize(f"{a1} {n}"), e)
                v = embed_phrase(tokenize(f"{a2} {n}"), e)
                same.append(cos(u, v))
    for n1 in nouns:
        for n2 in nouns:
            if n1 == n2:
                continue
            for a1 in attrs:
                for a2 in attrs:
                    if a1 == a2:
                        continue
                    u = embed_phrase(tokenize(f"{a1} {n1}"), e)
                    v = embed_phrase(tokenize(f"{a2} {n2}"), e)
                    diff.append(cos(u, v))
    assert np.mean(same) > np.mean(diff) + 0.2


def test_sequence_shape():
    e = HashedEmbedder(dim=8)
    assert e.sequence(tokenize("red bus stop")).shape == (3, 8)


# ---------------------------------------------------------------------------
# categories

def test_fit_single_category_is_mean():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 4))
    model = fit_categories(x, 1, seed=0)
    assert np.allclose(model.centers[0], x.mean(axis=0), atol=1e-9)


def test_fit_two_separated_blobs():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((30, 3)) * 0.1 + np.array([10, 0, 0])
    b = rng.standard_normal((30, 3)) * 0.1 + np.array([-10, 0, 0])
    x = np.vstack([a, b])
    model = fit_categories(x, 2, seed=3)
    # each center inside one blob's hull, assignment 100% pure
    labels = [int(np.argmin(((model.centers - p) ** 2).sum(axis=1))) for p in x]
    assert len(set(labels[:30])) == 1
    assert len(set(labels[30:])) == 1
    assert labels[0] != labels[30]


def test_fit_n_equals_points():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 3))
    model = fit_categories(x, 5, seed=0)
    d = ((x[:, None, :] - model.centers[None, :, :]) ** 2).sum(axis=2)
    assert np.allclose(d.min(axis=1), 0.0, atol=1e-12)


def test_fit_rejects_too_few_distinct_points():
    x = np.tile(np.array([[1.0, 2.0]]), (10, 1))
    with pytest.raises(ValueError):
        fit_categories(x, 2, seed=0)


def test_fit_deterministic_and_cost_no_worse_than_start():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((40, 6))
    m1 = fit_categories(x, 5, seed=11)
    m2 = fit_categories(x, 5, seed=11)
    assert np.array_equal(m1.centers, m2.centers)


def test_kmeans_cost_never_increases_across_iterations():
    # re-run fit with increasing iteration caps; cost is monotone non-increasing
    rng = np.random.default_rng(8)
    x = rng.standard_normal((60, 4))
    costs = [within_cluster_cost(x, fit_categories(x, 4, seed=2, max_iter=k))
             for k in range(1, 12)]
    assert all(a >= b - 1e-9 for a, b in zip(costs, costs[1:]))


def test_assign_category_basis_centers():
    model = CategoryModel(np.eye(2))
    assert assign_category(np.array([1.0, 0.0]), model) == 0


def test_assign_category_scale_invariant():
    rng = np.random.default_rng(5)
    centers = rng.standard_normal((5, 4))
    ep = rng.standard_normal(4)
    a = assign_category(ep, CategoryModel(centers))
    b = assign_category(ep, CategoryModel(centers * 7.3))
    assert a == b


def test_assign_category_matches_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(300):
        centers = rng.standard_normal((5, 8))
        ep = rng.standard_normal(8)
        best, best_dot = 0, -np.inf
        for j in range(5):
            d = float(np.dot(ep, centers[j]))
            if d > best_dot:
                best, best_dot = j, d
        assert assign_category(ep, CategoryModel(centers)) == best


def test_assign_category_tie_goes_to_lowest_index():
    centers = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert assign_category(np.array([1.0, 0.0]), CategoryModel(centers)) == 0


@given(st.integers(0, 2 ** 31))
@settings(max_examples=100)
def test_assign_category_always_in_range(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 8))
    centers = rng.standard_normal((n, 4))
    ep = rng.standard_normal(4)
    j = assign_category(ep, CategoryModel(centers))
    assert 0 <= j < n


def test_category_model_round_trip():
    m = CategoryModel(np.arange(6.0).reshape(2, 3))
    m2 = CategoryModel.from_json_dict(m.to_json_dict())
    assert np.array_equal(m.centers, m2.centers)


# ---------------------------------------------------------------------------
# nouns and word vectors

def test_extract_nouns_examples():
    lex = frozenset({"baby", "woman", "umbrella"})
    assert extract_nouns(tokenize("small baby"), lex) == ["baby"]
    assert extract_nouns(tokenize("very shiny thing"), lex) == []
    assert extract_nouns(tokenize("woman holding umbrella"), lex) == ["woman", "umbrella"]


def test_extract_nouns_dedup_preserves_order():
    lex = frozenset({"dog", "cat"})
    assert extract_nouns(tokenize("dog cat dog"), lex) == ["dog", "cat"]


def test_word_vector_table_round_trip(tmp_path):
    t = WordVectorTable.from_embedder(["dog", "bus"], dim=8)
    path = tmp_path / "wv.json"
    t.save(path)
    t2 = WordVectorTable.load(path)
    assert t2.dim == 8
    assert np.array_equal(t.vector("dog"), t2.vector("dog"))
    assert np.allclose(t2.vector_or_zero("unknown"), 0.0)


def test_word_vector_table_rejects_mixed_dims():
    with pytest.raises(ValueError):
        WordVectorTable({"a": [1.0, 2.0], "b": [1.0]})
