import numpy as np
import pytest

from bsnet.autodiff import Parameter, ShapeError, grad_check
from bsnet.heads import (
    ClassContext,
    ConfigurationError,
    CosineHead,
    ImageToClassHead,
    MatchingHead,
    PrototypeHead,
    RelationHead,
    build_head,
    cosine_score,
    image_to_class_score,
    matching_score,
    prototype_score,
    relation_score,
)


def ctx(label, *maps):
    return ClassContext(label, [np.asarray(m, dtype=float) for m in maps])


# -- ClassContext ------------------------------------------------------------------------

def test_context_prototype_is_mean(rng):
    maps = rng.normal(size=(5, 4, 3, 3))
    c = ctx(0, *maps)
    np.testing.assert_allclose(c.prototype.data, maps.mean(axis=0), atol=1e-12)
    with pytest.raises(ValueError):
        ClassContext(0, [])


# -- prototype -----------------------------------------------------------------------------

def test_prototype_score_zero_at_prototype(rng):
    m = rng.normal(size=(4, 3, 3))
    assert prototype_score(m, ctx(0, m)).item() == 0.0


def test_prototype_score_hand_value():
    q = np.zeros(6)
    q[0] = 1.0
    p = np.zeros(6)
    p[1] = 1.0
    assert prototype_score(q, ctx(0, p)).item() == -2.0


def test_prototype_five_shot_against_brute_force(rng):
    support = rng.normal(size=(5, 2, 3, 3))
    query = rng.normal(size=(2, 3, 3))
    mean = sum(support[i] for i in range(5)) / 5.0
    expect = -sum((query.ravel()[j] - mean.ravel()[j]) ** 2 for j in range(query.size))
    np.testing.assert_allclose(prototype_score(query, ctx(0, *support)).item(), expect, rtol=1e-12)
    batched = PrototypeHead().score(support[None], query[None]).data
    np.testing.assert_allclose(batched[0, 0], expect, rtol=1e-12)


def test_prototype_score_shape_error():
    with pytest.raises(ShapeError):
        prototype_score(np.zeros((2, 2)), ctx(0, np.zeros((3, 3))))


def test_prototype_unique_maximum(rng):
    p = rng.normal(size=(6,))
    c = ctx(0, p)
    for _ in range(50):
        q = p + rng.normal(scale=0.1, size=6)
        assert prototype_score(q, c).item() < 0.0


# -- matching -----------------------------------------------------------------------------

def test_matching_dominance():
    e = np.eye(4)
    probs = matching_score(e[2], [ctx(0, e[0]), ctx(1, e[1]), ctx(2, e[2]), ctx(3, e[3])]).data
    assert np.argmax(probs) == 2
    assert np.sum(probs == probs.max()) == 1


def test_matching_two_way_hand_softmax():
    probs = matching_score(np.array([1.0, 0.0]), [ctx(0, [1.0, 0.0]), ctx(1, [0.0, 1.0])]).data
    expect = np.exp([1.0, 0.0]) / np.exp([1.0, 0.0]).sum()
    np.testing.assert_allclose(probs, expect, rtol=1e-12)
    np.testing.assert_allclose(probs, [0.7310585786, 0.2689414214], atol=1e-9)


def test_matching_support_order_invariance(rng):
    sup = rng.normal(size=(3, 4, 5))
    q = rng.normal(size=5)
    a = matching_score(q, [ctx(i, *sup[i]) for i in range(3)]).data
    b = matching_score(q, [ctx(i, *sup[i][::-1]) for i in range(3)]).data
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_matching_batched_matches_single(rng):
    sup = rng.normal(size=(3, 2, 2, 3, 3))
    qs = rng.normal(size=(4, 2, 3, 3))
    head = MatchingHead()
    batched = head.score(sup, qs).data
    for i in range(4):
        single = matching_score(qs[i], [ctx(c, *sup[c]) for c in range(3)]).data
        np.testing.assert_allclose(batched[i], single, rtol=1e-12)
    np.testing.assert_allclose(batched.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(head.log_probs(sup, qs).data), batched, rtol=1e-12)


def test_matching_zero_vector_is_finite():
    probs = matching_score(np.zeros(3), [ctx(0, np.ones(3)), ctx(1, np.zeros(3))]).data
    np.testing.assert_allclose(probs, [0.5, 0.5])


# -- relation ---------------------------------------------------------------------------------

@pytest.fixture
def relation_head():
    return RelationHead(np.random.default_rng(3))


def test_relation_flatten_is_576(relation_head):
    assert relation_head.fc1.weight.shape == (8, 576)
    assert relation_head.fc2.weight.shape == (1, 8)
    pairs = np.zeros((1, 128, 19, 19))
    x = relation_head.block2(relation_head.block1(pairs))
    assert x.shape == (1, 64, 3, 3)


def test_relation_range_and_shape_error(relation_head, rng):
    relation_head.eval()
    sup = rng.normal(scale=10, size=(3, 1, 64, 19, 19))
    q = rng.normal(scale=10, size=(2, 64, 19, 19))
    s = relation_head.score(sup, q).data
    assert s.shape == (2, 3)
    assert np.all((s > 0) & (s < 1))
    with pytest.raises(ShapeError):
        relation_head.score(np.zeros((2, 1, 64, 21, 21)), np.zeros((1, 64, 21, 21)))


def test_relation_factorized_equals_literal_concat(relation_head, rng):
    relation_head.eval()
    relation_head.block1.bn.running_mean[:] = rng.normal(size=64)
    sup = rng.normal(size=(3, 2, 64, 19, 19))
    q = rng.normal(size=(2, 64, 19, 19))
    batched = relation_head.score(sup, q).data
    for i in range(2):
        for c in range(3):
            lit = relation_score(relation_head, q[i], ctx(c, *sup[c])).item()
            np.testing.assert_allclose(batched[i, c], lit, rtol=1e-10)


def test_relation_cached_prototype_equals_recomputed_mean(relation_head, rng):
    relation_head.eval()
    sup = rng.normal(size=(5, 64, 19, 19))
    q = rng.normal(size=(64, 19, 19))
    c = ctx(0, *sup)
    _ = c.prototype
    cached = relation_score(relation_head, q, c).item()
    independent = ClassContext(0, [np.mean(sup, axis=0)])
    np.testing.assert_allclose(cached, relation_score(relation_head, q, independent).item(), rtol=1e-12)


def test_relation_build_requires_19x19():
    with pytest.raises(ConfigurationError):
        build_head("relation", (64, 21, 21), np.random.default_rng(0))


# -- cosine ----------------------------------------------------------------------------------

@pytest.fixture
def cosine_head():
    return CosineHead(np.random.default_rng(4))


def test_cosine_embedding_is_1024(cosine_head):
    assert cosine_head.embed(np.zeros((1, 64, 19, 19))).shape == (1, 1024)


def test_cosine_identical_inputs_score_one(cosine_head, rng):
    m = rng.normal(size=(64, 19, 19))
    cosine_head.train()
    assert abs(cosine_score(cosine_head, m, ctx(0, m), raw=True).item() - 1.0) < 1e-12
    assert abs(cosine_score(cosine_head, m, ctx(0, m)).item() - 1.0) < 1e-12


def test_cosine_mapping_of_antiparallel():
    # the affine map is applied to the raw cosine; -1 -> 0
    head = CosineHead(np.random.default_rng(0))
    assert head.mapped
    raw = np.array([-1.0, 0.0, 1.0])
    np.testing.assert_array_equal((raw + 1.0) * 0.5, [0.0, 0.5, 1.0])


def test_cosine_batched_score_range(cosine_head, rng):
    cosine_head.eval()
    s = cosine_head.score(rng.normal(size=(3, 2, 64, 19, 19)), rng.normal(size=(4, 64, 19, 19))).data
    assert s.shape == (4, 3)
    assert np.all((s >= 0) & (s <= 1))


def test_cosine_zero_embedding_gives_zero(cosine_head):
    cosine_head.eval()
    for blk in (cosine_head.block1, cosine_head.block2):
        blk.bn.gamma.data[:] = 0.0
    raw = cosine_head.raw_cosines(np.zeros((2, 1, 64, 8, 8)), np.zeros((1, 64, 8, 8))).data
    np.testing.assert_array_equal(raw, 0.0)


# -- image to class --------------------------------------------------------------------------

def test_i2c_repeated_vector_k3():
    v = np.array([[1.0, 2.0, 3.0]])
    assert abs(image_to_class_score(v, np.repeat(v, 3, axis=0), 3).item() - 3.0) < 1e-12


def _vector_with_cosine(rng, u, c):
    perp = rng.normal(size=u.size)
    perp -= perp @ u * u
    perp /= np.linalg.norm(perp)
    return c * u + np.sqrt(1 - c * c) * perp


def test_i2c_toy_against_brute_force(rng):
    dim = 8
    d1 = np.eye(dim)[0]
    d2 = np.eye(dim)[1]
    # a pool of four vectors whose cosines are prescribed against d1, and separately d2
    pool1 = np.stack([_vector_with_cosine(rng, d1, c) for c in (0.9, 0.5, 0.1, -0.2)])
    cos_d1 = pool1 @ d1
    score1 = image_to_class_score(d1[None], pool1, 3).item()
    brute1 = sorted(cos_d1)[-3:]
    np.testing.assert_allclose(score1, sum(brute1), atol=1e-12)
    pool2 = np.stack([d2, np.eye(dim)[2], np.eye(dim)[3], np.eye(dim)[4]])
    score2 = image_to_class_score(d2[None], pool2, 3).item()
    np.testing.assert_allclose(score1 + score2, 2.5, atol=1e-12)


def test_i2c_pool_sizes():
    one = ClassContext(0, [np.zeros((64, 21, 21))])
    five = ClassContext(0, [np.zeros((64, 21, 21))] * 5)
    assert one.descriptor_pool().shape == (441, 64)
    assert five.descriptor_pool().shape == (2205, 64)


def test_i2c_errors():
    with pytest.raises(ValueError):
        image_to_class_score(np.ones((1, 3)), np.zeros((0, 3)))
    with pytest.raises(ValueError):
        image_to_class_score(np.ones((1, 3)), np.ones((2, 3)), 3)


def test_i2c_full_pool_equals_total(rng):
    q = rng.normal(size=(4, 5))
    pool = rng.normal(size=(6, 5))
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    pn = pool / np.linalg.norm(pool, axis=1, keepdims=True)
    np.testing.assert_allclose(image_to_class_score(q, pool, 6).item(), (qn @ pn.T).sum(), rtol=1e-12)


def test_i2c_batched_matches_single(rng):
    sup = rng.normal(size=(3, 2, 4, 3, 3))
    qs = rng.normal(size=(2, 4, 3, 3))
    batched = ImageToClassHead().score(sup, qs).data
    for i in range(2):
        for c in range(3):
            pool = ClassContext(c, list(sup[c])).descriptor_pool()
            qd = qs[i].reshape(4, 9).T
            np.testing.assert_allclose(batched[i, c], image_to_class_score(qd, pool, 3).item(), rtol=1e-12)


# -- shared invariants -------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["prototype", "matching", "relation", "cosine", "image_to_class"])
def test_support_order_invariance(kind, rng):
    head = build_head(kind, (64, 19, 19), np.random.default_rng(5)).eval()
    sup = rng.normal(size=(2, 3, 64, 19, 19))
    q = rng.normal(size=(2, 64, 19, 19))
    a = head.score(sup, q).data
    b = head.score(sup[:, ::-1], q).data
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


def _composite_check(head, rng, tol=1e-3):
    sup = Parameter(rng.normal(size=(2, 1, 64, 19, 19)))
    q = Parameter(rng.normal(size=(2, 64, 19, 19)))
    w = rng.normal(size=(2, 2))
    params = [sup, q] + head.parameters()
    report = grad_check(lambda: (head.score(sup, q) * w).sum(), params, tol=tol, max_coords=6,
                        rng=np.random.default_rng(0))
    assert report.passed, report.failures[:3]


def test_relation_composite_gradients(rng):
    head = RelationHead(np.random.default_rng(6))
    _composite_check(head, rng)


def test_cosine_composite_gradients(rng):
    head = CosineHead(np.random.default_rng(7))
    _composite_check(head, rng)
