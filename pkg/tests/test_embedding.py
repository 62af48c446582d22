import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from safelang.constraints import load_corpus, make_condenser
from safelang.embedding import (
    LocalEmbedder, ProjectedEmbedder, contrastive_loss, cosine_sim, finetune, pair_loss_and_grad,
)
from oracles import central_difference, rel_error

WORDS = ["lava", "water", "grass", "tile", "you", "stepped", "do", "not", "touch", "moved",
         "key", "ball", "box", "wall", "empty", "onto", "a", "the"]


def test_embed_is_deterministic_and_unit_norm():
    emb = LocalEmbedder.create(seed=0)
    a, b = emb.embed("You stepped onto a lava tile."), emb.embed("You stepped onto a lava tile.")
    np.testing.assert_array_equal(a, b)
    assert abs(np.linalg.norm(a) - 1.0) <= 1e-9
    assert a.shape == (32,)
    with pytest.raises(ValueError):
        emb.embed("")
    with pytest.raises(ValueError):
        emb.embed("?!")


def test_disjoint_slots_are_orthogonal_under_orthogonal_table():
    emb = LocalEmbedder.create(vocab_size=16, dim=32, seed=0, init="orthogonal")
    slots = {w: int(emb.slots(w)[0]) for w in WORDS}
    left, right = [], []
    for w in WORDS:
        if slots[w] not in {slots[x] for x in right} and len(left) < 3:
            left.append(w)
        elif slots[w] not in {slots[x] for x in left}:
            right.append(w)
    s1, s2 = " ".join(left), " ".join(right)
    assert not set(emb.slots(s1)) & set(emb.slots(s2))
    assert abs(cosine_sim(emb.embed(s1), emb.embed(s2))) <= 1e-9


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_sim(v, v) == pytest.approx(1.0)
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert cosine_sim([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_sim([1, 0], [1, 0, 0])


nonzero = arrays(np.float64, 6, elements=st.floats(-100, 100)).filter(
    lambda x: np.linalg.norm(x) > 1e-3)


@given(nonzero, nonzero, st.floats(1e-3, 1e3))
def test_cosine_properties(a, b, k):
    c = cosine_sim(a, b)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(cosine_sim(b, a), abs=1e-12)
    assert cosine_sim(k * a, b) == pytest.approx(c, abs=1e-9)


def _with_cos(c):
    return np.array([1.0, 0.0]), np.array([c, np.sqrt(1 - c * c)])


def test_contrastive_loss_examples():
    h = np.array([0.2, 0.4, -0.1])
    assert contrastive_loss([(h, h, 1)]) == pytest.approx(0.0)
    p1, p2 = _with_cos(0.8), _with_cos(0.2)
    assert contrastive_loss([(*p1, 1), (*p2, 0)]) == pytest.approx(0.02)
    assert contrastive_loss([(*_with_cos(0.5), 0)]) == pytest.approx(0.125)
    with pytest.raises(ValueError):
        contrastive_loss([])


@settings(max_examples=25)
@given(st.lists(st.tuples(nonzero, nonzero, st.integers(0, 1)), min_size=1, max_size=6),
       st.randoms())
def test_contrastive_loss_permutation_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert contrastive_loss(shuffled) == pytest.approx(contrastive_loss(pairs), rel=1e-12)
    assert contrastive_loss(pairs) >= 0


def _random_text(rng, n):
    return " ".join(rng.choice(WORDS, size=n))


@pytest.mark.parametrize("seed", range(5))
def test_local_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    emb = LocalEmbedder(rng.normal(size=(16, 6)))
    texts = [(_random_text(rng, rng.integers(1, 6)), _random_text(rng, rng.integers(1, 6)))
             for _ in range(4)]
    labels = list(rng.integers(0, 2, size=4))
    _, grad = pair_loss_and_grad(emb, texts, labels)

    def loss():
        return contrastive_loss([(emb.embed(a), emb.embed(b), y) for (a, b), y in zip(texts, labels)])

    for idx in np.ndindex(emb.params.shape):
        num = central_difference(loss, emb.params, idx)
        assert rel_error(grad[idx], num) <= 1e-4, idx


def test_projection_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    base = LocalEmbedder(rng.normal(size=(16, 5)))
    head = ProjectedEmbedder(base, rng.normal(size=(5, 5)))
    texts = [("lava tile", "do not touch lava"), ("water", "grass tile"), ("you moved", "key")]
    labels = [1, 0, 0]
    _, grad = pair_loss_and_grad(head, texts, labels)

    def loss():
        return contrastive_loss([(head.embed(a), head.embed(b), y) for (a, b), y in zip(texts, labels)])

    for idx in np.ndindex(head.params.shape):
        assert rel_error(grad[idx], central_difference(loss, head.params, idx)) <= 1e-4


@pytest.fixture(scope="module")
def corpus():
    return load_corpus()


def test_finetune_decreases_loss(corpus):
    base = LocalEmbedder.create(seed=0)
    tuned, report = finetune(base, corpus, iterations=10, pairs_per_iter=128, lr=0.1, seed=0)
    assert len(report.losses) == 10 and all(l >= 0 for l in report.losses)
    assert report.losses[-1] < report.losses[0]
    assert report.final_monitor_loss < report.monitor_losses[0]
    # the input backend is untouched
    np.testing.assert_array_equal(base.params, LocalEmbedder.create(seed=0).params)


def test_finetune_zero_lr_is_identity(corpus):
    base = LocalEmbedder.create(seed=0)
    tuned, report = finetune(base, corpus, iterations=5, lr=0.0, seed=0)
    np.testing.assert_array_equal(tuned.params, base.params)
    assert len(set(report.monitor_losses)) == 1
    assert report.final_monitor_loss == report.monitor_losses[0]


def test_finetune_separates_positive_and_negative_pairs(corpus):
    from safelang.constraints import generate_pairs
    cond = make_condenser("identity")
    tuned, _ = finetune(LocalEmbedder.create(seed=0), corpus, lr=0.1, seed=0, condense=cond)
    pairs = generate_pairs(corpus, 256, seed=99, condense=cond)
    pos = [cosine_sim(tuned.embed(p.a.text), tuned.embed(p.b.text)) for p in pairs if p.label]
    neg = [cosine_sim(tuned.embed(p.a.text), tuned.embed(p.b.text)) for p in pairs if not p.label]
    assert np.mean(pos) > np.mean(neg)


def test_finetune_aborts_on_nan(corpus):
    emb = LocalEmbedder.create(seed=0)
    with pytest.raises(FloatingPointError):
        finetune(emb, corpus, iterations=2, lr=float("inf"), seed=0)


def test_binary_round_trip(tmp_path):
    emb = LocalEmbedder.create(seed=4)
    path = tmp_path / "e.bin"
    emb.save(path)
    data = path.read_bytes()
    assert data[:6] == b"SLEMB\x00" and len(data) == 6 + 10 + 512 * 32 * 8
    again = LocalEmbedder.load(path)
    np.testing.assert_array_equal(again.params, emb.params)
    with pytest.raises(ValueError):
        LocalEmbedder.from_bytes(b"XXXXXX" + data[6:])
    with pytest.raises(ValueError):
        LocalEmbedder.from_bytes(data[:-8])
