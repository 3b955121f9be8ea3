import math

import numpy as np
import pytest

from actprompt.adapter import LinearAdapter, TrainConfig, accuracy, ce_loss, grad, train
from actprompt.errors import BadParams, FormatError, NonFiniteLoss, UnknownLabel
from actprompt.inference import CategoryBank
from actprompt.store import EmbeddingMatrix, l2_normalize, save_matrix
from actprompt.synth import SynthParams, synth_generate

# frames shifted by a random rotation; the frozen embeddings classify poorly
SEPARABLE = SynthParams(frame_noise=1.0, shift=0.8, seed=7)


def random_problem(rng, d=8, K=3, n_videos=3, ragged=True):
    if ragged:
        sizes = rng.integers(1, 6, size=K)
    else:
        sizes = [int(rng.integers(1, 6))] * K
    bank = CategoryBank([f"c{k}" for k in range(K)], [l2_normalize(rng.standard_normal((n, d))) for n in sizes])
    vids = [rng.standard_normal((int(rng.integers(1, 5)), d)) for _ in range(n_videos)]
    labels = [int(x) for x in rng.integers(0, K, size=n_videos)]
    ad = LinearAdapter(np.eye(d) + 0.3 * rng.standard_normal((d, d)), 0.1 * rng.standard_normal(d))
    return vids, labels, bank, ad


def min_gap(vids, bank, ad):
    """Smallest gap between the best and runner-up entry of any max taken by the score."""
    gaps = [np.inf]
    for x in vids:
        u = ad.raw(x)
        u = u / np.linalg.norm(u, axis=1, keepdims=True)
        for c in bank.prompts:
            g = u @ c.data.astype(np.float64).T
            for axis in (0, 1):
                if g.shape[axis] > 1:
                    s = np.sort(g, axis=axis)
                    top = np.take(s, -1, axis=axis) - np.take(s, -2, axis=axis)
                    gaps.append(top.min())
    return min(gaps)


def numeric_grad(vids, labels, bank, ad, tau, h=1e-4):
    gw = np.zeros_like(ad.weight)
    for a in range(ad.dim):
        for b in range(ad.dim):
            p, m = ad.copy(), ad.copy()
            p.weight[a, b] += h
            m.weight[a, b] -= h
            gw[a, b] = (ce_loss(vids, labels, bank, p, tau) - ce_loss(vids, labels, bank, m, tau)) / (2 * h)
    gb = np.zeros_like(ad.bias)
    for a in range(ad.dim):
        p, m = ad.copy(), ad.copy()
        p.bias[a] += h
        m.bias[a] -= h
        gb[a] = (ce_loss(vids, labels, bank, p, tau) - ce_loss(vids, labels, bank, m, tau)) / (2 * h)
    return gw, gb


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


def non_tie_points(seed, count, **kw):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        prob = random_problem(rng, **kw)
        if min_gap(prob[0], prob[2], prob[3]) > 1e-2:
            out.append(prob)
    return out


# loss


def two_category_bank():
    c0 = np.array([[0.9, math.sqrt(1 - 0.81), 0.0]])
    c1 = np.array([[0.1, 0.0, math.sqrt(1 - 0.01)]])
    return CategoryBank(["a", "b"], [EmbeddingMatrix(c0, True), EmbeddingMatrix(c1, True)])


def test_loss_two_categories():
    bank = two_category_bank()
    frames = [np.array([[1.0, 0.0, 0.0]])]
    loss = ce_loss(frames, ["a"], bank, tau=1.0)
    assert loss == pytest.approx(0.3711, abs=1e-4)
    # prompts are stored as float32, so the scores are 0.9 and 0.1 to ~1e-8
    assert loss == pytest.approx(math.log1p(math.exp(-0.8)), abs=1e-7)


def test_loss_single_category_is_zero():
    rng = np.random.default_rng(0)
    bank = CategoryBank(["only"], [l2_normalize(rng.standard_normal((4, 8)))])
    vids = [rng.standard_normal((3, 8)) for _ in range(5)]
    assert ce_loss(vids, ["only"] * 5, bank) == 0.0
    _, gw, gb = grad(vids, ["only"] * 5, bank, LinearAdapter.identity(8))
    assert not gw.any() and not gb.any()


def test_loss_batch_duplication():
    rng = np.random.default_rng(1)
    vids, labels, bank, ad = random_problem(rng, n_videos=4)
    assert ce_loss(vids * 2, labels * 2, bank, ad) == ce_loss(vids, labels, bank, ad)


def test_identity_reproduces_frozen_loss():
    rng = np.random.default_rng(2)
    vids, labels, bank, _ = random_problem(rng, n_videos=6)
    assert ce_loss(vids, labels, bank, LinearAdapter.identity(8), 0.07) == ce_loss(vids, labels, bank, None, 0.07)


def test_unknown_label():
    rng = np.random.default_rng(3)
    vids, _, bank, _ = random_problem(rng, n_videos=1)
    with pytest.raises(UnknownLabel):
        ce_loss(vids, ["zzz"], bank)
    with pytest.raises(UnknownLabel):
        ce_loss(vids, [7], bank)


# gradient


@pytest.mark.parametrize("ragged", [True, False])
def test_gradient_matches_finite_differences(ragged):
    worst = 0.0
    for vids, labels, bank, ad in non_tie_points(11 + ragged, 20, ragged=ragged):
        _, gw, gb = grad(vids, labels, bank, ad, tau=0.5)
        nw, nb = numeric_grad(vids, labels, bank, ad, 0.5)
        worst = max(worst, rel_err(gw, nw).max(), rel_err(gb, nb).max())
    assert worst < 1e-4


def test_gradient_without_bias():
    (vids, labels, bank, ad), = non_tie_points(5, 1)
    ad = LinearAdapter(ad.weight)
    _, gw, gb = grad(vids, labels, bank, ad, tau=0.5)
    assert gb is None
    nw, _ = numeric_grad(vids, labels, bank, LinearAdapter(ad.weight, np.zeros(8)), 0.5)
    assert rel_err(gw, nw).max() < 1e-4


def test_batch_gradient_is_mean_of_samples():
    rng = np.random.default_rng(4)
    vids, labels, bank, ad = random_problem(rng, n_videos=5)
    _, gw, gb = grad(vids, labels, bank, ad)
    parts = [grad([v], [y], bank, ad) for v, y in zip(vids, labels)]
    np.testing.assert_allclose(gw, np.mean([p[1] for p in parts], axis=0), atol=1e-7, rtol=0)
    np.testing.assert_allclose(gb, np.mean([p[2] for p in parts], axis=0), atol=1e-7, rtol=0)


# training


@pytest.fixture(scope="module")
def separable():
    ds = synth_generate(SEPARABLE)
    recs, labels = ds.subset("train")
    return recs, labels, ds.category_bank()


def test_training_reaches_high_accuracy(separable):
    recs, labels, bank = separable
    assert accuracy(recs, labels, bank) < 0.5
    result = train(recs, labels, bank, TrainConfig(learning_rate=0.1, epochs=30, seed=0))
    assert len(result.losses) == 31
    assert result.losses[0] == ce_loss(recs, labels, bank, None, 0.07)
    assert accuracy(recs, labels, bank, result.adapter) >= 0.95


def test_training_is_bitwise_reproducible(separable):
    recs, labels, bank = separable
    cfg = TrainConfig(learning_rate=0.1, epochs=3, seed=5)
    a = train(recs, labels, bank, cfg)
    b = train(recs, labels, bank, cfg)
    assert a.adapter.weight.tobytes() == b.adapter.weight.tobytes()
    assert a.adapter.bias.tobytes() == b.adapter.bias.tobytes()
    assert a.losses == b.losses
    c = train(recs, labels, bank, TrainConfig(learning_rate=0.1, epochs=3, seed=6))
    assert c.adapter.weight.tobytes() != a.adapter.weight.tobytes()


def test_zero_learning_rate_is_flat(separable):
    recs, labels, bank = separable
    r = train(recs, labels, bank, TrainConfig(learning_rate=0.0, epochs=3))
    assert np.array_equal(r.adapter.weight, np.eye(bank.dim))
    assert not r.adapter.bias.any()
    assert len(set(r.losses)) == 1


def test_small_lr_loss_non_increasing(separable):
    recs, labels, bank = separable
    r = train(recs, labels, bank, TrainConfig(learning_rate=0.01, epochs=5, seed=1))
    assert all(b <= a for a, b in zip(r.losses, r.losses[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(separable):
    recs, labels, bank = separable
    with pytest.raises(NonFiniteLoss):
        train(recs[:8], labels[:8], bank, TrainConfig(learning_rate=1e308, epochs=2, weight_decay=1.0))


def test_loss_curve_csv(separable):
    recs, labels, bank = separable
    r = train(recs[:10], labels[:10], bank, TrainConfig(epochs=2))
    lines = r.curve_csv().splitlines()
    assert lines[0] == "epoch,mean_loss"
    assert [int(line.split(",")[0]) for line in lines[1:]] == [0, 1, 2]
    assert float(lines[1].split(",")[1]) == r.losses[0]


def test_train_config_validation():
    with pytest.raises(BadParams):
        TrainConfig(temperature=0)
    with pytest.raises(BadParams):
        TrainConfig(batch_size=0)
    with pytest.raises(BadParams):
        TrainConfig(learning_rate=-1)


# persistence


def test_adapter_save_load(tmp_path):
    rng = np.random.default_rng(8)
    ad = LinearAdapter(rng.standard_normal((6, 6)), rng.standard_normal(6))
    ad.save(tmp_path / "a.apeb")
    back = LinearAdapter.load(tmp_path / "a.apeb")
    np.testing.assert_array_equal(back.weight, ad.weight.astype(np.float32))
    np.testing.assert_array_equal(back.bias, ad.bias.astype(np.float32))
    nb = LinearAdapter(ad.weight)
    nb.save(tmp_path / "b.apeb")
    assert LinearAdapter.load(tmp_path / "b.apeb").bias is None


def test_embedding_file_is_not_an_adapter(tmp_path):
    save_matrix(EmbeddingMatrix(np.eye(3)), tmp_path / "m.apeb")
    with pytest.raises(FormatError):
        LinearAdapter.load(tmp_path / "m.apeb")


def test_apply_normalizes():
    rng = np.random.default_rng(9)
    ad = LinearAdapter(2 * np.eye(4), np.ones(4))
    out = ad.apply(l2_normalize(rng.standard_normal((3, 4))))
    assert out.normalized
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1, atol=1e-6)
