import numpy as np
import pytest

from scripts.dpfair.errors import ModelError
from scripts.dpfair.model import (
    ModelParams,
    NeuMFLayout,
    Triple,
    batch_grads,
    bpr_loss,
    init_params,
    load_checkpoint,
    per_example_grad,
    save_checkpoint,
    score,
    score_all,
    score_mf,
    score_neumf,
)

FD_STEP = 1e-6


def _numeric_grad(params: ModelParams, triple: Triple, lam: float):
    """Central differences of the BPR summand w.r.t. z_u, z_v, z_v' and W."""

    def loss_after(array, index, delta):
        p = params.copy()
        getattr(p, array)[index] += delta
        return bpr_loss(p, triple, lam)

    def central(array, index):
        return (loss_after(array, index, FD_STEP) - loss_after(array, index, -FD_STEP)) / (2 * FD_STEP)

    d = params.d
    user = np.array([central("U", (triple.u, j)) for j in range(d)])
    pos = np.array([central("V", (triple.v, j)) for j in range(d)])
    neg = np.array([central("V", (triple.v_neg, j)) for j in range(d)])
    w = np.array([central("W", j) for j in range(params.W.size)])
    return user, np.stack([pos, neg]), w


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


@pytest.mark.parametrize("scorer", ["mf", "neumf"])
def test_per_example_gradient_matches_finite_differences(scorer):
    rng = np.random.default_rng(2024 if scorer == "mf" else 2025)
    for _ in range(100):
        d = int(rng.choice([2, 4, 6]))
        n1, n2 = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        params = init_params(n1, n2, d, scorer, rng)
        # move off the initial scale so the loss is not flat
        params.U *= rng.uniform(0.5, 2.0)
        params.V *= rng.uniform(0.5, 2.0)
        u = int(rng.integers(n1))
        v, v_neg = (int(x) for x in rng.choice(n2, size=2, replace=False))
        lam = float(rng.choice([0.0, 1e-3, 0.1]))
        triple = Triple(u, v, v_neg)
        grad = per_example_grad(params, triple, lam)
        user, item, w = _numeric_grad(params, triple, lam)
        assert _relative_error(grad.user_part, user) < 1e-4
        assert _relative_error(grad.item_part, item) < 1e-4
        if scorer == "neumf":
            assert _relative_error(grad.w_part, w) < 1e-4
        else:
            assert grad.w_part.size == 0


def test_bpr_loss_is_finite_for_extreme_margins():
    params = ModelParams(np.array([[1e4]]), np.array([[1e4], [-1e4]]), np.zeros(0))
    assert bpr_loss(params, Triple(0, 0, 1), 0.0) == pytest.approx(0.0, abs=1e-12)
    assert bpr_loss(params, Triple(0, 1, 0), 0.0) == pytest.approx(2e8)


def test_mf_loss_at_zero_margin_is_log_two():
    params = ModelParams(np.zeros((1, 2)), np.zeros((2, 2)), np.zeros(0))
    assert bpr_loss(params, Triple(0, 0, 1), 0.0) == pytest.approx(np.log(2.0))


def test_batch_grads_agree_with_single_examples(rng):
    params = init_params(4, 7, 4, "neumf", rng)
    users, pos, neg = np.array([0, 1, 3, 0]), np.array([1, 2, 6, 5]), np.array([0, 4, 2, 3])
    batch = batch_grads(params, users, pos, neg, 0.01)
    for i in range(len(users)):
        single = per_example_grad(params, Triple(users[i], pos[i], neg[i]), 0.01)
        np.testing.assert_allclose(batch.user[i], single.user_part)
        np.testing.assert_allclose(batch.pos[i], single.item_part[0])
        np.testing.assert_allclose(batch.w[i], single.w_part)


class TestScoring:
    def test_score_all_matches_pointwise_scores(self, rng):
        for scorer in ("mf", "neumf"):
            params = init_params(3, 9, 6, scorer, rng)
            all_scores = score_all(params, 2)
            np.testing.assert_allclose(all_scores, [score(params, 2, v) for v in range(9)])

    def test_mf_is_a_dot_product(self, rng):
        params = init_params(2, 3, 5, "mf", rng)
        assert score_mf(params, 1, 2) == pytest.approx(float(params.U[1] @ params.V[2]))

    def test_index_out_of_range(self, rng):
        params = init_params(2, 3, 2, "mf", rng)
        with pytest.raises(ModelError):
            score(params, 2, 0)
        with pytest.raises(ModelError):
            score_neumf(params, 0, 0)

    def test_triple_with_equal_items(self, rng):
        with pytest.raises(ModelError):
            bpr_loss(init_params(1, 3, 2, "mf", rng), Triple(0, 1, 1), 0.0)


def test_neumf_layout_sizes():
    layout = NeuMFLayout(6)
    assert (layout.h1, layout.h2) == (6, 3)
    assert layout.size == 6 * 12 + 6 + 3 * 6 + 3 + 6 + 3 + 1
    W = np.arange(layout.size, dtype=float)
    np.testing.assert_array_equal(layout.pack(layout.unpack(W)), W)


def test_params_reject_mismatched_widths():
    with pytest.raises(ModelError):
        ModelParams(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros(0))
    with pytest.raises(ModelError):
        ModelParams(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros(5), "neumf")


def test_checkpoint_roundtrip_restores_rng(tmp_path, rng):
    params = init_params(3, 4, 4, "neumf", rng)
    stream = np.random.default_rng(7)
    stream.random(3)
    path = save_checkpoint(params, tmp_path / "ckpt", rng=stream, extra={"step": 3})
    loaded, meta, restored = load_checkpoint(path)
    np.testing.assert_array_equal(loaded.W, params.W)
    assert meta["scorer"] == "neumf" and meta["d1"] == 4 and meta["extra"] == {"step": 3}
    assert restored.random() == stream.random()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "nothing")
