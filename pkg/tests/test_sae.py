import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from popsteer import sae as S
from popsteer import tape as T

CFG = S.SaeConfig(input_dim=6, scale=4, k=5, aux_k=4, gamma=0.25, dtype="float64", seed=3)

int_matrix = hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 20)),
                        elements=st.integers(-2, 2).map(float))


@given(int_matrix, st.integers(1, 20))
def test_topact_exact_k_and_ties(z, k):
    k = min(k, z.shape[1])
    mask = S.topact_mask(z, k)
    assert (mask.sum(axis=1) == k).all()
    for row, m in zip(z, mask):
        ref = np.lexsort((np.arange(len(row)), -row))[:k]
        assert sorted(np.flatnonzero(m).tolist()) == sorted(ref.tolist())
    a = S.top_act(z, k)
    assert np.array_equal(a[mask], z[mask]) and (a[~mask] == 0).all()


def test_topact_all_equal_picks_lowest_indices():
    assert np.flatnonzero(S.topact_mask(np.zeros((1, 8)), 3)[0]).tolist() == [0, 1, 2]


def test_topact_rejects_k_above_n():
    with pytest.raises(ValueError):
        S.top_act(np.zeros((1, 3)), 4)


def test_init_unit_decoder_columns_and_tied_encoder():
    p = S.init_sae(CFG, np.ones((4, 6)))
    assert np.allclose(np.linalg.norm(p.W_dec, axis=0), 1)
    assert np.array_equal(p.W_enc, p.W_dec) and np.allclose(p.b_pre, 1)


def test_reconstruct_shape_and_dimension_check(rng):
    p = S.init_sae(CFG)
    assert S.reconstruct(p, rng.normal(size=(3, 6))).shape == (3, 6)
    with pytest.raises(S.DimensionMismatch):
        S.encode(p, np.zeros((2, 5)))


def _perturbed(rng):
    p = S.init_sae(CFG, rng.normal(size=(10, 6)))
    return S.SaeParams(CFG, p.W_enc + 0.3 * rng.normal(size=p.W_enc.shape), p.W_dec, p.b_pre + 0.1)


def test_gradient_check_recon_and_aux(rng):
    p = _perturbed(rng)
    x = rng.normal(size=(7, 6))
    dead = np.zeros(CFG.n_hidden, dtype=bool)
    dead[::3] = True
    residual = x - S.reconstruct(p, x)
    _, grads = S.sae_loss_and_grads(p, x, dead, residual=residual)
    arrays = p.arrays()

    def loss():
        vars_ = {k: T.const(v) for k, v in arrays.items()}
        recon, aux, _, _ = S._loss_graph(vars_, x, dead, CFG.k, CFG.aux_k_max, residual)
        return float(recon.value) + CFG.gamma * float(aux.value)

    eps = 1e-6
    for name, arr in arrays.items():
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            hi = loss()
            arr[i] = old - eps
            lo = loss()
            arr[i] = old
            fd[i] = (hi - lo) / (2 * eps)
        err = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(grads[name]) + np.linalg.norm(fd), 1e-6)
        assert err < 1e-4, name


def test_aux_residual_is_detached(rng):
    """Aux gradients reach only the dead neurons' encoder/decoder columns, never through x_hat."""
    p = _perturbed(rng)
    x = rng.normal(size=(5, 6))
    dead = np.zeros(CFG.n_hidden, dtype=bool)
    dead[-4:] = True
    z = S.encode(p, x)
    live_active = S.topact_mask(z, CFG.k).any(axis=0) & ~dead
    _, g = S.sae_loss_and_grads(p, x, dead, parts=("aux",))
    assert np.all(g["W_dec"][:, live_active] == 0)
    assert np.all(g["W_enc"][:, ~dead] == 0)


def test_no_dead_means_no_aux(rng):
    p = S.init_sae(CFG)
    recon, aux = S.sae_loss(p, rng.normal(size=(4, 6)))
    assert aux == 0.0 and recon > 0


def test_aux_mask_limited_to_dead(rng):
    z = rng.normal(size=(3, 10))
    dead = np.zeros(10, dtype=bool)
    dead[[1, 4]] = True
    m = S.aux_mask(z, dead, 5)
    assert (m.sum(axis=1) == 2).all() and not m[:, ~dead].any()


def test_recon_loss_is_mean_squared_norm(rng):
    p = S.init_sae(CFG)
    x = rng.normal(size=(4, 6))
    recon, _ = S.sae_loss(p, x)
    assert recon == pytest.approx(np.mean(np.sum((x - S.reconstruct(p, x)) ** 2, axis=1)))


def test_training_reduces_loss_and_counts_dead(rng):
    X = rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    cfg = dataclasses.replace(CFG, k=2, batch=50, epochs=40, dead_threshold=100)
    p, rep = S.train_sae(X, cfg)
    assert rep.recon_loss[-1] < rep.recon_loss[0]
    assert rep.n_dead == int((rep.counters > cfg.dead_threshold).sum())
    p2, _ = S.train_sae(X, cfg)
    assert np.array_equal(p.W_dec, p2.W_dec)


def test_cosine_similarity():
    a = np.array([[1.0, 0.0], [1.0, 1.0]])
    assert S.cosine_similarity(a, 2 * a) == pytest.approx([1.0, 1.0])
    assert S.cosine_similarity(a[:1], np.array([[0.0, 3.0]]))[0] == 0.0


def test_reconstruction_report_on_toy(toy_sae, toy_encoder, toy_split):
    from popsteer.encoder import encode_batch

    hist = toy_split.history("test")
    X = encode_batch(toy_encoder, hist)
    rep = S.reconstruction_report(toy_sae, X, toy_encoder.item_embeddings, hist, toy_split.test)
    assert 0 < rep.cosine_mean <= 1 and rep.ndcg_orig > 0
    assert rep.ndcg_rel_drop == pytest.approx(abs(rep.ndcg_recon - rep.ndcg_orig) / rep.ndcg_orig)


def test_config_validation():
    with pytest.raises(ValueError):
        dataclasses.replace(CFG, k=CFG.n_hidden + 1).validate()


# ------------------------------------------------------------------ small closed-form cases


def _hand_params():
    cfg = S.SaeConfig(input_dim=2, scale=2, k=1, aux_k=1, dtype="float64")
    W_enc = np.array([[1.0, -1.0, 0.5, 2.0], [0.0, 2.0, 1.0, -1.0]])
    W_dec = np.array([[1.0, 0.0, 0.6, 0.8], [0.0, 1.0, 0.8, -0.6]])
    return S.SaeParams(cfg, W_enc, W_dec, np.array([0.5, -0.5]))


def test_encode_at_bias_is_zero():
    p = _hand_params()
    assert not S.encode(p, p.b_pre).any()


def test_encode_decode_match_naive_loops(rng):
    p = _hand_params()
    x = rng.normal(size=2)
    z = [sum((x[i] - p.b_pre[i]) * p.W_enc[i, j] for i in range(2)) for j in range(4)]
    assert np.allclose(S.encode(p, x), z)
    a = rng.normal(size=4)
    xh = [sum(a[j] * p.W_dec[i, j] for j in range(4)) + p.b_pre[i] for i in range(2)]
    assert np.allclose(S.decode(p, a), xh)


def test_encode_is_affine(rng):
    p = _hand_params()
    x1, x2, t = rng.normal(size=2), rng.normal(size=2), 0.3
    assert np.allclose(S.encode(p, t * x1 + (1 - t) * x2), t * S.encode(p, x1) + (1 - t) * S.encode(p, x2))


def test_top_act_closed_forms():
    assert S.top_act(np.array([3.0, 1.0, 2.0, 0.0]), 2).tolist() == [3.0, 0.0, 2.0, 0.0]
    assert S.top_act(np.array([2.0, 2.0, 1.0]), 1).tolist() == [2.0, 0.0, 0.0]
    z = np.array([-1.0, 4.0, 0.5])
    assert np.array_equal(S.top_act(z, 3), z)


def test_decode_zero_and_basis():
    p = _hand_params()
    assert np.array_equal(S.decode(p, np.zeros(4)), p.b_pre)
    for j in range(4):
        assert np.allclose(S.decode(p, np.eye(4)[j]), p.W_dec[:, j] + p.b_pre)


def test_perfect_reconstruction_has_zero_loss():
    # x = b_pre gives z = 0, so x_hat = b_pre exactly
    p = _hand_params()
    recon, aux = S.sae_loss(p, np.stack([p.b_pre, p.b_pre]))
    assert recon == 0.0 and aux == 0.0


def test_aux_loss_matches_hand_oracle():
    p = _hand_params()
    x = np.array([[2.0, 1.0]])
    dead = np.array([False, False, False, True])
    xc = x[0] - p.b_pre
    z = xc @ p.W_enc
    j = int(np.argmax(z))
    a = np.zeros(4)
    a[j] = z[j]
    e = x[0] - (p.W_dec @ a + p.b_pre)
    zp = np.zeros(4)
    zp[3] = z[3]
    e_hat = p.W_dec @ zp
    recon, aux = S.sae_loss(p, x, dead)
    assert recon == pytest.approx(e @ e)
    assert aux == pytest.approx((e - e_hat) @ (e - e_hat))


def test_zero_epochs_returns_initialization(rng):
    X = rng.normal(size=(40, 6))
    cfg = dataclasses.replace(CFG, epochs=0)
    p, rep = S.train_sae(X, cfg)
    warm = X[np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,))).permutation(40)]
    init = S.init_sae(cfg, warm)
    assert all(np.array_equal(p.arrays()[k], init.arrays()[k]) for k in init.arrays())
    assert rep.steps == 0
