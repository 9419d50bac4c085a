import dataclasses

import numpy as np
import pytest

from popsteer import encoder as E
from popsteer import tape as T
from popsteer.encoder import PAD

from .conftest import TOY_ENCODER

GRAD_CFG = E.EncoderConfig(hidden_size=8, layers=2, heads=2, ffn_size=12, max_seq_len=5, dropout=0.0,
                           attn_dropout=0.0, init_std=0.3, dtype="float64", seed=1)


def grad_rel_err(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-6)


def test_gradient_check_all_parameters():
    params = E.init_encoder(GRAD_CFG, 11)
    inputs = np.array([[PAD, PAD, 3, 4, 5], [1, 2, 3, 9, 10], [PAD, PAD, PAD, PAD, 7]])
    targets = np.array([[PAD, PAD, 4, 5, 6], [2, 3, 9, 10, 0], [PAD, PAD, PAD, PAD, 8]])
    _, grads = E.compute_loss_and_grads(params, inputs, targets)

    def loss():
        vars_ = {k: T.const(v) for k, v in params.arrays.items()}
        h = E._forward(vars_, GRAD_CFG, inputs)
        mask = targets.reshape(-1) != PAD
        rows = h.value.reshape(-1, GRAD_CFG.hidden_size)[mask]
        return float(T.tied_softmax_xent(T.const(rows), vars_["item_emb"], targets.reshape(-1)[mask]).value)

    eps = 1e-6
    for name, arr in params.arrays.items():
        fd = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            hi = loss()
            arr[i] = old - eps
            lo = loss()
            arr[i] = old
            fd[i] = (hi - lo) / (2 * eps)
        assert grad_rel_err(grads[name], fd) < 1e-4, name


def test_causality():
    params = E.init_encoder(GRAD_CFG, 11)
    ids = np.array([[1, 2, 3, 4, 5]])
    h1 = E.hidden_states(params, ids)
    ids2 = ids.copy()
    ids2[0, 3:] = [9, 10]
    h2 = E.hidden_states(params, ids2)
    assert np.array_equal(h1[0, :3], h2[0, :3])
    assert not np.allclose(h1[0, 3:], h2[0, 3:])


def test_truncation_keeps_most_recent():
    params = E.init_encoder(GRAD_CFG, 11)
    long = np.arange(1, 10)
    assert np.array_equal(E.encode_user(params, long), E.encode_user(params, long[-GRAD_CFG.max_seq_len:]))


def test_padding_does_not_leak():
    params = E.init_encoder(GRAD_CFG, 11)
    a = E.encode_batch(params, [np.array([3, 4])])
    b = E.encode_batch(params, [np.array([3, 4]), np.arange(1, 6)])
    assert np.array_equal(a[0], b[0])


def test_pad_sequences_left():
    out = E.pad_sequences([[1, 2], [3, 4, 5, 6]], 3)
    assert out.tolist() == [[PAD, 1, 2], [4, 5, 6]]


def test_empty_sequence_rejected():
    params = E.init_encoder(GRAD_CFG, 11)
    with pytest.raises(E.EmptySequence):
        E.encode_user(params, [])


def test_eval_mode_deterministic_and_train_mode_stochastic():
    cfg = dataclasses.replace(GRAD_CFG, dropout=0.5, attn_dropout=0.5)
    params = E.init_encoder(cfg, 11)
    seq = np.array([1, 2, 3])
    assert np.array_equal(E.encode_user(params, seq), E.encode_user(params, seq))
    rng = np.random.default_rng(0)
    assert not np.array_equal(E.encode_user(params, seq, True, rng), E.encode_user(params, seq, True, rng))


def test_init_seeded():
    a, b = E.init_encoder(GRAD_CFG, 11), E.init_encoder(GRAD_CFG, 11)
    assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
    c = E.init_encoder(dataclasses.replace(GRAD_CFG, seed=2), 11)
    assert not np.array_equal(a.arrays["item_emb"], c.arrays["item_emb"])


@pytest.mark.parametrize("kw", [{"hidden_size": 7}, {"max_seq_len": 0}, {"dropout": 1.0}, {"lr": -1.0}])
def test_invalid_config(kw):
    with pytest.raises(E.InvalidConfig):
        dataclasses.replace(GRAD_CFG, **kw).validate()


def test_training_windows_cover_each_target_once():
    seqs = [np.arange(100, 113), np.array([1]), np.array([5, 6])]
    inputs, targets = E.training_windows(seqs, 4)
    got = sorted(targets[targets != PAD].tolist())
    assert got == sorted(list(range(101, 113)) + [6])
    # each input is the target shifted by one position
    for x, y in zip(inputs, targets):
        m = y != PAD
        assert np.all(x[m] != PAD)


def test_score_all_shape(toy_encoder, toy_split):
    x = E.encode_batch(toy_encoder, toy_split.train[:3])
    assert E.score_all(toy_encoder, x).shape == (3, toy_split.n_items)


def test_init_std_at_default_width():
    cfg = E.EncoderConfig(hidden_size=64, seed=3)
    w = E.init_encoder(cfg, 200).arrays["l0.wq"].ravel()[:10_000]
    assert 0.018 <= w.std() <= 0.022


def test_score_all_identities():
    params = E.init_encoder(GRAD_CFG, 5)
    emb = params.item_embeddings
    for j in range(5):
        assert np.isclose(E.score_all(params, emb[j])[j], emb[j] @ emb[j])
    assert not E.score_all(params, np.zeros(GRAD_CFG.hidden_size)).any()
    x = np.random.default_rng(0).normal(size=GRAD_CFG.hidden_size)
    naive = [sum(x[c] * emb[i, c] for c in range(GRAD_CFG.hidden_size)) for i in range(5)]
    assert np.allclose(E.score_all(params, x), naive)


def test_length_one_sequence():
    params = E.init_encoder(GRAD_CFG, 11)
    assert E.encode_user(params, [3]).shape == (GRAD_CFG.hidden_size,)


def test_duplicated_example_gradient():
    # the loss is a mean over positions, so compare summed gradients
    params = E.init_encoder(GRAD_CFG, 11)
    x, y = np.array([[PAD, 1, 2, 3, 4]]), np.array([[PAD, 2, 3, 4, 5]])
    n = int((y != PAD).sum())
    _, single = E.compute_loss_and_grads(params, x, y)
    _, double = E.compute_loss_and_grads(params, np.repeat(x, 2, 0), np.repeat(y, 2, 0))
    for k in single:
        assert np.allclose(2 * n * double[k], 2 * (n * single[k]), rtol=1e-10, atol=1e-14), k


def test_zero_weight_init_is_finite():
    params = E.init_encoder(dataclasses.replace(GRAD_CFG, init_std=0.0), 11)
    loss, grads = E.compute_loss_and_grads(params, np.array([[PAD, 1, 2, 3, 4]]), np.array([[PAD, 2, 3, 4, 5]]))
    assert np.isfinite(loss) and np.isclose(loss, np.log(11))
    assert all(np.isfinite(g).all() for g in grads.values())


def test_lr_zero_leaves_parameters(toy_split):
    cfg = dataclasses.replace(TOY_ENCODER, lr=0.0, max_epochs=1)
    params, _ = E.train_encoder(toy_split, cfg)
    init = E.init_encoder(cfg, toy_split.n_items)
    assert all(np.array_equal(params.arrays[k], init.arrays[k]) for k in init.arrays)


def test_loss_decreases_on_toy(toy_split):
    cfg = dataclasses.replace(TOY_ENCODER, dropout=0.0, attn_dropout=0.0)
    params = E.init_encoder(cfg, toy_split.n_items)
    inputs, targets = E.training_windows(toy_split.train, cfg.max_seq_len)
    opt = T.Adam(params.arrays, lr=5e-3)
    first, _ = E.compute_loss_and_grads(params, inputs, targets)
    for _ in range(30):
        loss, grads = E.compute_loss_and_grads(params, inputs, targets)
        opt.step(params.arrays, grads)
    assert loss < first - 0.1


def test_learns_successor_sequences():
    # next item is always (previous + 1) mod m; popularity alone cannot solve it
    from popsteer import data as D

    rng = np.random.default_rng(0)
    m, recs = 40, []
    for u in range(200):
        start, n = rng.integers(m), rng.integers(10, 20)
        recs += [(f"u{u}", f"i{(start + t) % m}", t) for t in range(n)]
    sp = D.leave_one_out_split(D.InteractionLog.from_records(recs))
    cfg = dataclasses.replace(TOY_ENCODER, max_epochs=15, patience=15, dropout=0.0, attn_dropout=0.0)
    params, _ = E.train_encoder(sp, cfg)
    assert E.evaluate_ndcg(params, sp.history("test"), sp.targets("test")) > 0.9


def test_resume_matches_uninterrupted(tmp_path, toy_split):
    cfg = dataclasses.replace(TOY_ENCODER, max_epochs=3, patience=10)
    full, hist = E.train_encoder(toy_split, cfg)
    state = tmp_path / "state.npz"
    E.train_encoder(toy_split, dataclasses.replace(cfg, max_epochs=1), state_path=state)
    resumed, hist2 = E.train_encoder(toy_split, cfg, state_path=state, resume=True)
    assert hist.val_ndcg == hist2.val_ndcg
    assert all(np.array_equal(full.arrays[k], resumed.arrays[k]) for k in full.arrays)


def test_training_is_deterministic(toy_split, toy_encoder):
    again, _ = E.train_encoder(toy_split, TOY_ENCODER)
    assert all(np.array_equal(again.arrays[k], toy_encoder.arrays[k]) for k in again.arrays)
