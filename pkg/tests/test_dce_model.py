import copy

import numpy as np
import pytest

from dce import dce_model as dm
from dce import numcore as nc
from dce.errors import AlignmentError, ConfigError, DimensionError
from dce.synthgen import CustomerHistory, Dataset, Session, calendar_indices

from conftest import random_params

MINI = dict(hidden=4, mlp_hidden=4, out=3, d_c=4, k_cal=2)


def mini_history(rng, n, F=6, d=4, t0=1_620_000_000):
    sessions, t = [], t0
    for _ in range(n):
        sessions.append(Session(0, t, [(0, t), (1, t + 10)], (4,)))
        t += int(rng.integers(3600, 5 * 86400))
    return CustomerHistory(0, sessions, rng.normal(size=(n, F))), rng.normal(size=(n, d))


def mini_model(mode, seed, dtype=np.longdouble):
    rng = np.random.default_rng(seed)
    model = dm.DceModel.init(4, 6, dm.DceConfig(mode=mode, seed=seed, **MINI))
    model.params = random_params(model.params, rng, scale=0.8, lstm_scale=0.5, dtype=dtype)
    return model, rng


@pytest.mark.parametrize("mode", dm.MODES)
@pytest.mark.parametrize("seed", range(10))
def test_end_to_end_gradcheck_two_sessions(mode, seed):
    # some recurrent-weight gradients are ~1e-12; in float64 the central
    # difference of the loss is pure roundoff there, so check in long double
    model, rng = mini_model(mode, seed)
    h, e = mini_history(rng, 2)
    err = nc.grad_check(lambda p: dm.batch_objective(model, [h], [e], p), model.params)
    assert err < 1e-4


@pytest.mark.parametrize("mode", dm.MODES)
def test_single_step_gradcheck_float64(mode):
    model, rng = mini_model(mode, 11, dtype=np.float64)
    h, e = mini_history(rng, 1)
    err = nc.grad_check(lambda p: dm.batch_objective(model, [h], [e], p), model.params)
    assert err < 1e-4


def test_truncated_windows_equal_full_gradient_when_long_enough():
    model, rng = mini_model(dm.FIVE_STREAM, 3, dtype=np.float64)
    h, e = mini_history(rng, 5)
    model.cfg.l_max = 64
    l1, g1 = dm.batch_objective(model, [h], [e])
    model.cfg.l_max = 2
    l2, g2 = dm.batch_objective(model, [h], [e])
    assert l1 == pytest.approx(l2, abs=1e-14)
    assert any(np.max(np.abs(g1[k] - g2[k])) > 1e-9 for k in g1)
    model.cfg.l_max = 5
    _, g3 = dm.batch_objective(model, [h], [e])
    for k in g1:
        np.testing.assert_allclose(g3[k], g1[k], rtol=0, atol=1e-14)


def test_zero_parameters_give_zero_outputs():
    model = dm.DceModel.init(4, 6, dm.DceConfig(**MINI))
    model.params = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng(0)
    feats = dm.SessionStepFeatures(rng.normal(size=4), 5000.0, 3, 2, 11, rng.normal(size=6))
    state, c, s_hat = dm.step(model, dm.init_state(model), feats)
    np.testing.assert_array_equal(c, 0)
    np.testing.assert_array_equal(s_hat, 0)
    for h, _ in state.values():
        np.testing.assert_array_equal(h, 0)


def test_init_state_shapes_and_zero():
    model = dm.DceModel.init(4, 6, dm.DceConfig(**MINI))
    a, b = dm.init_state(model), dm.init_state(model)
    assert set(a) == set(dm.STREAMS)
    for k in a:
        assert a[k][0].shape == (4,) and a[k][1].shape == (4,)
        assert not a[k][0].any() and np.array_equal(a[k][1], b[k][1])
    fused = dm.DceModel.init(4, 6, dm.DceConfig(mode=dm.FUSED_VANILLA, **MINI))
    assert set(dm.init_state(fused)) == {"v"}


@pytest.mark.parametrize("mode", dm.MODES)
def test_step_is_pure_and_contract(mode):
    model = dm.DceModel.init(4, 6, dm.DceConfig(mode=mode, **MINI))
    rng = np.random.default_rng(1)
    feats = dm.SessionStepFeatures(rng.normal(size=4), 7200.0, 0, 4, 0, rng.normal(size=6))
    s0 = dm.init_state(model)
    a = dm.step(model, s0, feats)
    b = dm.step(model, s0, feats)
    assert a[1].shape == (model.d_c,) and a[2].shape == (model.d,)
    assert a[1].tobytes() == b[1].tobytes() and a[2].tobytes() == b[2].tobytes()


def test_step_dimension_errors():
    model = dm.DceModel.init(4, 6, dm.DceConfig(**MINI))
    good = dict(prev_session_embedding=np.zeros(4), delta_seconds=1.0, day_index=0,
                week_of_month_index=0, month_index=0, context=np.zeros(6))
    with pytest.raises(DimensionError):
        dm.step(model, dm.init_state(model), dm.SessionStepFeatures(**(good | {"context": np.zeros(5)})))
    with pytest.raises(DimensionError):
        dm.step(model, dm.init_state(model),
                dm.SessionStepFeatures(**(good | {"prev_session_embedding": np.zeros(3)})))
    bad_state = {k: (np.zeros(2), np.zeros(2)) for k in dm.STREAMS}
    with pytest.raises(DimensionError):
        dm.step(model, bad_state, dm.SessionStepFeatures(**good))
    with pytest.raises(IndexError):
        dm.step(model, dm.init_state(model), dm.SessionStepFeatures(**(good | {"day_index": 7})))


def test_gap_transform_monotone_and_fed_to_session_stream():
    deltas = np.array([1.0, 60.0, 3600.0, 86400.0, 1e7])
    g = dm.gap_transform(deltas)
    np.testing.assert_array_equal(g, np.log1p(deltas))
    assert np.all(np.diff(g) > 0)
    model = dm.DceModel.init(4, 6, dm.DceConfig(**MINI))
    feats = dm.SessionStepFeatures(np.arange(4.0), 3600.0, 1, 1, 1, np.zeros(6))
    x = dm._stream_inputs(model, model.params, feats)
    assert x["s"].shape == (5,)
    assert x["s"][-1] == np.log1p(3600.0)
    np.testing.assert_array_equal(x["s"][:4], np.arange(4.0))


def test_first_session_policy():
    rng = np.random.default_rng(2)
    h, e = mini_history(rng, 3)
    arr = dm.history_arrays(h, e)
    np.testing.assert_array_equal(arr["prev"][0], 0)
    assert arr["delta"][0] == 86400.0
    np.testing.assert_array_equal(arr["prev"][1:], e[:-1])
    assert arr["delta"][1] == h.sessions[1].login_time - h.sessions[0].login_time
    assert tuple(arr[k][2] for k in "DWM") == calendar_indices(h.sessions[2].login_time)


def test_alignment_error():
    rng = np.random.default_rng(3)
    h, e = mini_history(rng, 3)
    model = dm.DceModel.init(4, 6, dm.DceConfig(**MINI))
    with pytest.raises(AlignmentError):
        dm.unroll_loss(model, h, e[:2])


def test_unroll_loss_matches_hand_unroll():
    model, rng = mini_model(dm.FIVE_STREAM, 5, dtype=np.float64)
    h, e = mini_history(rng, 3)
    state = dm.init_state(model)
    total, prev = 0.0, np.zeros(4)
    for i, s in enumerate(h.sessions):
        gap = 86400.0 if i == 0 else s.login_time - h.sessions[i - 1].login_time
        D, W, M = calendar_indices(s.login_time)
        state, _, s_hat = dm.step(model, state, dm.SessionStepFeatures(prev, gap, D, W, M, h.contexts[i]))
        total += nc.cosine_distance_value(s_hat, e[i])
        prev = e[i]
    assert dm.unroll_loss(model, h, e) == pytest.approx(total, abs=1e-13)
    mean, _ = dm.batch_objective(model, [h], [e])
    assert mean * 3 == pytest.approx(total, abs=1e-13)


def test_unroll_loss_oracle_and_orthogonal_stubs(monkeypatch):
    rng = np.random.default_rng(6)
    h, e = mini_history(rng, 4)
    model = dm.DceModel.init(4, 6, dm.DceConfig(**MINI))
    real_step = dm.step
    targets = iter(list(e))

    def oracle(model_, state, feats):
        ns, c, _ = real_step(model_, state, feats)
        return ns, c, next(targets)

    monkeypatch.setattr(dm, "step", oracle)
    assert dm.unroll_loss(model, h, e) == pytest.approx(0.0, abs=1e-12)
    E = np.zeros((4, 4))
    E[:, 0] = 1.0
    monkeypatch.setattr(dm, "step", lambda m_, s, f: (s, None, np.array([0.0, 1.0, 0.0, 0.0])))
    assert dm.unroll_loss(model, h, E) == 4.0


@pytest.mark.parametrize("mode", dm.MODES)
def test_replay_matches_step_by_step(mode):
    model, rng = mini_model(mode, 8, dtype=np.float64)
    hists = [mini_history(rng, n) for n in (1, 4, 2)]
    res = dm.replay(model, [h for h, _ in hists], [e for _, e in hists])
    for (h, e), (C, S) in zip(hists, res):
        arr = dm.history_arrays(h, e)
        state = dm.init_state(model)
        for i in range(len(h)):
            feats = dm.SessionStepFeatures(arr["prev"][i], arr["delta"][i], arr["D"][i], arr["W"][i],
                                           arr["M"][i], arr["ctx"][i])
            state, c, s_hat = dm.step(model, state, feats)
            np.testing.assert_allclose(C[i], c, rtol=0, atol=1e-13)
            np.testing.assert_allclose(S[i], s_hat, rtol=0, atol=1e-13)


def _mutate(h: CustomerHistory, e, j, rng, everything):
    h2 = copy.deepcopy(h)
    e2 = e.copy()
    e2[j] = rng.normal(size=e.shape[1])
    s = h2.sessions[j]
    s.events = [(int(rng.integers(0, 60)), s.login_time + k) for k in range(1, 5)]
    if everything:
        h2.contexts[j] = rng.normal(size=h.contexts.shape[1])
        if j == len(h) - 1:
            s.login_time += int(rng.integers(1, 10 * 86400))
    return h2, e2


@pytest.mark.parametrize("mode", dm.MODES)
def test_causality_mutations(mode):
    model, rng = mini_model(mode, 9, dtype=np.float64)
    for trial in range(50):
        h, e = mini_history(rng, int(rng.integers(2, 7)))
        C, S = dm.replay(model, [h], [e])[0]
        j = int(rng.integers(0, len(h)))
        everything = bool(trial % 2)
        h2, e2 = _mutate(h, e, j, rng, everything)
        C2, S2 = dm.replay(model, [h2], [e2])[0]
        keep = j if everything else j + 1
        assert C[:keep].tobytes() == C2[:keep].tobytes()
        assert S[:keep].tobytes() == S2[:keep].tobytes()


def test_training_loss_decreases_and_meta(micro_dce):
    model, hist = micro_dce
    assert hist[-1] < hist[0]
    assert len(model.meta["val_history"]) == len(hist)
    assert 1 <= model.meta["best_epoch"] <= len(hist)


def test_training_deterministic_and_fused_mode(micro_dataset, micro_sae, micro_embeddings):
    cfg = dict(hidden=4, mlp_hidden=4, out=3, d_c=4, k_cal=2, epochs=2, batch_size=16)
    a, ha = dm.train_dce(micro_dataset, micro_sae, dm.DceConfig(**cfg), embeddings=micro_embeddings)
    b, hb = dm.train_dce(micro_dataset, micro_sae, dm.DceConfig(**cfg), embeddings=micro_embeddings)
    assert ha == hb
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    f, hf = dm.train_dce(micro_dataset, micro_sae, dm.DceConfig(mode=dm.FUSED_VANILLA, **cfg),
                         embeddings=micro_embeddings)
    out = dm.embed_customers(f, micro_dataset, embeddings=micro_embeddings)
    C, S = out[micro_dataset.customers[0].customer_id]
    assert C.shape[1] == f.d_c and S.shape[1] == f.d


def test_early_stopping_keeps_best_epoch(micro_dataset, micro_sae, micro_embeddings):
    cfg = dm.DceConfig(hidden=4, mlp_hidden=4, out=3, d_c=4, k_cal=2, epochs=6, batch_size=16,
                       lr=0.05, patience=1)
    model, hist = dm.train_dce(micro_dataset, micro_sae, cfg, embeddings=micro_embeddings)
    val = model.meta["val_history"]
    assert model.meta["best_epoch"] == int(np.argmin(val)) + 1
    got, _ = dm.validation_loss(model, micro_dataset.val, micro_embeddings)
    assert got == pytest.approx(min(val), abs=1e-12)
    assert len(hist) <= 6


def test_embed_customers_rows(micro_dataset, micro_dce, micro_embeddings):
    model, _ = micro_dce
    out = dm.embed_customers(model, micro_dataset, embeddings=micro_embeddings)
    assert set(out) == {h.customer_id for h in micro_dataset.customers}
    for h in micro_dataset.customers:
        C, S = out[h.customer_id]
        assert C.shape == (len(h), model.d_c) and S.shape == (len(h), model.d)
        assert np.all(np.isfinite(C))
    again = dm.embed_customers(model, micro_dataset, embeddings=micro_embeddings)
    h0 = micro_dataset.customers[0].customer_id
    assert out[h0][0].tobytes() == again[h0][0].tobytes()


def test_one_session_customer_gets_one_row():
    model = dm.DceModel.init(4, 6, dm.DceConfig(**MINI))
    h, e = mini_history(np.random.default_rng(0), 1)
    ds = Dataset([h], None, None)
    out = dm.embed_customers(model, ds, embeddings={0: e})
    assert out[0][0].shape == (1, model.d_c)


def test_empty_dataset_rejected(micro_sae):
    ds = Dataset([], None, None)
    with pytest.raises(ConfigError):
        dm.train_dce(ds, micro_sae, dm.DceConfig(**MINI))


def test_config_validation():
    with pytest.raises(ConfigError):
        dm.DceConfig(mode="three-stream").validate()
    with pytest.raises(ConfigError):
        dm.DceConfig(hidden=0).validate()
