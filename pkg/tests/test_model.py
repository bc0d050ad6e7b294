import numpy as np
import pytest

from ltlforce.decode import translate_batch
from ltlforce.grammar import Grammar
from ltlforce.losses import TargetNotValid
from ltlforce.ltl import And, Eventually, Next, Not, Prop, Until
from ltlforce.model import (
    GRAMMAR_FORCED,
    STANDARD,
    LengthExceeded,
    ModelDims,
    SourceVocab,
    TrainConfig,
    UnparseableTarget,
    batch_loss,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grad,
    prepare_batch,
    save_checkpoint,
    train,
)


@pytest.fixture(scope="module")
def g():
    return Grammar(5)


def closed_form_params(S, V, E, H):
    return S * E + V * E + 2 * (3 * E * H + 3 * H * H + 3 * H) + 2 * H * H + H + H * V + V


@pytest.mark.parametrize("S, V, E, H", [(50, 16, 32, 64), (7, 12, 3, 5), (1, 1, 1, 1)])
def test_param_count(S, V, E, H):
    dims = ModelDims(S, V, E, H)
    assert dims.n_params == closed_form_params(S, V, E, H)
    assert init_model(dims, 0).flat.shape == (dims.n_params,)


def test_param_count_reference_value():
    assert ModelDims(50, 16, 32, 64).n_params == 48656


def test_init_deterministic_and_seed_sensitive():
    dims = ModelDims(30, 16, 8, 12)
    a, b, c = init_model(dims, 3), init_model(dims, 3), init_model(dims, 4)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert np.mean(a.flat != c.flat) >= 0.99


def test_views_share_flat_storage():
    p = init_model(ModelDims(5, 16, 3, 4), 0)
    assert np.shares_memory(p["out_W"], p.flat)
    assert p["att_W"].shape == (8, 4)


def _pairs(g, n=4, seed=0):
    rng = np.random.default_rng(seed)
    fs = [Eventually(And(Prop(1), Eventually(Prop(2)))), Prop(1), Until(Not(Prop(1)), Prop(2)), Next(Prop(3))]
    return [(rng.integers(2, 12, size=int(rng.integers(2, 7))).tolist(), g.vocab.encode(fs[i % len(fs)]))
            for i in range(n)]


def test_forward_shapes_and_finite(g):
    p = init_model(ModelDims(12, g.vocab.size, 6, 8), 0)
    src, tgt = _pairs(g, 1)[0]
    rows = forward(p, src, tgt)
    assert len(rows) == len(tgt)
    assert all(r.shape == (g.vocab.size,) and np.isfinite(r).all() for r in rows)


def test_forward_rejects_long_target(g):
    p = init_model(ModelDims(12, g.vocab.size, 4, 4), 0)
    with pytest.raises(LengthExceeded):
        forward(p, [2, 3], [0] * 10, max_len=5)


def test_attention_sees_every_source_position(g):
    p = init_model(ModelDims(12, g.vocab.size, 6, 8), 1)
    src = [2, 3, 4, 5, 6]
    base = forward(p, src, [0])[0]
    for i in range(len(src)):
        changed = list(src)
        changed[i] = 11
        assert not np.allclose(forward(p, changed, [0])[0], base)


def test_padding_does_not_change_logits(g):
    p = init_model(ModelDims(12, g.vocab.size, 6, 8), 2)
    pairs = _pairs(g, 3)
    pb = prepare_batch(pairs, STANDARD, g)
    from ltlforce.model import _teacher_forced
    zs, _ = _teacher_forced(p, pb.src, pb.src_mask, pb.tgt, keep_cache=False)
    for i, (src, tgt) in enumerate(pairs):
        np.testing.assert_allclose(zs[i, :len(tgt)], np.array(forward(p, src, tgt)), atol=1e-12)


def _fd_error(p, pb, h=1e-5):
    grad, _ = loss_and_grad(p, pb)
    num = np.zeros_like(grad)
    for k in range(len(grad)):
        fp = p.flat.copy()
        fp[k] += h
        fm = p.flat.copy()
        fm[k] -= h
        num[k] = (batch_loss(p.replace(fp), pb) - batch_loss(p.replace(fm), pb)) / (2 * h)
    return np.linalg.norm(grad - num) / max(np.linalg.norm(grad), np.linalg.norm(num)), grad, num


@pytest.mark.parametrize("mode", [STANDARD, GRAMMAR_FORCED])
def test_backward_matches_finite_differences(g, mode):
    p = init_model(ModelDims(12, g.vocab.size, 4, 6), 0)
    pb = prepare_batch(_pairs(g, 2), mode, g)
    err, grad, num = _fd_error(p, pb)
    assert err <= 1e-6
    # coordinate-wise with an absolute floor for entries at the noise level
    np.testing.assert_allclose(grad, num, rtol=1e-4, atol=1e-8)


def test_loss_value_matches_reported(g):
    p = init_model(ModelDims(12, g.vocab.size, 4, 6), 0)
    pb = prepare_batch(_pairs(g, 3), GRAMMAR_FORCED, g)
    _, loss = loss_and_grad(p, pb)
    assert loss == pytest.approx(batch_loss(p, pb), abs=1e-12)


def test_forced_loss_not_above_standard(g):
    pairs = _pairs(g, 8)
    for seed in range(5):
        p = init_model(ModelDims(12, g.vocab.size, 6, 8), seed)
        forced = batch_loss(p, prepare_batch(pairs, GRAMMAR_FORCED, g))
        standard = batch_loss(p, prepare_batch(pairs, STANDARD, g))
        assert forced <= standard


def test_forced_output_grad_zero_outside_valid(g):
    # out_b's gradient is the sum of per-row logit gradients; at a single
    # position with a singleton valid set only that token can move
    p = init_model(ModelDims(12, g.vocab.size, 4, 6), 0)
    pb = prepare_batch([([2, 3], [0, g.vocab.EOS])], GRAMMAR_FORCED, g)
    grad, _ = loss_and_grad(p, pb)
    off = sum(int(np.prod(s)) for n, s in p.dims.layout() if n != "out_b")
    gb = grad[off:]
    # row 0 may move any formula-start token; row 1 (EOS only) contributes nothing
    invalid_first = ~pb.valid[0, 0]
    assert np.all(gb[invalid_first] == 0.0)


def test_target_not_valid_reports_record(g):
    bad = [g.vocab.RPAREN, g.vocab.EOS]
    with pytest.raises(TargetNotValid) as info:
        train([([2], g.vocab.encode(Prop(1))), ([3], bad)], TrainConfig(epochs=1), g, 5)
    assert info.value.record == 1


def test_unparseable_target(g):
    with pytest.raises(UnparseableTarget) as info:
        train([([2], [0])], TrainConfig(epochs=1), g, 5)  # missing EOS
    assert info.value.record == 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="other")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)


def test_train_is_deterministic(g):
    pairs = _pairs(g, 6)
    cfg = TrainConfig(epochs=2, batch_size=3, d_emb=4, d_hidden=6)
    p1, c1 = train(pairs, cfg, g, 12)
    p2, c2 = train(pairs, cfg, g, 12)
    np.testing.assert_array_equal(p1.flat, p2.flat)
    assert c1 == c2
    assert len(c1) == 2 * 2


@pytest.mark.parametrize("mode", [STANDARD, GRAMMAR_FORCED])
def test_overfits_ten_pairs(g, mode):
    fs = [Prop(1), Eventually(Prop(1)), Not(Prop(2)), And(Prop(1), Prop(2)), Until(Prop(1), Prop(2)),
          Eventually(And(Prop(1), Eventually(Prop(2)))), Next(Not(Prop(3))), And(Prop(2), Prop(1)),
          Eventually(Until(Prop(1), Not(Prop(2)))), Next(Prop(1))]
    pairs = [([2 + i, 12 + i % 3], g.vocab.encode(f)) for i, f in enumerate(fs)]
    params, curve = train(pairs, TrainConfig(epochs=300, batch_size=5, d_emb=16, d_hidden=32, mode=mode), g, 16)
    outs = translate_batch(params, [s for s, _ in pairs], True, 32, g)
    assert outs == fs
    assert curve[-1] < curve[0]


def test_checkpoint_round_trip(tmp_path, g):
    vocab = SourceVocab.build([["Go", "to", "prop_1"], ["avoid", "prop_2"]])
    p = init_model(ModelDims(len(vocab), g.vocab.size, 4, 6), 9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, p, vocab, 5, seed=9, mode=GRAMMAR_FORCED, extra={"note": "x"})
    q, v2, header = load_checkpoint(path)
    np.testing.assert_array_equal(p.flat, q.flat)
    assert v2.tokens == vocab.tokens
    assert header["mode"] == GRAMMAR_FORCED and header["seed"] == 9 and header["max_props"] == 5
    assert header["extra"] == {"note": "x"}


def test_checkpoint_rejects_truncation(tmp_path, g):
    vocab = SourceVocab.build([["a"]])
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, init_model(ModelDims(len(vocab), g.vocab.size, 2, 2), 0), vocab, 5)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_source_vocab():
    v = SourceVocab.build([["Go", "to", "prop_1"], ["go", "home"]])
    assert v.tokens[:2] == ["<pad>", "<unk>"]
    assert v.encode(["GO", "nowhere"]) == [v.encode(["go"])[0], 1]
    assert v.digest() == SourceVocab(v.tokens[2:]).digest()
