import math

import numpy as np
import pytest

from asymrec.data import InteractionDataset, synth_dataset
from asymrec.errors import ConfigError, DimensionError, DivergenceError, FormatError
from asymrec.evaluation import effective_rank
from asymrec.numerics import finite_difference_check
from asymrec.recmodel import (
    RecConfig,
    RecModel,
    batch_objective,
    catalog_scores,
    ce_loss,
    code_log_probs,
    code_mean,
    continuous_output_variant_train,
    discrete_input_variant,
    encode_sequence,
    head_logits,
    input_representations,
    last_hidden,
    load_checkpoint,
    save_checkpoint,
    score_catalog,
    train,
)
from asymrec.recmodel.model import decode, regression_output
from asymrec.recmodel.train import training_pairs


def tiny_cfg(**kw):
    base = dict(d_m=8, heads=2, n_layers=2, max_len=6, dropout=0.0, experts=2, expert_hidden=4, ffn_mult=2, head_hidden=6)
    base.update(kw)
    return RecConfig(**base)


def tiny_model(variant="full", seed=0, d=5, n_heads=4, K=5, **kw):
    cfg = tiny_cfg(variant=variant, seed=seed, **kw)
    model = RecModel.create(cfg, d, 0 if variant == "continuous-output" else n_heads, K)
    # non-trivial norms, biases and positions so every path carries signal
    rng = np.random.default_rng(seed + 1)
    for name, v in model.params.items():
        if name.endswith(("offset", "b1", "b2", "bo", "reg.b")) or name == "pos":
            model.params[name] = rng.normal(size=v.shape) * 0.3
        elif name.endswith("scale"):
            model.params[name] = 1.0 + rng.normal(size=v.shape) * 0.2
    return model


def toy_data(seed=0, n_items=7, d=5, n_heads=4, K=5):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n_items, d)), rng.integers(0, K, size=(n_items, n_heads))


def test_config_invariants():
    with pytest.raises(ConfigError):
        RecConfig(d_m=10, heads=3)
    with pytest.raises(ConfigError):
        RecConfig(max_epochs=5, patience=6)
    with pytest.raises(ConfigError):
        RecConfig(variant="nope")


def test_causality_prefix_invariance():
    model = tiny_model()
    emb, _ = toy_data()
    full = encode_sequence(model, emb[[0, 3, 1, 5, 2]])
    for t in range(1, 5):
        prefix = encode_sequence(model, emb[[0, 3, 1, 5, 2][:t]])
        assert np.array_equal(prefix, full[:t])
    altered = encode_sequence(model, emb[[0, 3, 1, 6, 4]])
    assert np.array_equal(altered[:3], full[:3])


def test_single_position_depends_only_on_itself():
    model = tiny_model()
    emb, _ = toy_data()
    a = encode_sequence(model, emb[[2]])
    b = encode_sequence(model, emb[[2, 4]])[:1]
    assert np.array_equal(a, b)


def test_overlong_sequence_keeps_most_recent():
    model = tiny_model()
    emb, _ = toy_data(n_items=10)
    seq = list(range(10))
    np.testing.assert_array_equal(encode_sequence(model, emb[seq]), encode_sequence(model, emb[seq[-6:]]))
    with pytest.raises(DimensionError):
        decode(model.params, model.config, np.zeros((1, 7, 8)))


def _ln(x, scale, offset, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * scale + offset


def _gelu(v):
    return 0.5 * v * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))


def test_zero_attention_output_is_feed_forward_only():
    model = tiny_model()
    p = model.params
    for i in range(2):
        p[f"layer{i}.attn.wo"][:] = 0.0
        p[f"layer{i}.attn.bo"][:] = 0.0
    emb, _ = toy_data()
    seq = [4, 0, 2]
    got = encode_sequence(model, emb[seq])
    mix = p["msp.gate"]
    # independent recomputation, one position at a time
    for t, item in enumerate(seq):
        x = emb[item]
        logits = x @ mix
        alpha = np.exp(logits - logits.max())
        alpha /= alpha.sum()
        h = sum(
            alpha[e] * (_gelu(x @ p["msp.w1"][e] + p["msp.b1"][e, 0]) @ p["msp.w2"][e] + p["msp.b2"][e, 0])
            for e in range(2)
        )
        h = h + p["pos"][t]
        for i in range(2):
            pre = f"layer{i}."
            inner = _gelu(_ln(h, p[pre + "ln2.scale"], p[pre + "ln2.offset"]) @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
            h = h + inner @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        np.testing.assert_allclose(got[t], _ln(h, p["final.scale"], p["final.offset"]), rtol=1e-10, atol=1e-12)


def test_head_logits_zero_uniform_and_normalized():
    model = tiny_model()
    hidden = np.random.default_rng(0).normal(size=(3, 8))
    logp = code_log_probs(model, hidden)
    np.testing.assert_allclose(np.exp(logp).sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    for name in ("heads.w2", "heads.b2"):
        model.params[name][:] = 0.0
    np.testing.assert_allclose(np.exp(code_log_probs(model, hidden)), 0.2, atol=1e-15)


def test_head_logits_match_matmul_oracle():
    model = tiny_model()
    p = model.params
    hidden = np.random.default_rng(1).normal(size=(2, 8))
    got = head_logits(p, hidden).value
    for h in range(4):
        inner = _gelu(hidden @ p["heads.w1"][h] + p["heads.b1"][h, 0])
        np.testing.assert_allclose(got[h], inner @ p["heads.w2"][h] + p["heads.b2"][h, 0], rtol=1e-12)


def test_uniform_logits_give_log_k():
    K = 256
    emb = np.random.default_rng(0).normal(size=(6, 5))
    codes = np.random.default_rng(1).integers(0, K, size=(6, 4))
    model = tiny_model(K=K)
    model.params["heads.w2"][:] = 0.0
    model.params["heads.b2"][:] = 0.0
    assert ce_loss(model, [[0, 1, 2, 3], [4, 5, 0]], codes, emb) == pytest.approx(math.log(256), abs=1e-12)


def test_confident_correct_logits_give_near_zero_loss():
    emb = np.random.default_rng(0).normal(size=(6, 5))
    codes = np.full((6, 4), 3)
    model = tiny_model()
    model.params["heads.w2"][:] = 0.0
    model.params["heads.b2"][:] = 0.0
    model.params["heads.b2"][:, :, 3] = 100.0
    assert ce_loss(model, [[0, 1, 2, 3]], codes, emb) < 1e-8


def test_ce_loss_matches_direct_sum():
    model = tiny_model()
    emb, codes = toy_data()
    seqs = [[0, 1, 2, 3], [4, 5, 6], [1, 1, 2, 0, 6]]
    total, count = 0.0, 0
    for seq in seqs:
        H = encode_sequence(model, emb[seq[:-1]])
        for t, target in enumerate(seq[1:]):
            logp = code_log_probs(model, H[t : t + 1])
            for h in range(codes.shape[1]):
                total -= logp[h, 0, codes[target, h]]
                count += 1
    assert ce_loss(model, seqs, codes, emb) == pytest.approx(total / count, rel=1e-12)


def test_ce_loss_needs_codes():
    model = tiny_model()
    emb, codes = toy_data()
    with pytest.raises(ConfigError):
        ce_loss(model, [[0, 1, 2]], None, emb)
    with pytest.raises(ConfigError):
        ce_loss(model, [[0, 1, 2]], codes[:3], emb)


def test_last_position_mode_uses_final_targets_only():
    model = tiny_model(per_position=False)
    emb, codes = toy_data()
    H = encode_sequence(model, emb[[0, 1, 2]])
    logp = code_log_probs(model, H[-1:])
    expected = -np.mean([logp[h, 0, codes[3, h]] for h in range(4)])
    assert ce_loss(model, [[0, 1, 2, 3]], codes, emb) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("variant", ["full", "single-expert", "discrete-input", "continuous-output"])
def test_end_to_end_gradient_fd(variant):
    model = tiny_model(variant)
    emb, codes = toy_data()
    pairs = training_pairs([[0, 1, 2, 3], [4, 5, 6, 2]], model.config.max_len)
    report = finite_difference_check(lambda p: batch_objective(p, model.config, pairs, emb, codes), model.params)
    assert report.passed, report
    groups = {name.split(".")[0] for name in model.params}
    assert "pos" in groups and "layer0" in groups


def _small_dataset(seed=0):
    table, ds = synth_dataset(seed, 30, 6, 60, 3, (5, 8), stay_prob=0.9)
    codes = np.random.default_rng(seed).integers(0, 4, size=(30, 2))
    codes[:, 0] = np.arange(30) % 4
    codes[:, 1] = np.arange(30) // 8
    return table.matrix, ds, codes


def test_training_reduces_loss_and_is_deterministic():
    emb, ds, codes = _small_dataset()
    cfg = tiny_cfg(max_epochs=10, patience=10, batch=16, lr=0.01)
    a = train(cfg, ds, emb, codes)
    b = train(cfg, ds, emb, codes)
    assert a.history[-1]["loss"] < a.history[0]["loss"]
    assert a.best_epoch == b.best_epoch and a.history == b.history
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)


def test_patience_zero_runs_one_epoch():
    emb, ds, codes = _small_dataset()
    res = train(tiny_cfg(max_epochs=5, patience=0, batch=16), ds, emb, codes)
    assert len(res.history) == 1 and res.best_epoch == 0


def test_nan_loss_aborts():
    emb, ds, codes = _small_dataset()
    emb = emb.copy()
    emb[3, 0] = np.nan
    with pytest.raises(DivergenceError, match="epoch 0 step"):
        train(tiny_cfg(max_epochs=2, patience=1, batch=16), ds, emb, codes)


def test_train_requires_codes_for_code_heads():
    emb, ds, _ = _small_dataset()
    with pytest.raises(ConfigError):
        train(tiny_cfg(), ds, emb, None)


def test_score_catalog_single_item_and_decomposition():
    model = tiny_model()
    emb, codes = toy_data()
    ctx = [0, 2, 1]
    one = score_catalog(model, ctx, emb, codes[:1])
    H = encode_sequence(model, emb[ctx])[-1:]
    logp = code_log_probs(model, H)
    assert one.top(1) == [0]
    assert one.scores[0] == pytest.approx(sum(logp[h, 0, codes[0, h]] for h in range(4)), rel=1e-12)
    pair = np.array([codes[0], codes[0]])
    pair[1, 2] = (codes[0, 2] + 1) % 5
    scores = catalog_scores(model, [ctx], emb, pair)[0]
    assert scores[1] - scores[0] == pytest.approx(logp[2, 0, pair[1, 2]] - logp[2, 0, pair[0, 2]], abs=1e-12)


def test_score_catalog_matches_per_item_oracle():
    model = tiny_model(K=5)
    rng = np.random.default_rng(3)
    emb = rng.normal(size=(50, 5))
    codes = rng.integers(0, 5, size=(50, 4))
    ctx = [3, 17, 42, 8]
    ranked = score_catalog(model, ctx, emb, codes)
    H = encode_sequence(model, emb[ctx])[-1:]
    logp = code_log_probs(model, H)
    oracle = [(sum(logp[h, 0, codes[i, h]] for h in range(4)), i) for i in range(50)]
    oracle.sort(key=lambda s: (-s[0], s[1]))
    assert ranked.items.tolist() == [i for _, i in oracle]
    assert np.all(np.diff(ranked.scores) <= 0)


def test_score_catalog_permutation_equivariant():
    model = tiny_model()
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(20, 5))
    codes = rng.integers(0, 5, size=(20, 4))
    perm = rng.permutation(20)
    inv = np.argsort(perm)
    ctx = [1, 5, 9]
    base = catalog_scores(model, [ctx], emb, codes)[0]
    moved = catalog_scores(model, [inv[ctx].tolist()], emb[perm], codes[perm])[0]
    np.testing.assert_allclose(moved, base[perm], rtol=1e-12, atol=1e-12)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    model = tiny_model("single-expert")
    model.mhq_hash = "abc123"
    path = tmp_path / "m.arec"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.config == model.config and back.mhq_hash == "abc123" and back.K == model.K
    assert all(back.params[k].tobytes() == model.params[k].tobytes() for k in model.params)
    save_checkpoint(back, tmp_path / "again.arec")
    assert (tmp_path / "again.arec").read_bytes() == path.read_bytes()
    blob = bytearray(path.read_bytes())
    blob[-30] ^= 0x04
    (tmp_path / "bad.arec").write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.arec")
    (tmp_path / "short.arec").write_bytes(bytes(blob[:100]))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.arec")


def test_discrete_input_representations():
    model = tiny_model("discrete-input", n_heads=3)
    v = np.arange(8.0)
    model.params["code_emb"][:] = v
    reps = code_mean(model.params["code_emb"], np.array([[0, 1, 2], [4, 4, 4]])).value
    np.testing.assert_array_equal(reps, [v, v])

    table = np.random.default_rng(0).normal(size=(3, 5, 8))
    toy = np.array([[1, 4, 0]])
    expected = (table[0, 1] + table[1, 4] + table[2, 0]) / 3
    np.testing.assert_allclose(code_mean(table, toy).value[0], expected, rtol=1e-15)

    single = np.random.default_rng(1).normal(size=(1, 5, 8))
    np.testing.assert_array_equal(code_mean(single, np.array([[2]])).value[0], single[0, 2])


def test_discrete_input_variant_matches_id_path():
    model = tiny_model("discrete-input")
    emb, codes = toy_data()
    seq = [2, 0, 5]
    via_codes = discrete_input_variant(model, codes[seq])
    via_ids = last_hidden(model, [seq], emb, codes)[0]
    np.testing.assert_allclose(via_codes[-1], via_ids, rtol=1e-12)
    reps = input_representations(model, emb, codes)
    assert reps.shape == (7, 8)


def test_continuous_variant_collapses_on_constant_target():
    rng = np.random.default_rng(0)
    n = 20
    ds = InteractionDataset(n, [(u, rng.integers(0, n, size=6).tolist()) for u in range(30)])
    const = np.ones((n, 5))
    cfg = tiny_cfg(max_epochs=40, patience=40, batch=16, lr=0.01)
    res = continuous_output_variant_train(cfg, ds, const)
    assert res.model.variant == "continuous-output"
    contexts = [c for _, c, _ in ds.contexts("test")]
    preds = regression_output(res.model.params, last_hidden(res.model, contexts, const)).value
    assert res.history[-1]["loss"] < 1e-3
    assert effective_rank(preds) < 1.05
