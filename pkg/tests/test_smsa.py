import math

import numpy as np
import pytest

from gendet import tensorgrad as tg
from gendet.masks import SeqLayout, build_detection_mask
from gendet.smsa import MhaParams, SmsaLayer, layer_forward, multi_head_attention, smsa_forward
from gendet.tensorgrad import MaskError, ShapeError, Tape, Tensor


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def rand_params(rng, d, h):
    return MhaParams(*(t64(rng.normal(size=(d, d)) * d ** -0.5) for _ in range(4)), n_heads=h)


def rand_layer(rng, d=8, h=2, zero_ff=False, identity=False):
    attn = MhaParams(*(t64(np.eye(d)) for _ in range(4)), n_heads=h) if identity else rand_params(rng, d, h)
    f = 0.0 if zero_ff else 1.0
    return SmsaLayer(attn, t64(np.ones(d)), t64(np.zeros(d)), t64(np.ones(d)), t64(np.zeros(d)),
                     t64(f * rng.normal(size=(d, 2 * d)) * d ** -0.5), t64(np.zeros(2 * d)),
                     t64(f * rng.normal(size=(2 * d, d)) * (2 * d) ** -0.5), t64(np.zeros(d)))


def naive_mha(q, kv, mask, wq, wk, wv, wo, h):
    """Loop over heads, queries and keys one scalar at a time."""
    n_q, d = q.shape
    n_kv = kv.shape[0]
    dk = d // h
    out_heads = np.zeros((n_q, d))
    for head in range(h):
        cols = slice(head * dk, (head + 1) * dk)
        for i in range(n_q):
            qi = q[i] @ wq[:, cols]
            logits = []
            for j in range(n_kv):
                if mask[i, j]:
                    logits.append((j, float(qi @ (kv[j] @ wk[:, cols])) / math.sqrt(dk)))
            mx = max(v for _, v in logits)
            z = sum(math.exp(v - mx) for _, v in logits)
            acc = np.zeros(dk)
            for j, v in logits:
                acc += math.exp(v - mx) / z * (kv[j] @ wv[:, cols])
            out_heads[i, cols] = acc
    return out_heads @ wo


def ln(x):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)


def test_single_key_identity_projection():
    p = MhaParams(*(t64(np.eye(2)) for _ in range(4)), n_heads=1)
    out = multi_head_attention(t64([[1.0, 0.0]]), t64([[5.0, 5.0]]), np.ones((1, 1), bool), p)
    np.testing.assert_array_equal(out.data, [[5.0, 5.0]])


def test_identical_kv_rows_give_that_value():
    rng = np.random.default_rng(3)
    p = rand_params(rng, 4, 2)
    row = rng.normal(size=4)
    out = multi_head_attention(t64(rng.normal(size=(3, 4))), t64(np.stack([row, row])), None, p)
    expected = row @ p.wv.data @ p.wo.data
    np.testing.assert_allclose(out.data, np.broadcast_to(expected, (3, 4)), atol=1e-12)


def test_mha_matches_naive_reference_seed0():
    rng = np.random.default_rng(0)
    p = rand_params(rng, 4, 2)
    q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    got = multi_head_attention(t64(q), t64(kv), mask, p).data
    ref = naive_mha(q, kv, mask, p.wq.data, p.wk.data, p.wv.data, p.wo.data, 2)
    np.testing.assert_allclose(got, ref, atol=1e-6, rtol=0)


@pytest.mark.parametrize("seed", range(4))
def test_mha_batched_matches_per_item(seed):
    rng = np.random.default_rng(seed)
    p = rand_params(rng, 8, 4)
    q, kv = rng.normal(size=(3, 4, 8)), rng.normal(size=(3, 6, 8))
    got = multi_head_attention(t64(q), t64(kv), None, p).data
    for b in range(3):
        ref = naive_mha(q[b], kv[b], np.ones((4, 6), bool), p.wq.data, p.wk.data, p.wv.data, p.wo.data, 4)
        np.testing.assert_allclose(got[b], ref, atol=1e-10)


def test_mha_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        MhaParams(*(t64(np.eye(6)) for _ in range(4)), n_heads=4)
    p = rand_params(rng, 4, 2)
    with pytest.raises(ShapeError):
        multi_head_attention(t64(np.ones((2, 3))), t64(np.ones((2, 4))), None, p)
    with pytest.raises(MaskError):
        multi_head_attention(t64(np.ones((2, 4))), t64(np.ones((2, 4))), np.array([[1, 1], [0, 0]], bool), p)


def test_smsa_reduces_to_det_self_attention():
    rng = np.random.default_rng(1)
    layer = rand_layer(rng)
    hd = t64(rng.normal(size=(3, 8)))
    mask = np.ones((3, 3), bool)
    a = smsa_forward(hd, None, None, layer, mask).data
    b = layer_forward(hd, mask, layer).data
    np.testing.assert_array_equal(a, b)


def test_smsa_three_row_hand_computation():
    rng = np.random.default_rng(2)
    d = 4
    layer = rand_layer(rng, d=d, h=1, zero_ff=True, identity=True)
    zg, hd, ht = rng.normal(size=(1, d)), rng.normal(size=(1, d)), rng.normal(size=(1, d))
    out = smsa_forward(t64(hd), t64(ht), t64(zg), layer, np.ones((1, 3), bool)).data
    q = ln(hd)[0]
    kv = ln(np.concatenate([zg, hd, ht]))
    logits = kv @ q / math.sqrt(d)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    np.testing.assert_allclose(out[0], hd[0] + w @ kv, atol=1e-12)
    assert w.min() > 0 and abs(w.sum() - 1) < 1e-12


def test_smsa_gradient_wrt_z_gen_grad_check():
    rng = np.random.default_rng(4)
    layer = rand_layer(rng)
    hd, ht = t64(rng.normal(size=(3, 8))), t64(rng.normal(size=(2, 8)))
    zg = t64(rng.normal(size=(2, 8)))
    mask = build_detection_mask(SeqLayout.for_detection(2, 3, 2))[2:5]
    err = tg.grad_check(lambda z: tg.sum_all(smsa_forward(hd, ht, z, layer, mask)), [zg])
    assert err < 1e-4
    assert np.abs(zg.grad).max() > 1e-3


def test_smsa_permuting_gen_rows_with_mask_columns():
    rng = np.random.default_rng(5)
    layer = rand_layer(rng)
    n_gen = 4
    hd, ht, zg = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 2, 8)), rng.normal(size=(2, n_gen, 8))
    mask = rng.random((3, n_gen + 5)) < 0.7
    mask[:, n_gen] = True
    perm = rng.permutation(n_gen)
    pmask = mask.copy()
    pmask[:, :n_gen] = mask[:, :n_gen][:, perm]
    a = smsa_forward(t64(hd), t64(ht), t64(zg), layer, mask).data
    b = smsa_forward(t64(hd), t64(ht), t64(zg[:, perm]), layer, pmask).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_smsa_off_matches_reference_without_gen_tokens():
    rng = np.random.default_rng(6)
    layer = rand_layer(rng)
    n_gen, n_det, n_text = 4, 3, 2
    hd, ht = t64(rng.normal(size=(2, n_det, 8))), t64(rng.normal(size=(2, n_text, 8)))
    zg = t64(rng.normal(size=(2, n_gen, 8)), grad=True)
    full = build_detection_mask(SeqLayout.for_detection(n_gen, n_det, n_text), smsa_on=False)
    rows = full[n_gen:n_gen + n_det]
    assert not rows[:, :n_gen].any()
    with Tape() as tape:
        a = smsa_forward(hd, ht, zg, layer, rows)
        loss = tg.sum_all(a)
    b = smsa_forward(hd, ht, None, layer, rows[:, n_gen:]).data
    assert a.data.tobytes() == b.tobytes()
    tape.backward(loss)
    assert zg.grad is None or not np.any(zg.grad)


def test_smsa_output_depends_on_gen_when_admitted():
    rng = np.random.default_rng(7)
    layer = rand_layer(rng)
    hd, ht = t64(rng.normal(size=(3, 8))), t64(rng.normal(size=(2, 8)))
    zg = t64(rng.normal(size=(2, 8)), grad=True)
    rows = build_detection_mask(SeqLayout.for_detection(2, 3, 2))[2:5]
    with Tape() as tape:
        loss = tg.sum_all(smsa_forward(hd, ht, zg, layer, rows))
    tape.backward(loss)
    assert np.abs(zg.grad).max() > 1e-3


def test_smsa_preserves_query_count():
    rng = np.random.default_rng(8)
    layer = rand_layer(rng)
    out = smsa_forward(t64(rng.normal(size=(5, 8))), t64(rng.normal(size=(1, 8))), t64(rng.normal(size=(7, 8))),
                       layer, np.ones((5, 13), bool))
    assert out.shape == (5, 8)
