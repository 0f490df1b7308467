import math

import numpy as np
import pytest

from gendet import tensorgrad as tg
from gendet.flow import fm_loss
from gendet.model import DETECTOR_HEAD_PREFIXES, ModelConfig, UnifiedModel
from gendet.objectives import (LossWeights, det_loss, diga_loss, diga_total, exp_loss, gduf_total,
                                  teacher_forcing)
from gendet.synthcorpus import INSTR_LEN, INSTRUCTIONS, TOKENIZER, make_det_set, make_gen_set
from gendet.tensorgrad import GradError, ShapeError, Tape, Tensor
from gendet.train import gduf_losses

SMALL = dict(d_model=16, n_layers=2, n_heads=2, t_embed_dim=8)
T, F = True, False


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_det_loss_examples():
    assert det_loss(t64([0.0, 0.0, 0.0]), [1, 0, 1]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert det_loss(t64([0.0, 0.0]), [1, 0]).item() == pytest.approx(0.6931, abs=1e-4)
    assert det_loss(t64([40.0]), [1]).item() < 1e-15
    assert np.isfinite(det_loss(t64([1e4, -1e4]), [0, 1]).item())


def test_det_loss_matches_probability_form():
    z = np.array([-2.0, 0.3, 1.7])
    y = np.array([1, 0, 1])
    p = 1 / (1 + np.exp(-z))
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert det_loss(t64(z), y).item() == pytest.approx(ref, abs=1e-12)


def test_det_loss_sign_symmetry():
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=10) * 3, rng.integers(0, 2, size=10)
    assert det_loss(t64(z), y).item() == pytest.approx(det_loss(t64(-z), 1 - y).item(), abs=1e-12)


def test_det_loss_errors():
    with pytest.raises(ValueError):
        det_loss(t64(np.zeros(0)), np.zeros(0))
    with pytest.raises(ValueError):
        det_loss(t64([0.0]), [2])


def test_exp_loss_uniform_logits():
    logits = t64(np.zeros((2, 3, 64)))
    targets = np.array([[5, 6, 7], [1, 2, 3]])
    assert exp_loss(logits, targets).item() == pytest.approx(math.log(64), abs=1e-12)
    assert exp_loss(logits, targets).item() == pytest.approx(4.1589, abs=1e-4)


def test_exp_loss_confident_correct():
    z = np.full((1, 2, 8), -30.0)
    z[0, 0, 3] = z[0, 1, 5] = 30.0
    assert exp_loss(t64(z), np.array([[3, 5]])).item() < 1e-20


def test_exp_loss_two_token_hand_computation():
    z = np.array([[[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]])
    targets = np.array([[1, 0]])
    nll = []
    for row, tgt in zip(z[0], targets[0]):
        p = np.exp(row) / np.exp(row).sum()
        nll.append(-math.log(p[tgt]))
    assert exp_loss(t64(z), targets).item() == pytest.approx(sum(nll) / 2, abs=1e-6)


def test_exp_loss_ignores_instruction_positions():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(1, 4, 6))
    targets = np.array([[0, 0, 2, 3]])
    valid = np.array([[False, False, True, True]])
    z2 = z.copy()
    z2[0, :2] += rng.normal(size=(2, 6)) * 10
    assert exp_loss(t64(z), targets, valid).item() == exp_loss(t64(z2), targets, valid).item()


def test_exp_loss_rejects_out_of_vocab():
    with pytest.raises((IndexError, ValueError)):
        exp_loss(t64(np.zeros((1, 2, 4))), np.array([[1, 4]]))


def test_teacher_forcing_alignment():
    ans = np.array([[7, 8, 2, 0], [9, 2, 0, 0]])
    inputs, targets, valid = teacher_forcing(ans, np.array([3, 2]), instr_len=2)
    np.testing.assert_array_equal(inputs, ans[:, :-1])
    # text stream is [q0 q1 a0 a1 a2]; position 1 predicts a0
    assert targets.shape == (2, 5)
    np.testing.assert_array_equal(targets[0, 1:], ans[0])
    np.testing.assert_array_equal(valid, [[F, T, T, T, F], [F, T, T, F, F]])


def test_gduf_total_examples():
    w = LossWeights()
    assert gduf_total(t64(0.1), t64(0.2), t64(0.3), w).item() == pytest.approx(0.6, abs=1e-15)
    assert gduf_total(t64(0.5), None, None, LossWeights(2, 0, 0)).item() == 1.0
    with pytest.raises(ValueError):
        gduf_total(None, None, None, w)
    with pytest.raises(ValueError):
        LossWeights(det=-1)


def test_gduf_zero_weight_term_gives_zero_gradient():
    v = t64([1.0, 2.0], grad=True)
    d = t64([0.5], grad=True)
    with Tape() as tape:
        fm = tg.mean_all(tg.mul(v, v))
        total = gduf_total(tg.sum_all(d), None, fm, LossWeights(1, 1, 0))
    tape.backward(total)
    assert not np.any(v.grad)
    assert d.grad[0] == 1.0


def test_diga_loss_examples():
    rng = np.random.default_rng(2)
    zd = rng.normal(size=(2, 5, 4))
    assert diga_loss(t64(zd), t64(zd)).item() == pytest.approx(0.0, abs=1e-12)
    assert diga_loss(t64(-zd), t64(zd)).item() == pytest.approx(2.0, abs=1e-12)
    assert diga_loss(t64(3.5 * zd), t64(zd)).item() == pytest.approx(0.0, abs=1e-12)


def test_diga_loss_per_patch_rescale_invariance():
    rng = np.random.default_rng(3)
    zg, zd = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    s1, s2 = rng.uniform(0.1, 5, size=(5, 1)), rng.uniform(0.1, 5, size=(5, 1))
    a = diga_loss(t64(zg), t64(zd)).item()
    assert diga_loss(t64(zg * s1), t64(zd * s2)).item() == pytest.approx(a, abs=1e-12)


def test_diga_loss_is_patchwise_mean():
    rng = np.random.default_rng(4)
    zg, zd = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    cos = (zg * zd).sum(1) / np.linalg.norm(zg, axis=1) / np.linalg.norm(zd, axis=1)
    assert diga_loss(t64(zg), t64(zd)).item() == pytest.approx(np.mean(1 - cos), abs=1e-12)


def test_diga_loss_errors():
    zd = np.ones((3, 4))
    zg = np.ones((3, 4))
    zg[2] = 0
    with pytest.raises(GradError, match="2"):
        diga_loss(t64(zg), t64(zd))
    with pytest.raises(ShapeError):
        diga_loss(t64(np.ones((3, 5))), t64(zd))


def test_diga_total_examples():
    assert diga_total(t64(0.3), t64(0.4), 0.5).item() == pytest.approx(0.5, abs=1e-15)
    assert diga_total(t64(0.3), t64(0.4), 0.0).item() == 0.3


def test_diga_total_gradient_skips_detector():
    m = UnifiedModel(ModelConfig(**SMALL), seed=0, dtype=np.float64)
    m.add_diga_projection(seed=0)
    img = np.random.default_rng(5).random((2, 32, 32))
    instr = np.broadcast_to(TOKENIZER.pad(TOKENIZER.encode(INSTRUCTIONS[0]), INSTR_LEN), (2, INSTR_LEN))
    z_d = Tensor(m.detect_forward(img, instr).z_D.data)
    x0 = m.standardize(m.encode_gen(img))
    eps = np.random.default_rng(6).normal(size=x0.shape)
    xt = 0.5 * x0 + 0.5 * eps
    cap = np.zeros((2, 0), np.int64)
    tg.zero_grad(m.params.values())
    with Tape() as tape:
        out = m.gen_forward(xt, 0.5, cap, hidden_layer=1)
        total = diga_total(fm_loss(out.velocity, x0, xt), diga_loss(out.hidden, z_d, m.diga_project), 0.5)
    tape.backward(total)
    for n, p in m.params.items():
        if n.startswith(DETECTOR_HEAD_PREFIXES):
            assert p.grad is None or not np.any(p.grad), n
    assert np.any(m.params["diga.w1"].grad) and np.any(m.params["layers.0.attn.wq"].grad)


def test_gduf_gradient_is_weighted_sum_of_parts():
    det = make_det_set(4, seed=0)
    gen = make_gen_set(4, seed=0)
    m = UnifiedModel(ModelConfig(**SMALL), seed=0, dtype=np.float64)
    m.set_latent_stats(m.encode_gen(gen.images))

    def grads(weights):
        tg.zero_grad(m.params.values())
        with Tape() as tape:
            parts = gduf_losses(m, det, gen, np.random.default_rng(9))
            total = gduf_total(*parts, weights)
        tape.backward(total)
        return {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in m.params.items()}

    w = LossWeights(0.7, 1.3, 0.4)
    full = grads(w)
    parts = [grads(LossWeights(1, 0, 0)), grads(LossWeights(0, 1, 0)), grads(LossWeights(0, 0, 1))]
    for n in full:
        combo = w.det * parts[0][n] + w.exp * parts[1][n] + w.fm * parts[2][n]
        np.testing.assert_allclose(full[n], combo, atol=1e-10, rtol=1e-8)
