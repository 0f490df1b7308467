"""Training losses for the unified fine-tuning stage and the alignment stage."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .flow import fm_loss
from .tensorgrad import Tensor

__all__ = ["LossWeights", "det_loss", "exp_loss", "fm_loss", "gduf_total", "diga_loss", "diga_total",
           "teacher_forcing"]


@dataclass
class LossWeights:
    det: float = 1.0
    exp: float = 1.0
    fm: float = 1.0
    diga: float = 0.5

    def __post_init__(self):
        for k in ("det", "exp", "fm", "diga"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


def det_loss(fake_logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy of sigmoid(logit) against labels (1 = fake)."""
    y = np.asarray(labels)
    if y.size == 0:
        raise ValueError("det_loss: empty batch")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("det_loss: labels must be 0 or 1")
    return tg.bce_logits(fake_logits, y.astype(fake_logits.dtype))


def teacher_forcing(answers: np.ndarray, answer_lens: np.ndarray, instr_len: int):
    """Split padded answers into model inputs and aligned next-token targets.

    Returns ``(answer_inputs, targets, valid)`` where ``answer_inputs`` is the
    answer without its final slot, and ``targets``/``valid`` cover every text
    position ``instr_len - 1 + j`` predicting answer token ``j``.
    """
    answers = np.asarray(answers, dtype=np.int64)
    b, a = answers.shape
    inputs = answers[:, :-1]
    t = instr_len + a - 1
    targets = np.zeros((b, t), dtype=np.int64)
    valid = np.zeros((b, t), dtype=bool)
    targets[:, instr_len - 1:] = answers
    valid[:, instr_len - 1:] = np.arange(a)[None, :] < np.asarray(answer_lens)[:, None]
    return inputs, targets, valid


def exp_loss(answer_logits: Tensor, targets, valid=None) -> Tensor:
    """Mean next-token NLL over answer positions only."""
    return tg.cross_entropy_logits(answer_logits, targets, valid)


def gduf_total(det: Tensor | None, exp: Tensor | None, fm: Tensor | None, w: LossWeights) -> Tensor:
    """Weighted sum of the three stage-one losses; ``None`` terms are skipped."""
    terms = [tg.scale(x, lam) for x, lam in ((det, w.det), (exp, w.exp), (fm, w.fm)) if x is not None]
    if not terms:
        raise ValueError("gduf_total: no loss terms")
    total = terms[0]
    for t in terms[1:]:
        total = tg.add(total, t)
    return total


def diga_loss(z_g: Tensor, z_d: Tensor, project=None) -> Tensor:
    """Mean over patches of ``1 - cos(project(z_g[i]), z_d[i])``.

    ``z_g`` is ``(..., N, C_G)``, ``z_d`` is ``(..., N, C_D)`` with the same
    patch grid; ``project`` maps ``C_G`` to ``C_D`` (identity when ``None``).
    """
    proj = project(z_g) if project is not None else z_g
    if proj.shape != z_d.shape:
        raise tg.ShapeError("diga_loss", proj.shape, z_d.shape)
    cos = tg.cosine(proj, z_d)
    return tg.sub(Tensor(np.asarray(1.0, dtype=cos.dtype)), tg.mean_all(cos))


def diga_total(fm: Tensor, diga: Tensor, lam: float) -> Tensor:
    return tg.add(fm, tg.scale(diga, lam))
