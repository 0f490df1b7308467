"""Detection, explanation and generation metrics plus the robustness protocol.

CSS and FID here are proxies built on the model's own representations (token
embeddings and pooled detection features); they are labeled as such in every
report and are not comparable with the CLIP or Inception based originals.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .synthcorpus import ARTIFACT_KINDS, INSTR_LEN, INSTRUCTIONS, TOKENIZER, DetSet

__all__ = ["MetricsError", "acc_f1", "rouge_l", "css", "content_tokens", "frechet_distance", "fid_proxy",
           "permutation_bound", "crop", "quantize", "perturb", "diversity", "pairwise_cosine_distance",
           "MetricsReport", "evaluate_detection", "ROBUSTNESS_PERTURBATIONS"]

ROBUSTNESS_PERTURBATIONS = ("none", "crop:0.9", "crop:0.7", "crop:0.5", "quantize:32", "quantize:8")


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# detection

def acc_f1(preds, labels) -> tuple[float, float]:
    """Accuracy and F1 of the fake class (label 1)."""
    p = np.asarray(preds).astype(int).ravel()
    y = np.asarray(labels).astype(int).ravel()
    if p.shape != y.shape:
        raise MetricsError(f"preds {p.shape} vs labels {y.shape}")
    if p.size == 0:
        raise MetricsError("acc_f1 on empty input")
    acc = float((p == y).mean())
    tp = int(((p == 1) & (y == 1)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, float(f1)


# ---------------------------------------------------------------------------
# explanation text

def content_tokens(ids) -> list[int]:
    """Token ids up to the first EOS with PAD and BOS dropped."""
    out = []
    for t in np.asarray(ids).ravel().tolist():
        if t == TOKENIZER.eos_id:
            break
        if t in (TOKENIZER.pad_id, TOKENIZER.bos_id):
            continue
        out.append(int(t))
    return out


def _lcs(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pred_tokens, ref_tokens) -> float:
    """LCS F-measure between two token sequences."""
    pred, ref = list(pred_tokens), list(ref_tokens)
    lcs = _lcs(pred, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(pred), lcs / len(ref)
    return 2 * p * r / (p + r)


def css(pred_tokens, ref_tokens, embedding_table) -> float:
    """Cosine of mean token embeddings mapped to [0, 1]; 0 for an empty side."""
    table = np.asarray(embedding_table, dtype=np.float64)
    pred, ref = list(pred_tokens), list(ref_tokens)
    if not pred or not ref:
        return 0.0
    a = table[pred].mean(axis=0)
    b = table[ref].mean(axis=0)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return (cos + 1.0) / 2.0


# ---------------------------------------------------------------------------
# generation

def _gaussian(feats: np.ndarray):
    return feats.mean(axis=0), np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(f1, f2) -> float:
    """Frechet distance between Gaussian fits of two ``(N, D)`` feature sets.

    The cross term uses ``Tr((S1 S2)^1/2) = Tr((S1^1/2 S2 S1^1/2)^1/2)`` so every
    root is of a symmetric PSD matrix; negative eigenvalues are clamped at 0.
    """
    a = np.asarray(f1, dtype=np.float64)
    b = np.asarray(f2, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise MetricsError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    d = a.shape[1]
    for name, f in (("first", a), ("second", b)):
        if len(f) < 2 * d:
            raise MetricsError(f"{name} set has {len(f)} samples; need at least {2 * d} for {d} features")
    if a.shape == b.shape and np.array_equal(a, b):
        return 0.0
    mu1, s1 = _gaussian(a)
    mu2, s2 = _gaussian(b)
    r1 = _sqrt_psd(s1)
    cross = np.linalg.eigvalsh(r1 @ s2 @ r1)
    tr_cross = float(np.sqrt(np.clip(cross, 0.0, None)).sum())
    fd = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2 * tr_cross)
    return max(fd, 0.0)


def _fid_instruction(n: int) -> np.ndarray:
    ids = TOKENIZER.pad(TOKENIZER.encode(INSTRUCTIONS[0]), INSTR_LEN)
    return np.broadcast_to(ids, (n, ids.size))


def image_features(images, model) -> np.ndarray:
    """Mean-pooled detection features under the first instruction template."""
    x = np.asarray(images)
    return model.features(x, _fid_instruction(len(x)))


def fid_proxy(real_images, gen_images, model) -> float:
    """Frechet distance between detector-feature Gaussians of two image sets."""
    return frechet_distance(image_features(real_images, model), image_features(gen_images, model))


def permutation_bound(features, n_resamples: int = 20, seed: int = 0) -> float:
    """Largest Frechet distance between two bootstrap draws of half the set.

    Resampling with replacement duplicates points, so this upper-bounds the
    finite-sample distance expected between two disjoint halves of one set.
    """
    f = np.asarray(features, dtype=np.float64)
    rng = np.random.default_rng(seed)
    half = len(f) // 2
    worst = 0.0
    for _ in range(n_resamples):
        a = f[rng.integers(0, len(f), half)]
        b = f[rng.integers(0, len(f), half)]
        worst = max(worst, frechet_distance(a, b))
    return worst


def pairwise_cosine_distance(features) -> float:
    f = np.asarray(features, dtype=np.float64)
    if len(f) < 2:
        raise MetricsError("diversity needs at least two samples")
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    u = f / np.where(norms == 0, 1.0, norms)
    sim = u @ u.T
    iu = np.triu_indices(len(f), k=1)
    return float(np.mean(1.0 - sim[iu]))


def diversity(images, model) -> float:
    """Mean pairwise cosine distance of detector features."""
    return pairwise_cosine_distance(image_features(images, model))


# ---------------------------------------------------------------------------
# perturbations

def crop(image, ratio: float) -> np.ndarray:
    """Keep the centered ``ratio`` window and resize back with nearest neighbor."""
    x = np.asarray(image)
    if not 0 < ratio <= 1:
        raise ValueError(f"crop ratio must lie in (0, 1], got {ratio}")
    s = x.shape[-1]
    c = max(1, int(round(ratio * s)))
    off = (s - c) // 2
    src = off + np.floor((np.arange(s) + 0.5) * c / s).astype(int)
    return x[..., src[:, None], src[None, :]]


def quantize(image, levels: int) -> np.ndarray:
    """Round pixel values in [0, 1] to ``levels`` evenly spaced values."""
    if levels < 2:
        raise ValueError("quantize needs at least 2 levels")
    x = np.asarray(image)
    q = levels - 1
    return (np.round(x.astype(np.float64) * q) / q).astype(x.dtype)


def perturb(image, kind: str, seed: int = 0) -> np.ndarray:
    """Apply ``"none"``, ``"crop:<ratio>"`` or ``"quantize:<levels>"``.

    Both perturbations are deterministic; ``seed`` is accepted for a uniform
    signature with stochastic variants.
    """
    del seed
    name, _, arg = kind.partition(":")
    if name == "none":
        return np.asarray(image).copy()
    if name == "crop":
        return crop(image, float(arg))
    if name == "quantize":
        return quantize(image, int(arg))
    raise ValueError(f"unknown perturbation {kind!r}")


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricsReport:
    acc: float
    f1: float
    rouge_l: float
    css: float
    per_kind: dict[str, float] = field(default_factory=dict)
    robustness: dict[str, dict[str, float]] = field(default_factory=dict)
    fid_proxy: float | None = None
    diversity: float | None = None

    def rows(self) -> list[tuple[str, str, str, str]]:
        fmt = "{:.6f}".format
        out = [("overall", "-", m, fmt(getattr(self, m))) for m in ("acc", "f1", "rouge_l")]
        out.append(("overall", "-", "css_proxy", fmt(self.css)))
        if self.fid_proxy is not None:
            out.append(("overall", "-", "fid_proxy", fmt(self.fid_proxy)))
        if self.diversity is not None:
            out.append(("overall", "-", "diversity_proxy", fmt(self.diversity)))
        for k, v in self.per_kind.items():
            out.append(("per_kind", k, "acc", fmt(v)))
        for pert, metrics in self.robustness.items():
            for m, v in metrics.items():
                out.append(("robustness", pert, "css_proxy" if m == "css" else m, fmt(v)))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("section", "key", "metric", "value"))
        w.writerows(self.rows())
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"acc {self.acc:.4f}  f1 {self.f1:.4f}  rouge_l {self.rouge_l:.4f}  css_proxy {self.css:.4f}"]
        if self.fid_proxy is not None:
            lines.append(f"fid_proxy {self.fid_proxy:.4f}")
        if self.diversity is not None:
            lines.append(f"diversity_proxy {self.diversity:.4f}")
        if self.per_kind:
            lines.append("per-kind accuracy: " + "  ".join(f"{k} {v:.3f}" for k, v in self.per_kind.items()))
        if self.robustness:
            metrics = list(next(iter(self.robustness.values())))
            head = ["perturbation"] + ["css_proxy" if m == "css" else m for m in metrics]
            lines.append("  ".join(f"{h:>12}" for h in head))
            for pert, vals in self.robustness.items():
                lines.append("  ".join([f"{pert:>12}"] + [f"{vals[m]:>12.4f}" for m in metrics]))
        return "\n".join(lines)


def _explanation_scores(model, det: DetSet, images) -> tuple[float, float]:
    pred = model.explain(images, det.instr, max_len=det.answers.shape[1])
    table = model.params["tok_embed"].data
    r, c = [], []
    for p, a in zip(pred, det.answers):
        pt, rt = content_tokens(p), content_tokens(a)
        r.append(rouge_l(pt, rt))
        c.append(css(pt, rt, table))
    return float(np.mean(r)), float(np.mean(c))


def _detection_scores(model, det: DetSet, images, explain: bool):
    prob = model.fake_probability(images, det.instr)
    pred = (prob > 0.5).astype(int)
    acc, f1 = acc_f1(pred, det.labels)
    rl, cs = _explanation_scores(model, det, images) if explain else (math.nan, math.nan)
    return pred, {"acc": acc, "f1": f1, "rouge_l": rl, "css": cs}


def evaluate_detection(model, det: DetSet, perturbations=ROBUSTNESS_PERTURBATIONS, explain: bool = True,
                       seed: int = 0) -> MetricsReport:
    """Detection and explanation metrics on ``det`` plus the perturbation table."""
    table: dict[str, dict[str, float]] = {}
    base = None
    pred = None
    for kind in ("none",) + tuple(p for p in perturbations if p != "none"):
        images = np.stack([perturb(im, kind, seed) for im in det.images]) if kind != "none" else det.images
        p, scores = _detection_scores(model, det, images, explain)
        table[kind] = scores
        if kind == "none":
            base, pred = scores, p
    per_kind = {}
    for code, name in enumerate(("real",) + ARTIFACT_KINDS):
        sel = det.kinds == code
        if sel.any():
            per_kind[name] = float((pred[sel] == det.labels[sel]).mean())
    return MetricsReport(acc=base["acc"], f1=base["f1"], rouge_l=base["rouge_l"], css=base["css"],
                         per_kind=per_kind, robustness=table)
