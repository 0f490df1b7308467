"""Stage-one joint fine-tuning and stage-two detector-informed alignment."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .flow import noise, fm_loss
from .model import DETECTOR_HEAD_PREFIXES, UnifiedModel, ModelConfig, save_checkpoint
from .objectives import LossWeights, det_loss, diga_loss, diga_total, exp_loss, gduf_total, teacher_forcing
from .synthcorpus import INSTR_LEN, INSTRUCTIONS, TOKENIZER, DetSet, GenSet

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss_det", "loss_exp", "loss_fm", "loss_diga", "lr", "seconds")
FREEZE_POLICIES = ("detector-heads", "backbone")


class TrainingError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    steps_gduf: int = 1000
    steps_diga: int = 300
    batch_size: int = 64
    mix_det: int = 1
    mix_gen: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    diga_layer: int = 0          # 0 -> ceil(n_layers / 2)
    t_min: float = 0.02
    seed: int = 0
    eval_every: int = 100
    freeze_policy: str = "detector-heads"
    balanced_diga: bool = False
    log_wallclock: bool = False

    def split_batch(self) -> tuple[int, int]:
        total = self.mix_det + self.mix_gen
        n_det = int(round(self.batch_size * self.mix_det / total))
        n_gen = self.batch_size - n_det
        if n_det < 1 or n_gen < 1:
            raise ValueError(f"batch_size {self.batch_size} with mix {self.mix_det}:{self.mix_gen} "
                             "leaves a task without samples")
        return n_det, n_gen

    def resolved_diga_layer(self, n_layers: int) -> int:
        layer = self.diga_layer or math.ceil(n_layers / 2)
        if not 1 <= layer <= n_layers:
            raise ValueError(f"diga_layer {layer} outside 1..{n_layers}")
        return layer


class AdamW:
    """Decoupled-weight-decay Adam keyed by parameter name.

    Parameters with no gradient in a step are left untouched and get no state.
    """

    def __init__(self, params: dict[str, tg.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            p = self.params[name]
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            t = st["t"]
            st["m"] = self.b1 * st["m"] + (1 - self.b1) * g
            st["v"] = self.b2 * st["v"] + (1 - self.b2) * g * g
            mhat = st["m"] / (1 - self.b1 ** t)
            vhat = st["v"] / (1 - self.b2 ** t)
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * s).astype(grads[k].dtype)
    return norm


def collect_grads(model: UnifiedModel, names) -> dict[str, np.ndarray]:
    out = {}
    for n in names:
        g = model.params[n].grad
        if g is not None:
            out[n] = g
    return out


class EpochSampler:
    """Deterministic shuffled-epoch index stream."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            m = min(k, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + m])
            self.pos += m
            k -= m
        return np.concatenate(out)


@dataclass
class MetricLog:
    rows: list[dict] = field(default_factory=list)
    wallclock: bool = False

    def add(self, **row) -> None:
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            vals = []
            for c in LOG_COLUMNS:
                v = r.get(c)
                if c == "seconds" and not self.wallclock:
                    v = None
                if v is None:
                    vals.append("")
                elif isinstance(v, int):
                    vals.append(str(v))
                else:
                    vals.append(f"{v:.8g}")
            w.writerow(vals)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r.get(name) is None else r[name] for r in self.rows], dtype=np.float64)


def _noised(model: UnifiedModel, images: np.ndarray, rng: np.random.Generator, t_min: float):
    x0 = model.standardize(model.encode_gen(images))
    t = rng.uniform(t_min, 1.0, size=len(images))
    eps = rng.standard_normal(x0.shape).astype(model.dtype)
    return x0, noise(x0, t.astype(model.dtype), eps), t, eps


def _finite_or_raise(step: int, **losses) -> None:
    bad = {k: v for k, v in losses.items() if v is not None and not math.isfinite(v)}
    if bad:
        parts = ", ".join(f"{k}={v}" for k, v in losses.items() if v is not None)
        raise TrainingError(f"non-finite loss at step {step}: {parts}")


def gduf_losses(model: UnifiedModel, det: DetSet, gen: GenSet, rng: np.random.Generator, t_min: float = 0.02):
    """Detection BCE, explanation NLL and flow-matching loss for one mixed batch."""
    ans_in, targets, valid = teacher_forcing(det.answers, det.answer_lens, det.instr.shape[1])
    out = model.detect_forward(det.images, det.instr, ans_in)
    l_det = det_loss(out.fake_logit, det.labels)
    l_exp = exp_loss(out.answer_logits, targets, valid)
    x0, x_t, t, eps = _noised(model, gen.images, rng, t_min)
    v = model.gen_forward(x_t, t, gen.captions).velocity
    l_fm = fm_loss(v, x0, x_t, eps, model.config.flow_target)
    return l_det, l_exp, l_fm


def train_gduf(det_set: DetSet, gen_set: GenSet, config: TrainConfig | None = None,
               model_config: ModelConfig | None = None, model: UnifiedModel | None = None,
               out_dir=None, steps: int | None = None) -> tuple[UnifiedModel, MetricLog]:
    """Mixed-task joint optimization; writes ``gduf.ckpt`` and ``gduf_log.csv`` when ``out_dir`` is set."""
    cfg = config or TrainConfig()
    steps = cfg.steps_gduf if steps is None else steps
    if model is None:
        model = UnifiedModel(model_config or ModelConfig(), seed=cfg.seed)
        model.set_latent_stats(model.encode_gen(gen_set.images))
    w = cfg.weights
    n_det, n_gen = cfg.split_batch()
    rng = np.random.default_rng([cfg.seed, 1])
    det_sampler = EpochSampler(len(det_set), np.random.default_rng([cfg.seed, 2]))
    gen_sampler = EpochSampler(len(gen_set), np.random.default_rng([cfg.seed, 3]))
    opt = AdamW(model.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    names = list(model.params)
    mlog = MetricLog(wallclock=cfg.log_wallclock)
    t0 = time.perf_counter()
    for step in range(1, steps + 1):
        db = det_set.subset(det_sampler.take(n_det))
        gb = gen_set.subset(gen_sampler.take(n_gen))
        tg.zero_grad(model.params.values())
        with tg.Tape(seed=cfg.seed) as tape:
            l_det, l_exp, l_fm = gduf_losses(model, db, gb, rng, cfg.t_min)
            total = gduf_total(l_det if w.det > 0 else None, l_exp if w.exp > 0 else None,
                               l_fm if w.fm > 0 else None, w)
        vals = dict(loss_det=l_det.item(), loss_exp=l_exp.item(), loss_fm=l_fm.item())
        _finite_or_raise(step, **vals)
        tape.backward(total)
        grads = collect_grads(model, names)
        clip_global_norm(grads, cfg.grad_clip)
        opt.step(grads)
        mlog.add(step=step, lr=cfg.lr, seconds=time.perf_counter() - t0, **vals)
        if cfg.eval_every and step % cfg.eval_every == 0:
            log.info("gduf step %d det=%.4f exp=%.4f fm=%.4f", step, vals["loss_det"], vals["loss_exp"],
                     vals["loss_fm"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "gduf.ckpt", model)
        mlog.write(out / "gduf_log.csv")
    return model, mlog


def frozen_names(model: UnifiedModel, policy: str) -> list[str]:
    """Parameters held fixed during alignment under ``policy``."""
    if policy == "detector-heads":
        return [n for n in model.params if n.startswith(DETECTOR_HEAD_PREFIXES)]
    if policy == "backbone":
        return [n for n in model.params if not n.startswith(("v_head.", "diga."))]
    raise ValueError(f"unknown freeze policy {policy!r}; expected one of {FREEZE_POLICIES}")


def train_diga(gduf_model: UnifiedModel, gen_set: GenSet, config: TrainConfig | None = None,
               det_set: DetSet | None = None, out_dir=None, steps: int | None = None,
               teacher: UnifiedModel | None = None) -> tuple[UnifiedModel, MetricLog]:
    """Align mid-layer generator features to a frozen copy of the stage-one detector.

    The student starts from ``gduf_model``; the teacher is an untouched copy
    of it (or ``teacher``). Writes ``diga.ckpt`` and ``diga_log.csv`` when
    ``out_dir`` is set.
    """
    cfg = config or TrainConfig()
    steps = cfg.steps_diga if steps is None else steps
    mc = gduf_model.config
    layer = cfg.resolved_diga_layer(mc.n_layers)
    if mc.patch_det != mc.patch_gen:
        raise ValueError("alignment needs matching detection and generation patch grids")
    if cfg.balanced_diga and det_set is None:
        raise ValueError("balanced_diga requires a detection corpus for fake alignment targets")
    teacher = teacher or gduf_model.copy()
    student = gduf_model.copy()
    student.add_diga_projection(seed=cfg.seed)
    frozen = set(frozen_names(student, cfg.freeze_policy))
    for n, p in student.params.items():
        p.requires_grad = n not in frozen
    trainable = [n for n in student.params if n not in frozen]
    w = cfg.weights
    rng = np.random.default_rng([cfg.seed, 11])
    gen_sampler = EpochSampler(len(gen_set), np.random.default_rng([cfg.seed, 12]))
    fake_idx = np.flatnonzero(det_set.labels == 1) if cfg.balanced_diga else None
    fake_sampler = EpochSampler(len(fake_idx), np.random.default_rng([cfg.seed, 13])) if cfg.balanced_diga else None
    opt = AdamW(student.params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    instr0 = TOKENIZER.pad(TOKENIZER.encode(INSTRUCTIONS[0]), INSTR_LEN)
    mlog = MetricLog(wallclock=cfg.log_wallclock)
    t0 = time.perf_counter()
    n_real = cfg.batch_size // 2 if cfg.balanced_diga else cfg.batch_size
    for step in range(1, steps + 1):
        gb = gen_set.subset(gen_sampler.take(n_real))
        images, captions = gb.images, gb.captions.astype(np.int64)
        if cfg.balanced_diga:
            fb = det_set.subset(fake_idx[fake_sampler.take(cfg.batch_size - n_real)])
            images = np.concatenate([images, fb.images])
            captions = np.concatenate([captions, np.full((len(fb), captions.shape[1]), TOKENIZER.pad_id)])
        z_d = teacher.detect_forward(images, np.broadcast_to(instr0, (len(images), INSTR_LEN))).z_D
        z_d = tg.Tensor(z_d.data)
        x0, x_t, t, eps = _noised(student, images, rng, cfg.t_min)
        tg.zero_grad(student.params.values())
        with tg.Tape(seed=cfg.seed) as tape:
            out = student.gen_forward(x_t, t, captions, hidden_layer=layer)
            v = out.velocity
            if cfg.balanced_diga:
                v = tg.slice_rows(v, 0, n_real, axis=0)
            l_fm = fm_loss(v, x0[:n_real], x_t[:n_real], eps[:n_real], mc.flow_target)
            l_diga = diga_loss(out.hidden, z_d, student.diga_project)
            total = diga_total(l_fm, l_diga, w.diga) if w.diga > 0 else l_fm
        vals = dict(loss_fm=l_fm.item(), loss_diga=l_diga.item())
        _finite_or_raise(step, **vals)
        tape.backward(total)
        grads = collect_grads(student, trainable)
        clip_global_norm(grads, cfg.grad_clip)
        opt.step(grads)
        mlog.add(step=step, lr=cfg.lr, seconds=time.perf_counter() - t0, **vals)
        if cfg.eval_every and step % cfg.eval_every == 0:
            log.info("diga step %d fm=%.4f diga=%.4f", step, vals["loss_fm"], vals["loss_diga"])
    for p in student.params.values():
        p.requires_grad = True
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "diga.ckpt", student)
        mlog.write(out / "diga_log.csv")
    return student, mlog
