"""Unified detection/generation transformer and its checkpoint format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensorgrad as tg
from .masks import SeqLayout, build_detection_mask, build_generation_mask
from .smsa import MhaParams, SmsaLayer, layer_forward
from .synthcorpus import EXPLANATIONS, TOKENIZER
from .tensorgrad import Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_det: int = 4
    patch_gen: int = 4
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 20
    t_embed_dim: int = 32
    ffn_mult: int = 4
    flow_target: str = "literal"     # "literal": x0 - x_t ; "velocity": x0 - eps
    smsa_on: bool = True
    text_in_smsa: bool = True
    detector_text_condition: bool = False

    def __post_init__(self):
        for p in (self.patch_det, self.patch_gen):
            if self.image_size % p:
                raise ValueError(f"image_size {self.image_size} not divisible by patch {p}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.flow_target not in ("literal", "velocity"):
            raise ValueError(f"flow_target must be 'literal' or 'velocity', got {self.flow_target!r}")
        if self.vocab_size < len(TOKENIZER):
            raise ValueError(f"vocab_size {self.vocab_size} smaller than tokenizer ({len(TOKENIZER)})")

    @property
    def n_det_tokens(self) -> int:
        return (self.image_size // self.patch_det) ** 2

    @property
    def n_gen_tokens(self) -> int:
        return (self.image_size // self.patch_gen) ** 2

    @property
    def latent_channels(self) -> int:
        return self.patch_gen ** 2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# fixed generation encoder

def space_to_depth(images: np.ndarray, patch: int) -> np.ndarray:
    images = np.asarray(images)
    squeeze = images.ndim == 2
    if squeeze:
        images = images[None]
    b, h, w = images.shape
    if h % patch or w % patch:
        raise tg.ShapeError("space_to_depth", images.shape, (patch, patch))
    x = images.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    x = x.reshape(b, (h // patch) * (w // patch), patch * patch)
    return x[0] if squeeze else x


def depth_to_space(latents: np.ndarray, patch: int) -> np.ndarray:
    latents = np.asarray(latents)
    squeeze = latents.ndim == 2
    if squeeze:
        latents = latents[None]
    b, n, c = latents.shape
    side = int(round(math.sqrt(n)))
    if side * side != n or c != patch * patch:
        raise tg.ShapeError("depth_to_space", latents.shape, (patch,))
    x = latents.reshape(b, side, side, patch, patch).transpose(0, 1, 3, 2, 4)
    x = x.reshape(b, side * patch, side * patch)
    return x[0] if squeeze else x


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of flow time, shape ``(len(t), dim)``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = 1000.0 * t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x.astype(np.float32)


class DetOutput(NamedTuple):
    fake_logit: Tensor        # (B,)
    answer_logits: Tensor     # (B, T, vocab): position i predicts text token i + 1
    h_det: Tensor             # (B, N_det, d) final-layer detection features
    z_D: Tensor               # same tensor, exposed for alignment


class GenOutput(NamedTuple):
    velocity: Tensor               # (B, N_gen, C)
    hidden: Tensor | None          # (B, N_gen, d) latent rows after the requested layer


DET_INPUT_SCALE = 0.1  # pixel scale of the centered detector input

DETECTOR_HEAD_PREFIXES = ("det_embed.", "det_pos", "det_head.", "text_head.")
GENERATOR_HEAD_PREFIXES = ("v_head.",)
DIGA_PREFIX = "diga."


class UnifiedModel:
    """One backbone shared by detection (SMSA-routed) and flow-matching generation."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init(np.random.default_rng(seed))
        self._mask_cache: dict = {}

    # -- parameters ---------------------------------------------------------

    def _add(self, name, arr):
        self.params[name] = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True, name=name)

    def _init(self, rng):
        c = self.config
        d, pd, C = c.d_model, c.patch_det ** 2, c.latent_channels
        emb = lambda *s: trunc_normal(rng, s)  # noqa: E731
        tn = lambda *s: trunc_normal(rng, s, std=s[0] ** -0.5)  # noqa: E731
        self._add("det_embed.w", tn(pd, d))
        self._add("det_embed.b", np.zeros(d))
        self._add("det_pos", emb(c.n_det_tokens, d))
        self._add("gen_in.w", tn(C, d))
        self._add("gen_in.b", np.zeros(d))
        self._add("gen_pos", emb(c.n_gen_tokens, d))
        self._add("t_embed.w", tn(c.t_embed_dim, d))
        self._add("t_embed.b", np.zeros(d))
        self._add("tok_embed", emb(c.vocab_size, d))
        self._add("text_pos", emb(c.max_text_len, d))
        hid = c.ffn_mult * d
        for i in range(c.n_layers):
            p = f"layers.{i}."
            for w in ("wq", "wk", "wv", "wo"):
                self._add(p + "attn." + w, tn(d, d))
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))
            self._add(p + "ff.w1", tn(d, hid))
            self._add(p + "ff.b1", np.zeros(hid))
            self._add(p + "ff.w2", tn(hid, d))
            self._add(p + "ff.b2", np.zeros(d))
        self._add("final_ln.g", np.ones(d))
        self._add("final_ln.b", np.zeros(d))
        self._add("det_head.w1", tn(d, d))
        self._add("det_head.b1", np.zeros(d))
        self._add("det_head.w2", tn(d, 1))
        self._add("det_head.b2", np.zeros(1))
        self._add("text_head.w", tn(d, c.vocab_size))
        self._add("text_head.b", np.zeros(c.vocab_size))
        self._add("v_head.w", tn(d, C))
        self._add("v_head.b", np.zeros(C))
        self.buffers["latent_mean"] = np.zeros(C, np.float32)
        self.buffers["latent_std"] = np.ones(C, np.float32)

    def add_diga_projection(self, seed: int = 0, out_dim: int | None = None) -> None:
        """Create the generator-to-detector projection (2-layer MLP) if missing."""
        if "diga.w1" in self.params:
            return
        rng = np.random.default_rng(seed)
        d = self.config.d_model
        out_dim = out_dim or d
        self._add("diga.w1", trunc_normal(rng, (d, d), std=d ** -0.5))
        self._add("diga.b1", np.zeros(d))
        self._add("diga.w2", trunc_normal(rng, (d, out_dim), std=d ** -0.5))
        self._add("diga.b2", np.zeros(out_dim))

    def layer(self, i: int) -> SmsaLayer:
        p = self.params
        pre = f"layers.{i}."
        return SmsaLayer(
            attn=MhaParams(p[pre + "attn.wq"], p[pre + "attn.wk"], p[pre + "attn.wv"], p[pre + "attn.wo"],
                           self.config.n_heads),
            ln1_g=p[pre + "ln1.g"], ln1_b=p[pre + "ln1.b"], ln2_g=p[pre + "ln2.g"], ln2_b=p[pre + "ln2.b"],
            ff_w1=p[pre + "ff.w1"], ff_b1=p[pre + "ff.b1"], ff_w2=p[pre + "ff.w2"], ff_b2=p[pre + "ff.b2"],
        )

    def copy(self, dtype=None) -> "UnifiedModel":
        other = UnifiedModel.__new__(UnifiedModel)
        other.config = ModelConfig(**asdict(self.config))
        other.dtype = np.dtype(dtype or self.dtype)
        other.params = {k: Tensor(v.data.astype(other.dtype, copy=True), requires_grad=True, name=k)
                        for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._mask_cache = {}
        return other

    def set_latent_stats(self, latents: np.ndarray) -> None:
        """Per-channel standardization statistics from ``(..., C)`` clean latents."""
        flat = np.asarray(latents, np.float64).reshape(-1, self.config.latent_channels)
        self.buffers["latent_mean"] = flat.mean(axis=0).astype(np.float32)
        self.buffers["latent_std"] = np.maximum(flat.std(axis=0), 1e-3).astype(np.float32)

    # -- encoders -----------------------------------------------------------

    def _check_images(self, images) -> np.ndarray:
        x = np.asarray(images)
        if x.ndim == 2:
            x = x[None]
        s = self.config.image_size
        if x.ndim != 3 or x.shape[1:] != (s, s):
            raise tg.ShapeError("image", x.shape, (s, s))
        return x

    def encode_gen(self, images) -> np.ndarray:
        """Fixed, exactly invertible space-to-depth patchify: ``(B, N_gen, patch^2)``."""
        x = np.asarray(images)
        if x.shape[-2:] != (self.config.image_size,) * 2:
            raise tg.ShapeError("encode_gen", x.shape, (self.config.image_size,) * 2)
        return space_to_depth(x, self.config.patch_gen)

    def decode_gen(self, latents) -> np.ndarray:
        return depth_to_space(latents, self.config.patch_gen)

    def standardize(self, latents: np.ndarray) -> np.ndarray:
        return ((latents - self.buffers["latent_mean"]) / self.buffers["latent_std"]).astype(self.dtype)

    def destandardize(self, latents: np.ndarray) -> np.ndarray:
        return (latents * self.buffers["latent_std"] + self.buffers["latent_mean"]).astype(self.dtype)

    def encode_det(self, images) -> Tensor:
        x = self._check_images(images)
        # centered per image so the learned embedding sees texture, not exposure
        x = (x - x.mean(axis=(-2, -1), keepdims=True)) / DET_INPUT_SCALE
        patches = Tensor(space_to_depth(x, self.config.patch_det).astype(self.dtype))
        p = self.params
        return tg.add(tg.add(tg.matmul(patches, p["det_embed.w"]), p["det_embed.b"]), p["det_pos"])

    def embed_latents(self, x_t, t) -> Tensor:
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        feats = Tensor(timestep_features(t, self.config.t_embed_dim)[:, None, :].astype(self.dtype))
        p = self.params
        temb = tg.add(tg.matmul(feats, p["t_embed.w"]), p["t_embed.b"])
        h = tg.add(tg.add(tg.matmul(x, p["gen_in.w"]), p["gen_in.b"]), p["gen_pos"])
        return tg.add(h, temb)

    def embed_text(self, ids: np.ndarray, offset: int = 0) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[-1]
        if offset + n > self.config.max_text_len:
            raise ValueError(f"text of length {offset + n} exceeds max_text_len {self.config.max_text_len}")
        if ids.size and ids.max() >= self.config.vocab_size:
            raise IndexError(f"token id {int(ids.max())} >= vocab_size {self.config.vocab_size}")
        pos = tg.slice_rows(self.params["text_pos"], offset, offset + n)
        return tg.add(tg.gather_rows(self.params["tok_embed"], ids), pos)

    # -- forward passes -----------------------------------------------------

    def _backbone(self, x: Tensor, mask: np.ndarray, capture: int | None = None, rows: slice | None = None):
        hidden = None
        for i in range(self.config.n_layers):
            x = layer_forward(x, mask, self.layer(i))
            if capture is not None and i + 1 == capture:
                hidden = tg.slice_rows(x, rows.start, rows.stop)
        return tg.layernorm(x, self.params["final_ln.g"], self.params["final_ln.b"]), hidden

    def detection_layout(self, n_instr: int, n_answer: int = 0) -> SeqLayout:
        c = self.config
        return SeqLayout.for_detection(c.n_gen_tokens, c.n_det_tokens, n_instr, n_answer)

    def detection_mask(self, n_instr: int, n_answer: int = 0) -> np.ndarray:
        key = ("det", n_instr, n_answer, self.config.smsa_on, self.config.text_in_smsa)
        if key not in self._mask_cache:
            self._mask_cache[key] = build_detection_mask(self.detection_layout(n_instr, n_answer),
                                                         text_in_smsa=self.config.text_in_smsa,
                                                         smsa_on=self.config.smsa_on)
        return self._mask_cache[key]

    def detect_forward(self, images, instruction_tokens, answer_tokens=None) -> DetOutput:
        """Detection pass over ``[z_gen | h_det | instruction | answer]``.

        ``answer_tokens`` are teacher-forcing inputs (answer shifted right by
        one, i.e. without its last token) and may be omitted at inference.
        """
        x_img = self._check_images(images)
        b = x_img.shape[0]
        instr = np.asarray(instruction_tokens).reshape(b, -1)
        text_ids = instr
        n_ans = 0
        if answer_tokens is not None:
            ans = np.asarray(answer_tokens).reshape(b, -1)
            n_ans = ans.shape[1]
            text_ids = np.concatenate([instr, ans], axis=1)
        z = self.standardize(self.encode_gen(x_img))
        zg = self.embed_latents(z, np.zeros(b))
        hd = self.encode_det(x_img)
        ht = self.embed_text(text_ids)
        x = tg.concat_rows([zg, hd, ht])
        layout = self.detection_layout(instr.shape[1], n_ans)
        out, _ = self._backbone(x, self.detection_mask(instr.shape[1], n_ans))
        ds = layout.det_slice()
        h_det = tg.slice_rows(out, ds.start, ds.stop)
        p = self.params
        pooled = tg.mean_pool_rows(h_det)
        hid = tg.gelu(tg.add(tg.matmul(pooled, p["det_head.w1"]), p["det_head.b1"]))
        logit = tg.reshape(tg.add(tg.matmul(hid, p["det_head.w2"]), p["det_head.b2"]), (b,))
        ts = layout.text_slice()
        h_text = tg.slice_rows(out, ts.start, ts.stop)
        logits = tg.add(tg.matmul(h_text, p["text_head.w"]), p["text_head.b"])
        return DetOutput(logit, logits, h_det, h_det)

    def condition_tokens(self, caption_tokens) -> np.ndarray:
        cap = np.asarray(caption_tokens, dtype=np.int64)
        if not self.config.detector_text_condition:
            return cap
        # detector's explanation vocabulary for authentic images, appended as extra condition tokens
        real = np.array(TOKENIZER.encode(EXPLANATIONS["real"]), dtype=np.int64)
        return np.concatenate([cap, np.broadcast_to(real, (cap.shape[0], real.size))], axis=1)

    def generation_mask(self, n_caption: int) -> np.ndarray:
        key = ("gen", n_caption)
        if key not in self._mask_cache:
            self._mask_cache[key] = build_generation_mask(
                SeqLayout.for_generation(n_caption, self.config.n_gen_tokens))
        return self._mask_cache[key]

    def gen_forward(self, x_t, t, caption_tokens, hidden_layer: int | None = None) -> GenOutput:
        """Velocity field for latents ``x_t`` (standardized, ``(B, N_gen, C)``) at flow time ``t``."""
        x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=self.dtype))
        c = self.config
        if x.ndim != 3 or x.shape[1:] != (c.n_gen_tokens, c.latent_channels):
            raise tg.ShapeError("gen_forward", x.shape, (c.n_gen_tokens, c.latent_channels))
        b = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (b,))
        if np.any(t <= 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
            raise ValueError(f"flow time must lie in (0, 1], got {t.min()}..{t.max()}")
        if hidden_layer is not None and not 1 <= hidden_layer <= c.n_layers:
            raise ValueError(f"hidden_layer {hidden_layer} outside 1..{c.n_layers}")
        cond = self.condition_tokens(np.asarray(caption_tokens).reshape(b, -1))
        n_cap = cond.shape[1]
        parts = [self.embed_text(cond)] if n_cap else []
        parts.append(self.embed_latents(x, t))
        seq = tg.concat_rows(parts) if len(parts) > 1 else parts[0]
        rows = slice(n_cap, n_cap + c.n_gen_tokens)
        out, hidden = self._backbone(seq, self.generation_mask(n_cap), hidden_layer, rows)
        lat = tg.slice_rows(out, rows.start, rows.stop)
        v = tg.add(tg.matmul(lat, self.params["v_head.w"]), self.params["v_head.b"])
        return GenOutput(v, hidden)

    def diga_project(self, z_g: Tensor) -> Tensor:
        p = self.params
        h = tg.gelu(tg.add(tg.matmul(z_g, p["diga.w1"]), p["diga.b1"]))
        return tg.add(tg.matmul(h, p["diga.w2"]), p["diga.b2"])

    # -- inference helpers --------------------------------------------------

    def fake_probability(self, images, instruction_tokens, batch: int = 64) -> np.ndarray:
        x = self._check_images(images)
        instr = np.asarray(instruction_tokens).reshape(len(x), -1)
        out = []
        for s in range(0, len(x), batch):
            logit = self.detect_forward(x[s:s + batch], instr[s:s + batch]).fake_logit.data
            out.append(1.0 / (1.0 + np.exp(-logit.astype(np.float64))))
        return np.concatenate(out)

    def features(self, images, instruction_tokens, batch: int = 64) -> np.ndarray:
        """Mean-pooled final-layer detection features, ``(B, d_model)``."""
        x = self._check_images(images)
        instr = np.asarray(instruction_tokens).reshape(len(x), -1)
        out = []
        for s in range(0, len(x), batch):
            h = self.detect_forward(x[s:s + batch], instr[s:s + batch]).h_det
            out.append(tg.mean_pool_rows(h).data.astype(np.float64))
        return np.concatenate(out)

    def explain(self, images, instruction_tokens, max_len: int, batch: int = 64,
                temperature: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
        """Decode explanation tokens; greedy unless ``temperature`` > 0. Returns ``(B, max_len)``."""
        x = self._check_images(images)
        instr = np.asarray(instruction_tokens, dtype=np.int64).reshape(len(x), -1)
        eos, pad = TOKENIZER.eos_id, TOKENIZER.pad_id
        result = np.full((len(x), max_len), pad, dtype=np.int64)
        for s in range(0, len(x), batch):
            xb, qb = x[s:s + batch], instr[s:s + batch]
            gen = np.zeros((len(xb), 0), dtype=np.int64)
            done = np.zeros(len(xb), bool)
            for _ in range(max_len):
                logits = self.detect_forward(xb, qb, gen if gen.shape[1] else None).answer_logits.data
                last = logits[:, -1, :].astype(np.float64)
                if temperature > 0:
                    z = last / temperature
                    z = np.exp(z - z.max(axis=1, keepdims=True))
                    z /= z.sum(axis=1, keepdims=True)
                    nxt = np.array([rng.choice(len(r), p=r) for r in z])
                else:
                    nxt = last.argmax(axis=1)
                nxt = np.where(done, pad, nxt)
                done |= nxt == eos
                gen = np.concatenate([gen, nxt[:, None]], axis=1)
                if done.all():
                    break
            result[s:s + batch, :gen.shape[1]] = gen
        return result


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"GDTCKPT\0"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(model: UnifiedModel) -> bytes:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(cfg)), cfg]
    entries = [(k, 0, v.data) for k, v in model.params.items()] + \
              [(k, 1, v) for k, v in model.buffers.items()]
    chunks.append(struct.pack("<I", len(entries)))
    for name, kind, arr in entries:
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def save_checkpoint(path, model: UnifiedModel) -> bytes:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> UnifiedModel:
    raw = Path(path).read_bytes()
    return checkpoint_from_bytes(raw, str(path))


def checkpoint_from_bytes(raw: bytes, source: str = "<bytes>") -> UnifiedModel:
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    pos = 8
    try:
        (version,) = struct.unpack_from("<I", raw, pos)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", raw, pos + 4)
        pos += 8
        cfg = ModelConfig.from_dict(json.loads(raw[pos:pos + n].decode()))
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        model = UnifiedModel.__new__(UnifiedModel)
        model.config, model.dtype, model.params, model.buffers, model._mask_cache = \
            cfg, np.dtype(np.float32), {}, {}, {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode()
            pos += ln
            kind, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(raw):
                raise CheckpointError(f"{source}: truncated tensor {name}")
            arr = np.frombuffer(raw, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
            if kind == 0:
                model.params[name] = Tensor(arr, requires_grad=True, name=name)
            else:
                model.buffers[name] = arr
    except struct.error as e:
        raise CheckpointError(f"{source}: truncated checkpoint ({e})") from None
    if pos != len(raw):
        raise CheckpointError(f"{source}: {len(raw) - pos} trailing bytes")
    return model
