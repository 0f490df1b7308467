"""Procedural real/fake image corpora with known artifacts and templated text.

Real images are soft shaded blobs over a directional background gradient.
A fake is a real image with exactly one injected artifact, and its
explanation is fixed by the artifact kind, so the explanation reference is
exact by construction.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"

VOCAB: tuple[str, ...] = (
    PAD, BOS, EOS, UNK,
    "does", "the", "image", "look", "real", "or", "fake", "?", "is", "this", "picture",
    "generated", "tell", "me", "whether",
    "one", "two", "three", "small", "large", "blob", "blobs", "lit", "from", "left", "right",
    "top", "bottom", "on", "dark", "bright", "background",
    ".", "lighting", "consistent", "and", "texture", "looks", "natural", "checkerboard", "pattern",
    "in", "fine", "banding", "with", "abrupt", "intensity", "steps", "conflict", "between",
    "shading", "duplicated", "patch", "hard", "edges", "periodic", "tilt", "pixel", "statistics",
)

ARTIFACT_KINDS: tuple[str, ...] = (
    "checkerboard", "banding", "lighting_conflict", "patch_duplication", "latent_tilt",
)
# kind code 0 is "real"; fakes use 1 + index into ARTIFACT_KINDS
REAL_KIND = 0

INSTRUCTIONS: tuple[str, ...] = (
    "does the image look real or fake ?",
    "is this image real or fake ?",
    "is the picture real or generated ?",
    "tell me whether this image is real",
)

EXPLANATIONS: dict[str, str] = {
    "real": "real . lighting is consistent and texture looks natural",
    "checkerboard": "fake . checkerboard pattern in fine texture",
    "banding": "fake . banding with abrupt intensity steps",
    "lighting_conflict": "fake . lighting conflict between shading and background",
    "patch_duplication": "fake . duplicated patch with hard edges",
    "latent_tilt": "fake . periodic tilt in pixel statistics",
}

DIRECTIONS = ("left", "right", "top", "bottom")

# strength ranges per artifact; the meaning of strength is kind-specific
# destinations tried per patch_duplication; the most visible seam wins
PATCH_CANDIDATES = 8

STRENGTH_RANGES: dict[str, tuple[float, float]] = {
    "checkerboard": (0.04, 0.08),       # +/- amplitude
    "banding": (0.1, 0.2),              # quantization step
    "lighting_conflict": (0.6, 0.8),    # amplitude of the opposing ramp
    "patch_duplication": (0.4, 0.5),    # patch side as a fraction of image side
    "latent_tilt": (0.1, 0.25),         # relative gain on one space-to-depth channel
}


class Tokenizer:
    """Whitespace tokenizer over the closed template vocabulary."""

    def __init__(self, words: tuple[str, ...] = VOCAB):
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}
        self.pad_id = self.index[PAD]
        self.bos_id = self.index[BOS]
        self.eos_id = self.index[EOS]
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str, eos: bool = False) -> list[int]:
        ids = [self.index.get(w, self.unk_id) for w in text.lower().split()]
        return ids + [self.eos_id] if eos else ids

    def decode(self, ids, strip: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == self.eos_id:
                break
            if strip and i in (self.pad_id, self.bos_id):
                continue
            out.append(self.words[i] if 0 <= i < len(self.words) else UNK)
        return " ".join(out)

    def pad(self, ids: list[int], length: int) -> np.ndarray:
        if len(ids) > length:
            raise ValueError(f"token sequence of length {len(ids)} exceeds {length}")
        return np.array(ids + [self.pad_id] * (length - len(ids)), dtype=np.uint8)

    @property
    def vocab_hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode()).hexdigest()[:16]


TOKENIZER = Tokenizer()
INSTR_LEN = max(len(TOKENIZER.encode(q)) for q in INSTRUCTIONS)
ANSWER_LEN = max(len(TOKENIZER.encode(a, eos=True)) for a in EXPLANATIONS.values())
CAPTION_LEN = 9


def explanation_for(label: int, kind: str | None) -> str:
    return EXPLANATIONS["real"] if label == 0 else EXPLANATIONS[kind]


# ---------------------------------------------------------------------------
# rendering

@dataclass
class SceneSpec:
    blob_count: int
    centers: np.ndarray          # (k, 2) as (row, col)
    radii: np.ndarray            # (k,)
    blob_gain: np.ndarray        # (k,)
    direction: str
    base: float
    ramp: float

    @classmethod
    def sample(cls, rng: np.random.Generator, size: int = 32) -> "SceneSpec":
        k = int(rng.integers(1, 4))
        s = size / 32.0
        radii = rng.uniform(3.0, 7.0, size=k) * s
        centers = np.stack([rng.uniform(r, size - 1 - r, size=2) for r in radii])
        return cls(
            blob_count=k,
            centers=centers,
            radii=radii,
            blob_gain=rng.uniform(0.12, 0.2, size=k),
            direction=DIRECTIONS[int(rng.integers(4))],
            base=float(rng.uniform(0.1, 0.3)),
            ramp=float(rng.uniform(0.1, 0.16)),
        )

    def caption(self, size: int = 32) -> str:
        count = ("one", "two", "three")[self.blob_count - 1]
        big = "large" if self.radii.mean() >= 5.0 * size / 32.0 else "small"
        noun = "blob" if self.blob_count == 1 else "blobs"
        tone = "dark" if self.base < 0.2 else "bright"
        return f"{count} {big} {noun} lit from {self.direction} on {tone} background"


def light_ramp(direction: str, size: int) -> np.ndarray:
    """Ramp in [0, 1] that rises toward the side the light comes from."""
    u = np.linspace(0.0, 1.0, size)
    if direction == "left":
        r = np.tile(u[::-1], (size, 1))
    elif direction == "right":
        r = np.tile(u, (size, 1))
    elif direction == "top":
        r = np.tile(u[::-1, None], (1, size))
    elif direction == "bottom":
        r = np.tile(u[:, None], (1, size))
    else:
        raise ValueError(f"unknown light direction {direction!r}")
    return r


_DIR_VEC = {"left": (0.0, -1.0), "right": (0.0, 1.0), "top": (-1.0, 0.0), "bottom": (1.0, 0.0)}


def render(spec: SceneSpec, size: int, rng: np.random.Generator, noise: float = 0.01) -> np.ndarray:
    img = spec.base + spec.ramp * light_ramp(spec.direction, size)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    ly, lx = _DIR_VEC[spec.direction]
    for (cy, cx), r, g in zip(spec.centers, spec.radii, spec.blob_gain):
        dy, dx = rows - cy, cols - cx
        dist = np.hypot(dy, dx)
        disk = 1.0 / (1.0 + np.exp((dist - r) / 0.8))
        shade = np.clip((dy * ly + dx * lx) / r, -1.0, 1.0)
        img = img + g * disk * (1.0 + 0.5 * shade)
    img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_seed(corpus_seed: int, split: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(corpus_seed), int(split), int(index)])


def make_real(seed, size: int = 32) -> np.ndarray:
    return make_scene(seed, size)[0]


def make_scene(seed, size: int = 32) -> tuple[np.ndarray, SceneSpec]:
    rng = np.random.default_rng(seed)
    spec = SceneSpec.sample(rng, size)
    return render(spec, size, rng), spec


def _dominant_light(image: np.ndarray) -> str:
    b = max(1, image.shape[0] // 4)
    diffs = {
        "left": image[:, :b].mean() - image[:, -b:].mean(),
        "right": image[:, -b:].mean() - image[:, :b].mean(),
        "top": image[:b].mean() - image[-b:].mean(),
        "bottom": image[-b:].mean() - image[:b].mean(),
    }
    return max(DIRECTIONS, key=lambda d: diffs[d])


_OPPOSITE = {"left": "right", "right": "left", "top": "bottom", "bottom": "top"}


def inject_artifact(image: np.ndarray, kind: str, strength: float, seed=None, patch: int = 4,
                    direction: str | None = None) -> np.ndarray:
    """Return a copy of ``image`` carrying exactly one artifact of ``kind``.

    Strength semantics: checkerboard amplitude; banding quantization step
    (``1/strength + 1`` levels on [0, 1]); lighting_conflict amplitude of a ramp
    opposing the scene light; patch_duplication copied-patch side as a fraction
    of the image side; latent_tilt relative gain on one space-to-depth channel.
    """
    if kind not in ARTIFACT_KINDS:
        raise ValueError(f"unknown artifact kind {kind!r}")
    if not strength > 0:
        raise ValueError(f"artifact strength must be positive, got {strength}")
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float64).copy()
    h, w = img.shape
    if kind == "checkerboard":
        sign = np.where((np.add.outer(np.arange(h), np.arange(w)) % 2) == 0, -1.0, 1.0)
        img = img + strength * sign
    elif kind == "banding":
        img = np.floor(img / strength + 0.5) * strength
    elif kind == "lighting_conflict":
        light = direction or _dominant_light(img)
        img = img + strength * (light_ramp(_OPPOSITE[light], h) - 0.5)
    elif kind == "patch_duplication":
        side = int(min(max(2, round(strength * h)), h // 2))
        axis = 0 if (direction or _dominant_light(img)) in ("top", "bottom") else 1
        # a corner of the source box sits on the pixel standing out most from
        # the background plane (a blob), so the copy carries a blob cut by the
        # box edges; of a few random destinations the one with the strongest
        # seam against its surroundings is used
        r, c = np.unravel_index(int(np.argmax(np.abs(_plane_residual(img)))), img.shape)
        anchor = (int(r if r + side <= h else r - side + 1), int(c if c + side <= w else c - side + 1))
        best = None
        for _ in range(PATCH_CANDIDATES):
            src, dst = _disjoint_boxes(rng, h, w, side, axis, anchor)
            score = _seam_contrast(img, img[src[0]:src[0] + side, src[1]:src[1] + side], dst)
            if best is None or score > best[0]:
                best = (score, src, dst)
        _, src, dst = best
        img[dst[0]:dst[0] + side, dst[1]:dst[1] + side] = img[src[0]:src[0] + side, src[1]:src[1] + side]
    elif kind == "latent_tilt":
        if h % patch or w % patch:
            raise ValueError(f"image {img.shape} not divisible by patch {patch}")
        c = int(rng.integers(patch * patch))
        img[c // patch::patch, c % patch::patch] *= 1.0 + strength
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _plane_residual(img) -> np.ndarray:
    """Image minus its least-squares fit ``a + b*row + c*col``."""
    h, w = img.shape
    rr, cc = np.mgrid[0:h, 0:w]
    basis = np.stack([np.ones(h * w), rr.ravel(), cc.ravel()], axis=1)
    coef, *_ = np.linalg.lstsq(basis, img.ravel(), rcond=None)
    return img - (basis @ coef).reshape(h, w)


def _seam_contrast(img, patch, dst) -> float:
    """Mean absolute step across the border of ``patch`` pasted at ``dst``."""
    h, w = img.shape
    r, c = dst
    n, m = patch.shape
    steps = []
    if r > 0:
        steps.append(np.abs(patch[0] - img[r - 1, c:c + m]))
    if r + n < h:
        steps.append(np.abs(patch[-1] - img[r + n, c:c + m]))
    if c > 0:
        steps.append(np.abs(patch[:, 0] - img[r:r + n, c - 1]))
    if c + m < w:
        steps.append(np.abs(patch[:, -1] - img[r:r + n, c + m]))
    return float(np.concatenate(steps).mean())


def _disjoint_boxes(rng, h, w, side, axis=None, src=None):
    """Two non-overlapping boxes; with ``axis`` set they are at least half the
    image apart along it, so the copy lands on a different background level.
    A given ``src`` is kept unless no admissible partner exists for it."""
    gap = (h if axis == 0 else w) // 2 if axis is not None else 0
    fixed, tries = src, 0
    while True:
        tries += 1
        if fixed is not None and tries <= 200:
            src = fixed
        else:
            src = (int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)))
        dst = (int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1)))
        if abs(src[0] - dst[0]) < side and abs(src[1] - dst[1]) < side:
            continue
        if axis is None or abs(src[axis] - dst[axis]) >= min(gap, (h, w)[axis] - side):
            return src, dst


# ---------------------------------------------------------------------------
# samples and corpora

@dataclass
class DetSample:
    image: np.ndarray
    instruction: np.ndarray
    label: int
    answer: np.ndarray
    kind: str | None


@dataclass
class GenSample:
    image: np.ndarray
    caption: np.ndarray


@dataclass
class DetSet:
    images: np.ndarray       # (N, S, S) float32
    labels: np.ndarray       # (N,) uint8, 1 = fake
    kinds: np.ndarray        # (N,) uint8, 0 = real
    instr: np.ndarray        # (N, INSTR_LEN) uint8, padded
    answers: np.ndarray      # (N, ANSWER_LEN) uint8, padded, EOS-terminated
    answer_lens: np.ndarray  # (N,) uint8

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> DetSample:
        k = int(self.kinds[i])
        return DetSample(self.images[i], self.instr[i], int(self.labels[i]),
                         self.answers[i, :self.answer_lens[i]], None if k == 0 else ARTIFACT_KINDS[k - 1])

    def subset(self, idx) -> "DetSet":
        return DetSet(*(a[idx] for a in (self.images, self.labels, self.kinds, self.instr,
                                          self.answers, self.answer_lens)))


@dataclass
class GenSet:
    images: np.ndarray       # (N, S, S)
    captions: np.ndarray     # (N, CAPTION_LEN) uint8

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> GenSample:
        return GenSample(self.images[i], self.captions[i])

    def subset(self, idx) -> "GenSet":
        return GenSet(self.images[idx], self.captions[idx])


@dataclass
class CorpusConfig:
    n_det_train: int = 1600
    n_det_test: int = 400
    n_gen_train: int = 1000
    n_gen_test: int = 256
    image_size: int = 32
    patch: int = 4
    strength_ranges: dict = field(default_factory=lambda: dict(STRENGTH_RANGES))


SPLITS = {"det-train": 0, "det-test": 1, "gen-train": 2, "gen-test": 3}


def make_det_sample(seed_seq, index: int, size: int = 32, patch: int = 4,
                    ranges: dict | None = None) -> tuple[np.ndarray, int, int, int, str]:
    """Image, label, kind code, instruction index and explanation for one det record.

    Even indices are real, odd indices fake; fakes cycle through the artifact
    kinds so classes and kinds are balanced exactly.
    """
    ranges = ranges or STRENGTH_RANGES
    scene_seed, art_seed, pick_seed = seed_seq.spawn(3)
    img, _ = make_scene(scene_seed, size)
    label = index % 2
    rng = np.random.default_rng(pick_seed)
    q_idx = int(rng.integers(len(INSTRUCTIONS)))
    if label == 0:
        return img, 0, REAL_KIND, q_idx, explanation_for(0, None)
    kind = ARTIFACT_KINDS[(index // 2) % len(ARTIFACT_KINDS)]
    lo, hi = ranges[kind]
    strength = float(rng.uniform(lo, hi))
    img = inject_artifact(img, kind, strength, art_seed, patch=patch)
    return img, 1, 1 + ARTIFACT_KINDS.index(kind), q_idx, explanation_for(1, kind)


def make_det_set(n: int, seed: int, split: str = "det-train", cfg: CorpusConfig | None = None) -> DetSet:
    cfg = cfg or CorpusConfig()
    s = cfg.image_size
    tok = TOKENIZER
    images = np.zeros((n, s, s), np.float32)
    labels = np.zeros(n, np.uint8)
    kinds = np.zeros(n, np.uint8)
    instr = np.zeros((n, INSTR_LEN), np.uint8)
    answers = np.zeros((n, ANSWER_LEN), np.uint8)
    alens = np.zeros(n, np.uint8)
    for i in range(n):
        img, y, k, q, expl = make_det_sample(sample_seed(seed, SPLITS[split], i), i, s, cfg.patch,
                                             cfg.strength_ranges)
        images[i], labels[i], kinds[i] = img, y, k
        instr[i] = tok.pad(tok.encode(INSTRUCTIONS[q]), INSTR_LEN)
        a = tok.encode(expl, eos=True)
        answers[i] = tok.pad(a, ANSWER_LEN)
        alens[i] = len(a)
    return DetSet(images, labels, kinds, instr, answers, alens)


def make_gen_set(n: int, seed: int, split: str = "gen-train", cfg: CorpusConfig | None = None) -> GenSet:
    cfg = cfg or CorpusConfig()
    s = cfg.image_size
    images = np.zeros((n, s, s), np.float32)
    caps = np.zeros((n, CAPTION_LEN), np.uint8)
    for i in range(n):
        img, spec = make_scene(sample_seed(seed, SPLITS[split], i), s)
        images[i] = img
        caps[i] = TOKENIZER.pad(TOKENIZER.encode(spec.caption(s)), CAPTION_LEN)
    return GenSet(images, caps)


# ---------------------------------------------------------------------------
# file format

MAGIC = b"GDTCORP\0"
VERSION = 1
_HEADER = struct.Struct("<8sHBIHBB16s")  # magic, version, kind, count, size, tok_a, tok_b, vocab hash


def _det_dtype(s: int) -> np.dtype:
    return np.dtype([("image", "<f4", (s, s)), ("label", "u1"), ("kind", "u1"),
                     ("instr_len", "u1"), ("instr", "u1", (INSTR_LEN,)),
                     ("answer_len", "u1"), ("answer", "u1", (ANSWER_LEN,))])


def _gen_dtype(s: int) -> np.dtype:
    return np.dtype([("image", "<f4", (s, s)), ("caption_len", "u1"), ("caption", "u1", (CAPTION_LEN,))])


def save_corpus(path, data: DetSet | GenSet) -> None:
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"refusing to overwrite existing corpus file {path}")
    s = data.images.shape[1]
    if isinstance(data, DetSet):
        rec = np.zeros(len(data), _det_dtype(s))
        rec["image"], rec["label"], rec["kind"] = data.images, data.labels, data.kinds
        rec["instr_len"] = (data.instr != TOKENIZER.pad_id).sum(axis=1)
        rec["instr"], rec["answer_len"], rec["answer"] = data.instr, data.answer_lens, data.answers
        header = _HEADER.pack(MAGIC, VERSION, 0, len(data), s, INSTR_LEN, ANSWER_LEN,
                              TOKENIZER.vocab_hash.encode())
    else:
        rec = np.zeros(len(data), _gen_dtype(s))
        rec["image"], rec["caption"] = data.images, data.captions
        rec["caption_len"] = (data.captions != TOKENIZER.pad_id).sum(axis=1)
        header = _HEADER.pack(MAGIC, VERSION, 1, len(data), s, CAPTION_LEN, 0,
                              TOKENIZER.vocab_hash.encode())
    with open(path, "xb") as f:
        f.write(header)
        f.write(rec.tobytes())


class CorpusFormatError(ValueError):
    pass


def load_corpus(path) -> DetSet | GenSet:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorpusFormatError(f"{path}: truncated header")
    magic, version, kind, count, s, a, b, vhash = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorpusFormatError(f"{path}: unsupported corpus version {version}")
    if vhash != TOKENIZER.vocab_hash.encode():
        raise CorpusFormatError(f"{path}: vocabulary hash mismatch")
    dt = _det_dtype(s) if kind == 0 else _gen_dtype(s)
    body = raw[_HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise CorpusFormatError(f"{path}: expected {count} records of {dt.itemsize} bytes")
    rec = np.frombuffer(body, dtype=dt)
    if kind == 0:
        return DetSet(rec["image"].copy(), rec["label"].copy(), rec["kind"].copy(), rec["instr"].copy(),
                      rec["answer"].copy(), rec["answer_len"].copy())
    return GenSet(rec["image"].copy(), rec["caption"].copy())


CORPUS_FILES = {k: f"{k}.gdc" for k in SPLITS}


def make_corpus(cfg: CorpusConfig, seed: int, out_dir) -> dict[str, Path]:
    """Write det-train/det-test/gen-train/gen-test corpus files under ``out_dir``."""
    out = Path(out_dir)
    paths = {k: out / v for k, v in CORPUS_FILES.items()}
    clash = [str(p) for p in paths.values() if p.exists()]
    if clash:
        raise FileExistsError(f"corpus output already exists: {', '.join(clash)}")
    os.makedirs(out, exist_ok=True)
    save_corpus(paths["det-train"], make_det_set(cfg.n_det_train, seed, "det-train", cfg))
    save_corpus(paths["det-test"], make_det_set(cfg.n_det_test, seed, "det-test", cfg))
    save_corpus(paths["gen-train"], make_gen_set(cfg.n_gen_train, seed, "gen-train", cfg))
    save_corpus(paths["gen-test"], make_gen_set(cfg.n_gen_test, seed, "gen-test", cfg))
    return paths


# ---------------------------------------------------------------------------
# PGM

class PGMError(ValueError):
    pass


def write_pgm(path, image: np.ndarray, maxval: int = 65535) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    q = np.floor(img * maxval + 0.5)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(data)


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise PGMError(f"{path}: malformed PGM header {tokens!r}") from None
    if not 0 < maxval < 65536:
        raise PGMError(f"{path}: bad maxval {maxval}")
    if magic == b"P5":
        pos += 1
        dt = ">u2" if maxval > 255 else "u1"
        n = w * h * np.dtype(dt).itemsize
        if len(raw) - pos < n:
            raise PGMError(f"{path}: truncated pixel data")
        arr = np.frombuffer(raw[pos:pos + n], dtype=dt).reshape(h, w)
    elif magic == b"P2":
        vals = raw[pos:].split()
        if len(vals) < w * h:
            raise PGMError(f"{path}: truncated pixel data")
        arr = np.array([int(v) for v in vals[:w * h]]).reshape(h, w)
    else:
        raise PGMError(f"{path}: not a PGM file (magic {magic!r})")
    return (arr.astype(np.float64) / maxval).astype(np.float32)
