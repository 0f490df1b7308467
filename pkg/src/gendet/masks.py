"""Task-routed boolean attention masks for the unified token sequence.

Detection sequences are laid out ``[z_gen | h_det | text]``; generation
sequences put the caption first, ``[caption | z_gen]``, because latents
attend to the preceding prompt.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class TextSpan:
    start: int
    length: int
    causal: bool = True

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class SeqLayout:
    n_gen: int
    n_det: int
    text_spans: tuple[TextSpan, ...] = field(default_factory=tuple)
    gen_start: int = 0

    @property
    def det_start(self) -> int:
        return self.gen_start + self.n_gen

    @property
    def n_text(self) -> int:
        return sum(s.length for s in self.text_spans)

    @property
    def total(self) -> int:
        return self.n_gen + self.n_det + self.n_text

    @property
    def text_start(self) -> int:
        return self.text_spans[0].start if self.text_spans else self.total

    def gen_slice(self) -> slice:
        return slice(self.gen_start, self.gen_start + self.n_gen)

    def det_slice(self) -> slice:
        return slice(self.det_start, self.det_start + self.n_det)

    def text_slice(self) -> slice:
        return slice(self.text_start, self.text_start + self.n_text)

    @classmethod
    def for_detection(cls, n_gen: int, n_det: int, n_instruction: int, n_answer: int = 0) -> "SeqLayout":
        start = n_gen + n_det
        spans = [TextSpan(start, n_instruction, True)]
        if n_answer:
            spans.append(TextSpan(start + n_instruction, n_answer, True))
        layout = cls(n_gen, n_det, tuple(spans), gen_start=0)
        layout.validate()
        return layout

    @classmethod
    def for_generation(cls, n_caption: int, n_gen: int) -> "SeqLayout":
        spans = (TextSpan(0, n_caption, True),) if n_caption else ()
        layout = cls(n_gen, 0, spans, gen_start=n_caption)
        layout.validate()
        return layout

    def validate(self) -> None:
        if min(self.n_gen, self.n_det) < 0:
            raise LayoutError("negative segment size")
        pos = None
        for s in self.text_spans:
            if s.length < 0:
                raise LayoutError(f"negative span length {s}")
            if pos is not None and s.start != pos:
                raise LayoutError(f"text spans must be contiguous and ordered, got {self.text_spans}")
            pos = s.stop
        if self.n_det and self.gen_start != 0:
            raise LayoutError("detection layouts place z_gen first")
        if self.n_det == 0 and self.text_spans and self.gen_start not in (0, self.n_text):
            raise LayoutError("generation layout: latents must follow the caption")


def build_generation_mask(layout: SeqLayout) -> np.ndarray:
    """Caption rows are causal; latent rows see every latent and every caption token."""
    if layout.n_det != 0:
        raise LayoutError(f"generation mask requires n_det == 0, got {layout.n_det}")
    if len(layout.text_spans) > 1:
        raise LayoutError("generation layout takes a single caption span")
    if layout.n_gen <= 0:
        raise LayoutError("generation layout needs at least one latent token")
    n = layout.total
    m = np.zeros((n, n), dtype=bool)
    tx = layout.text_slice()
    nt = layout.n_text
    if nt:
        m[tx, tx] = np.tril(np.ones((nt, nt), dtype=bool))
    g = layout.gen_slice()
    m[g, g] = True
    m[g, tx] = True
    return m


def build_detection_mask(layout: SeqLayout, text_in_smsa: bool = True, smsa_on: bool = True) -> np.ndarray:
    """Detection-task mask over ``[z_gen | h_det | instruction | answer]``.

    ``text_in_smsa`` lets detection rows see the instruction (not the answer).
    ``smsa_on=False`` hides every z_gen column from detection and text rows.
    """
    if layout.n_gen <= 0 or layout.n_det <= 0 or not layout.text_spans or layout.text_spans[0].length <= 0:
        raise LayoutError(
            f"detection mask needs z_gen, h_det and an instruction span; got n_gen={layout.n_gen}, "
            f"n_det={layout.n_det}, spans={layout.text_spans}")
    n = layout.total
    m = np.zeros((n, n), dtype=bool)
    g, d, tx = layout.gen_slice(), layout.det_slice(), layout.text_slice()
    instr = layout.text_spans[0]
    m[g, g] = True
    m[d, d] = True
    if smsa_on:
        m[d, g] = True
    if text_in_smsa:
        m[d, instr.start:instr.stop] = True
    nt = layout.n_text
    m[tx, tx] = np.tril(np.ones((nt, nt), dtype=bool))
    m[tx, d] = True
    if smsa_on:
        m[tx, g] = True
    return m


def mask_to_text(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if v else "." for v in row) for row in np.asarray(mask, bool))


def mask_from_text(text: str) -> np.ndarray:
    rows = [r.strip() for r in text.strip().splitlines() if r.strip()]
    return np.array([[c == "#" for c in r] for r in rows], dtype=bool)
