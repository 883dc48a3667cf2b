"""Symbolic visual-token layout around the decoder's image delimiters."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import NamedTuple

from tilepool.tiling import TilePlan

IM_START = "<im_start>"
IM_END = "<im_end>"
IM_COL = "<im_col>"
_PATCH_RE = re.compile(r"^<patch:(\d+):(\d+):(\d+)>$")


class Patch(NamedTuple):
    crop: int
    row: int
    col: int

    def __str__(self):
        return f"<patch:{self.crop}:{self.row}:{self.col}>"


Token = str | Patch


@dataclass(frozen=True)
class VisualSequence:
    tokens: tuple[Token, ...]

    def __len__(self):
        return len(self.tokens)

    @property
    def patch_count(self) -> int:
        return sum(isinstance(t, Patch) for t in self.tokens)

    def count(self, token: str) -> int:
        return sum(t == token for t in self.tokens if not isinstance(t, Patch))

    def to_text(self) -> str:
        return " ".join(str(t) for t in self.tokens) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "VisualSequence":
        tokens: list[Token] = []
        for word in text.split():
            if word in (IM_START, IM_END, IM_COL):
                tokens.append(word)
                continue
            m = _PATCH_RE.match(word)
            if not m:
                raise ValueError(f"unknown token {word!r}")
            tokens.append(Patch(*map(int, m.groups())))
        return cls(tuple(tokens))


def count_visual_tokens(n_tiles: int, per_crop: int) -> int:
    """Visual tokens for ``n_tiles`` tiles plus the thumbnail."""
    if n_tiles < 0 or per_crop < 1:
        raise ValueError("need n_tiles >= 0 and per_crop >= 1")
    return (n_tiles + 1) * per_crop


def sequence_length(n_tiles: int, pooled_rows: int, pooled_cols: int, per_crop_delimiters: bool = False) -> int:
    crops = n_tiles + 1
    delimiters = 2 * crops if per_crop_delimiters else 4
    return delimiters + crops * (pooled_rows * pooled_cols + pooled_rows)


def _crop_rows(crop: int, rows: int, cols: int) -> list[Token]:
    out: list[Token] = []
    for r in range(rows):
        out.extend(Patch(crop, r, c) for c in range(cols))
        out.append(IM_COL)
    return out


def assemble_sequence(plan: TilePlan | int, pooled_rows: int, pooled_cols: int,
                      per_crop_delimiters: bool = False) -> VisualSequence:
    """Thumbnail wrapped in one delimiter pair, all grid tiles in a second pair.

    Within a crop, patch tokens run left to right and top to bottom with an
    ``<im_col>`` after every pooled row. ``plan`` may be a tile count instead of
    a :class:`TilePlan`. With ``per_crop_delimiters`` each crop gets its own pair.
    """
    if pooled_rows < 1 or pooled_cols < 1:
        raise ValueError("pooled dimensions must be >= 1")
    n_tiles = plan.n_tiles if isinstance(plan, TilePlan) else int(plan)
    if n_tiles < 0:
        raise ValueError("tile count must be >= 0")
    tokens: list[Token] = [IM_START, *_crop_rows(0, pooled_rows, pooled_cols), IM_END]
    if per_crop_delimiters:
        for crop in range(1, n_tiles + 1):
            tokens += [IM_START, *_crop_rows(crop, pooled_rows, pooled_cols), IM_END]
    else:
        tokens.append(IM_START)
        for crop in range(1, n_tiles + 1):
            tokens += _crop_rows(crop, pooled_rows, pooled_cols)
        tokens.append(IM_END)
    return VisualSequence(tuple(tokens))


def parse_sequence(seq: VisualSequence) -> tuple[int, int, int]:
    """Recover (n_tiles, pooled_rows, pooled_cols) and validate the layout.

    Only the tile count survives; the rows x cols factorisation of the grid is
    not encoded in the token stream.
    """
    depth = 0
    patches: list[Patch] = []
    for t in seq.tokens:
        if t == IM_START:
            if depth:
                raise ValueError("nested <im_start>")
            depth = 1
        elif t == IM_END:
            if not depth:
                raise ValueError("<im_end> without <im_start>")
            depth = 0
        elif depth == 0:
            raise ValueError(f"token {t} outside delimiters")
        elif isinstance(t, Patch):
            patches.append(t)
    if depth:
        raise ValueError("unterminated <im_start>")
    if not patches:
        raise ValueError("sequence has no patch tokens")
    crops = max(p.crop for p in patches) + 1
    rows = max(p.row for p in patches) + 1
    cols = max(p.col for p in patches) + 1
    per_crop = seq.count(IM_START) != 2
    expected = assemble_sequence(crops - 1, rows, cols, per_crop_delimiters=per_crop)
    if expected.tokens != seq.tokens:
        raise ValueError("token order does not match the canonical layout")
    return crops - 1, rows, cols
