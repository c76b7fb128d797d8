"""Byte-level vocabulary, interleaved sequence packing and the omni-attention mask.

A packed sequence follows::

    [BOS] text [BOI] <time> u_1 .. u_N [EOI] text ... [EOS]

Boundary specials live in the text stream; a visual span is the time token
followed by its N fused tokens, and attends to itself bidirectionally.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from .latents import VisualLatent

SPECIALS = ("[BOS]", "[EOS]", "[BOI]", "[EOI]", "[BOV]", "[EOV]", "[PAD]")

TEXT, IMAGE, VIDEO, PAD = 0, 1, 2, 3
_KIND_CODE = {"text": TEXT, "image": IMAGE, "video": VIDEO}


class LayoutError(ValueError):
    """Items or layouts that violate the sequence grammar."""


class Vocab:
    """256 byte tokens followed by the special tokens."""

    def __init__(self):
        self.base = 256
        self.ids = {name: self.base + i for i, name in enumerate(SPECIALS)}
        self.names = {v: k for k, v in self.ids.items()}

    def __len__(self) -> int:
        return self.base + len(SPECIALS)

    def __getattr__(self, name):
        key = f"[{name.upper()}]"
        if name.isupper() and key in self.__dict__.get("ids", {}):
            return self.ids[key]
        raise AttributeError(name)

    def encode(self, text: Union[str, bytes]) -> list[int]:
        raw = text if isinstance(text, bytes) else text.encode("utf-8", "surrogateescape")
        return list(raw)

    def decode_bytes(self, ids: Sequence[int]) -> bytes:
        out = bytearray()
        for i in ids:
            i = int(i)
            if not 0 <= i < self.base:
                raise LayoutError(f"id {i} is not a byte token")
            out.append(i)
        return bytes(out)

    def is_special(self, i: int) -> bool:
        return self.base <= int(i) < len(self)


VOCAB = Vocab()


def detokenize(ids: Sequence[int], vocab: Vocab = VOCAB) -> str:
    """Render ids as text; specials become inline markers such as ``[BOI]``."""
    parts: list[str] = []
    run = bytearray()
    for i in ids:
        i = int(i)
        if 0 <= i < vocab.base:
            run.append(i)
        elif i in vocab.names:
            if run:
                parts.append(run.decode("utf-8", "surrogateescape"))
                run = bytearray()
            parts.append(vocab.names[i])
        else:
            raise LayoutError(f"unknown token id {i}")
    if run:
        parts.append(run.decode("utf-8", "surrogateescape"))
    return "".join(parts)


@dataclass
class VisualItem:
    """A visual element as the model sees it (``latent`` is x_t when noised)."""

    latent: VisualLatent
    t: float = 1.0
    noised: bool = False
    x1: np.ndarray | None = None
    x0: np.ndarray | None = None

    @property
    def kind(self) -> str:
        return self.latent.kind

    @property
    def n_tokens(self) -> int:
        return self.latent.n_tokens


Item = Union[str, VisualItem]


@dataclass
class Span:
    kind: str  # text | image | video
    start: int
    end: int
    text: str | None = None  # None marks a pure special-token span
    t: float | None = None
    noised: bool = False
    item: int | None = None  # index into the packed item list

    @property
    def length(self) -> int:
        return self.end - self.start

    @property
    def visual(self) -> bool:
        return self.kind != "text"

    @property
    def time_pos(self) -> int:
        return self.start


@dataclass
class SequenceLayout:
    spans: list[Span] = field(default_factory=list)
    total_len: int = 0
    complete: bool = True

    def visual_spans(self) -> list[Span]:
        return [s for s in self.spans if s.visual]

    def modality(self) -> np.ndarray:
        m = np.full(self.total_len, TEXT, dtype=np.int8)
        for s in self.visual_spans():
            m[s.start:s.end] = _KIND_CODE[s.kind]
        return m

    def span_ids(self) -> np.ndarray:
        """Per position: index of the visual span it belongs to, -1 in the text stream."""
        ids = np.full(self.total_len, -1, dtype=np.int64)
        for k, s in enumerate(self.visual_spans()):
            ids[s.start:s.end] = k
        return ids

    def to_json(self) -> str:
        return json.dumps({"total_len": self.total_len, "complete": self.complete,
                           "spans": [asdict(s) for s in self.spans]})

    @classmethod
    def from_json(cls, text: str) -> "SequenceLayout":
        obj = json.loads(text)
        return cls([Span(**s) for s in obj["spans"]], obj["total_len"], obj["complete"])


def _open_close(kind: str, vocab: Vocab) -> tuple[int, int]:
    if kind == "image":
        return vocab.ids["[BOI]"], vocab.ids["[EOI]"]
    return vocab.ids["[BOV]"], vocab.ids["[EOV]"]


def pack(items: Sequence[Item], vocab: Vocab = VOCAB, complete: bool = True,
         close_last: bool = True) -> tuple[SequenceLayout, np.ndarray]:
    """Lay out ``items`` as one sequence and return (layout, token ids).

    Visual positions hold ``[PAD]`` placeholders in the id stream; their inputs
    come from the fused visual features.  ``complete=False`` omits the final
    ``[EOS]``; ``close_last=False`` additionally leaves a trailing visual span
    open (no closing special), which is how sampling contexts end.
    """
    if not items:
        raise LayoutError("cannot pack an empty item list")
    ids: list[int] = [vocab.ids["[BOS]"]]
    spans: list[Span] = []
    for k, item in enumerate(items):
        if isinstance(item, str):
            start = 0 if k == 0 else len(ids)
            ids.extend(vocab.encode(item))
            spans.append(Span("text", start, len(ids), text=item, item=k))
            continue
        if not isinstance(item, VisualItem):
            raise LayoutError(f"unsupported item type {type(item).__name__}")
        if item.n_tokens == 0:
            raise LayoutError("visual item has zero tokens")
        if k == 0:
            spans.append(Span("text", 0, 1))
        open_id, close_id = _open_close(item.kind, vocab)
        spans.append(Span("text", len(ids), len(ids) + 1))
        ids.append(open_id)
        start = len(ids)
        ids.extend([vocab.ids["[PAD]"]] * (1 + item.n_tokens))
        spans.append(Span(item.kind, start, len(ids), t=float(item.t), noised=bool(item.noised), item=k))
        if close_last or k < len(items) - 1:
            spans.append(Span("text", len(ids), len(ids) + 1))
            ids.append(close_id)
    if complete:
        spans.append(Span("text", len(ids), len(ids) + 1))
        ids.append(vocab.ids["[EOS]"])
    return SequenceLayout(spans, len(ids), complete), np.asarray(ids, dtype=np.int64)


def unpack(layout: SequenceLayout, visuals: dict[int, VisualItem] | Sequence[VisualItem]) -> list[Item]:
    """Recover the packed item list (visual items are looked up by item index)."""
    if not isinstance(visuals, dict):
        vis = [s for s in layout.spans if s.visual]
        visuals = {s.item: v for s, v in zip(vis, visuals)}
    out: list[Item] = []
    for s in layout.spans:
        if s.visual:
            out.append(visuals[s.item])
        elif s.text is not None:
            out.append(s.text)
    return out


def omni_mask(layout: SequenceLayout) -> np.ndarray:
    """Causal everywhere, full attention inside each visual span."""
    L = layout.total_len
    mask = np.tril(np.ones((L, L), dtype=bool))
    for s in layout.visual_spans():
        mask[s.start:s.end, s.start:s.end] = True
    return mask


def omni_mask_reference(layout: SequenceLayout) -> np.ndarray:
    """Pairwise evaluation of the attention rule; used as an oracle."""
    L = layout.total_len
    owner = layout.span_ids()
    mask = np.zeros((L, L), dtype=bool)
    for i in range(L):
        for j in range(L):
            same_visual = owner[i] >= 0 and owner[i] == owner[j]
            mask[i, j] = j <= i or same_visual
    return mask


def mm_noise_policy(layout: SequenceLayout, rng: np.random.Generator, p_all: float = 0.3) -> list[bool]:
    """Choose which visual spans get noised in an interleaved training sample.

    With probability ``p_all`` every span is noised; otherwise a uniform
    number k in {1..m-1} of leading spans stays clean and the rest are noised.
    A single span is always noised.  The chosen flags are written back into
    the layout's spans.
    """
    if not 0.0 <= p_all <= 1.0:
        raise ValueError("p_all must lie in [0, 1]")
    vis = layout.visual_spans()
    m = len(vis)
    if m == 0:
        raise LayoutError("noise policy needs at least one visual span")
    if rng.random() < p_all or m == 1:
        flags = [True] * m
    else:
        k = int(rng.integers(1, m))
        flags = [i >= k for i in range(m)]
    for s, f in zip(vis, flags):
        s.noised = f
        if not f:
            s.t = 1.0
    return flags


def parse_layout(desc: str) -> SequenceLayout:
    """Layout from a compact description such as ``"t3,i4,t2"``.

    ``tN`` is N text-stream positions; ``iN`` / ``vN`` is an image / video span
    of one time token plus N visual tokens.
    """
    spans, pos = [], 0
    kinds = {"t": "text", "i": "image", "v": "video"}
    for part in desc.replace(" ", "").split(","):
        if len(part) < 2 or part[0] not in kinds or not part[1:].isdigit() or int(part[1:]) < 1:
            raise LayoutError(f"bad layout segment {part!r}")
        kind, n = kinds[part[0]], int(part[1:])
        size = n if kind == "text" else n + 1
        spans.append(Span(kind, pos, pos + size, t=None if kind == "text" else 1.0, item=len(spans)))
        pos += size
    return SequenceLayout(spans, pos)


def render_mask(mask: np.ndarray) -> str:
    return "\n".join("".join("#" if v else "." for v in row) for row in mask)


@dataclass
class Collated:
    """A right-padded batch of packed sequences."""

    ids: np.ndarray  # [B, L] int
    mask: np.ndarray  # [B, L, L] bool
    valid: np.ndarray  # [B, L] bool, False on padding
    text_stream: np.ndarray  # [B, L] bool, True where the position holds a real token
    layouts: list[SequenceLayout]


def collate(layouts: Sequence[SequenceLayout], ids: Sequence[np.ndarray], vocab: Vocab = VOCAB) -> Collated:
    B = len(layouts)
    L = max(lay.total_len for lay in layouts)
    out_ids = np.full((B, L), vocab.ids["[PAD]"], dtype=np.int64)
    mask = np.zeros((B, L, L), dtype=bool)
    valid = np.zeros((B, L), dtype=bool)
    text = np.zeros((B, L), dtype=bool)
    for b, (lay, seq) in enumerate(zip(layouts, ids)):
        n = lay.total_len
        out_ids[b, :n] = seq
        mask[b, :n, :n] = omni_mask(lay)
        idx = np.arange(n, L)
        mask[b, idx, idx] = True  # padding rows attend only to themselves
        valid[b, :n] = True
        text[b, :n] = lay.modality() == TEXT
    return Collated(out_ids, mask, valid, text, list(layouts))


def ntp_mask(batch: Collated) -> tuple[np.ndarray, np.ndarray]:
    """(targets, mask) for next-token prediction.

    Position i is supervised iff it and position i+1 are both real text-stream
    tokens; visual positions and padding never contribute.
    """
    B, L = batch.ids.shape
    targets = np.zeros((B, L), dtype=np.int64)
    targets[:, :-1] = batch.ids[:, 1:]
    m = np.zeros((B, L), dtype=bool)
    m[:, :-1] = batch.text_stream[:, :-1] & batch.text_stream[:, 1:]
    return targets, m
