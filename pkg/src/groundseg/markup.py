"""Grounded-response markup and the object/part identifier grammar.

Markup grammar::

    response := (prose | grounded)*
    grounded := "<p>" phrase "</p>" ws "[SEG]" ws "(IMAGE" int ")"

Identifiers name an annotated object or part: ``NAME_XYY`` (object) or
``NAME_XYYZZ`` (part), where X is the 1-based image digit, YY the object id and
ZZ the part id. An entity seen in several images chains further groups,
e.g. ``rocket_101_202``.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

OPEN, CLOSE, SEG = "<p>", "</p>", "[SEG]"
_TOKEN_RE = re.compile(r"<p>|</p>|\[SEG\]")
_IMAGE_TAG_RE = re.compile(r"\s*\(IMAGE(\d+)\)")
_WS_SEG_RE = re.compile(r"\s*\[SEG\]")


class MarkupError(ValueError):
    """Malformed grounded markup; ``offset`` is the character offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class IdentifierError(ValueError):
    pass


class UnresolvedReferenceError(LookupError):
    def __init__(self, token: str, ref: tuple | None = None):
        msg = f"identifier {token!r} has no matching annotation"
        if ref is not None:
            msg += f" (image {ref[0]}, object {ref[1]:02d}" + (
                f", part {ref[2]:02d})" if ref[2] is not None else ")"
            )
        super().__init__(msg)
        self.token = token
        self.ref = ref


@dataclass(frozen=True)
class GroundedPhrase:
    text: str
    image_index: int
    within_image_order: int
    char_span: tuple[int, int]
    markup_span: tuple[int, int] = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class GroundedResponse:
    raw_text: str
    num_images: int
    phrases: tuple[GroundedPhrase, ...] = ()

    def per_image(self) -> dict[int, list[GroundedPhrase]]:
        """Phrases grouped by image (every image key present, possibly empty)."""
        groups: dict[int, list[GroundedPhrase]] = {j: [] for j in range(1, self.num_images + 1)}
        for ph in self.phrases:
            groups.setdefault(ph.image_index, []).append(ph)
        return groups

    def counts(self) -> list[int]:
        """G_j for j = 1..num_images."""
        groups = self.per_image()
        return [len(groups[j]) for j in range(1, self.num_images + 1)]


def _canonical(text: str, image_index: int) -> str:
    return f"{OPEN}{text}{CLOSE} {SEG} (IMAGE{image_index})"


def parse_response(text: str, num_images: int, strict: bool = True) -> GroundedResponse:
    """Extract grounded phrases and their image bindings from model output.

    In strict mode every ``<p>`` phrase must carry a ``[SEG] (IMAGEk)`` binding
    with ``1 <= k <= num_images`` and at least one phrase must be present.
    Lenient mode treats unbound phrases as prose and drops phrases bound to
    images beyond ``num_images``.
    """
    if num_images < 1:
        raise ValueError("num_images must be at least 1")
    phrases: list[GroundedPhrase] = []
    order: dict[int, int] = {}
    pos = 0
    while True:
        m = _TOKEN_RE.search(text, pos)
        if m is None:
            break
        tok = m.group()
        if tok == CLOSE:
            raise MarkupError("'</p>' without a matching '<p>'", m.start())
        if tok == SEG:
            if strict:
                raise MarkupError("'[SEG]' not preceded by a <p>...</p> phrase", m.start())
            pos = m.end()
            continue
        # tok == OPEN
        start = m.start()
        inner_start = m.end()
        nxt = _TOKEN_RE.search(text, inner_start)
        if nxt is None:
            raise MarkupError("'<p>' is never closed", start)
        if nxt.group() == OPEN:
            raise MarkupError("'<p>' nested inside '<p>'", nxt.start())
        if nxt.group() == SEG:
            raise MarkupError("'[SEG]' inside a phrase", nxt.start())
        inner_end = nxt.start()
        phrase = text[inner_start:inner_end]
        if not phrase.strip():
            raise MarkupError("empty phrase", start)
        after = nxt.end()
        seg = _WS_SEG_RE.match(text, after)
        if seg is None:
            if strict:
                raise MarkupError("phrase is not followed by '[SEG]'", after)
            pos = after
            continue
        tag = _IMAGE_TAG_RE.match(text, seg.end())
        if tag is None:
            raise MarkupError("'[SEG]' without an (IMAGEk) tag", seg.end() - len(SEG))
        k = int(tag.group(1))
        end = tag.end()
        if k == 0:
            raise MarkupError("image index 0 (image tags are 1-based)", tag.start(1))
        if k > num_images:
            if strict:
                raise MarkupError(f"image index {k} exceeds num_images={num_images}", tag.start(1))
            log.warning("dropping phrase %r bound to missing image %d", phrase, k)
            pos = end
            continue
        order[k] = order.get(k, 0) + 1
        phrases.append(GroundedPhrase(phrase, k, order[k], (inner_start, inner_end), (start, end)))
        pos = end
    if strict and not phrases:
        raise MarkupError("response contains no grounded phrase", 0)
    return GroundedResponse(text, num_images, tuple(phrases))


def serialize_response(r: GroundedResponse) -> str:
    """Emit canonical markup, keeping the prose around each grounded span."""
    if not r.phrases:
        return r.raw_text
    out = []
    pos = 0
    for ph in r.phrases:
        s, e = ph.markup_span
        out.append(r.raw_text[pos:s])
        out.append(_canonical(ph.text, ph.image_index))
        pos = e
    out.append(r.raw_text[pos:])
    return "".join(out)


def build_response(segments: Iterable[str | tuple[str, int]], num_images: int) -> GroundedResponse:
    """Assemble a canonical response from prose strings and (phrase, image) pairs."""
    parts: list[str] = []
    phrases: list[GroundedPhrase] = []
    order: dict[int, int] = {}
    offset = 0
    for seg in segments:
        if isinstance(seg, str):
            parts.append(seg)
            offset += len(seg)
            continue
        text, k = seg
        if not 1 <= k <= num_images:
            raise ValueError(f"image index {k} outside 1..{num_images}")
        piece = _canonical(text, k)
        order[k] = order.get(k, 0) + 1
        inner = offset + len(OPEN)
        phrases.append(
            GroundedPhrase(text, k, order[k], (inner, inner + len(text)), (offset, offset + len(piece)))
        )
        parts.append(piece)
        offset += len(piece)
    return GroundedResponse("".join(parts), num_images, tuple(phrases))


# ------------------------------------------------------------------ identifiers

Ref = tuple[int, int, "int | None"]

# name part may itself contain underscores (e.g. "chest_of_drawers_101")
IDENTIFIER_RE = re.compile(r"\b([A-Za-z][A-Za-z-]*(?:_[A-Za-z][A-Za-z-]*)*)((?:_\d+)+)\b")


@dataclass(frozen=True)
class EntityIdentifier:
    name: str
    image_index: int
    object_id: int
    part_id: int | None = None
    extra_refs: tuple[Ref, ...] = ()

    @property
    def refs(self) -> tuple[Ref, ...]:
        return ((self.image_index, self.object_id, self.part_id),) + self.extra_refs

    @property
    def is_part(self) -> bool:
        return self.part_id is not None

    def token(self) -> str:
        groups = []
        for x, yy, zz in self.refs:
            groups.append(f"{x}{yy:02d}" + ("" if zz is None else f"{zz:02d}"))
        return "_".join([self.name, *groups])


def _decode_group(group: str, token: str) -> Ref:
    if len(group) not in (3, 5):
        raise IdentifierError(f"{token!r}: digit group {group!r} must have 3 or 5 digits")
    x = int(group[0])
    if x < 1:
        raise IdentifierError(f"{token!r}: image digit must be 1-9")
    yy = int(group[1:3])
    zz = int(group[3:5]) if len(group) == 5 else None
    return (x, yy, zz)


def normalize_name(name: str) -> str:
    return name.lower().replace(" ", "").replace("_", "")


def parse_identifier(token: str) -> EntityIdentifier:
    token = token.strip()
    m = re.fullmatch(r"(.*?)((?:_\d+)+)", token)
    if m is None:
        raise IdentifierError(f"{token!r} does not end in _digit groups")
    name = m.group(1)
    if not name or not name.strip("_"):
        raise IdentifierError(f"{token!r}: empty name")
    groups = m.group(2).lstrip("_").split("_")
    refs = [_decode_group(g, token) for g in groups]
    x, yy, zz = refs[0]
    return EntityIdentifier(name.lower(), x, yy, zz, tuple(refs[1:]))


def find_identifiers(text: str) -> list[tuple[EntityIdentifier, tuple[int, int]]]:
    """All identifier tokens in ``text`` with their character spans.

    Tokens with malformed digit groups raise :class:`IdentifierError`.
    """
    found = []
    for m in IDENTIFIER_RE.finditer(text):
        found.append((parse_identifier(m.group(0)), m.span()))
    return found


@dataclass(frozen=True)
class ResolvedTarget:
    identifier: EntityIdentifier
    ref: Ref
    annotation: Any


def resolve_references(answer: str, annotations: Mapping[Ref, Any]) -> list[ResolvedTarget]:
    """Map every identifier reference in ``answer`` to its annotation.

    ``annotations`` is keyed by ``(image, object_id, part_id)`` with ``part_id``
    ``None`` for whole objects. If an annotation exposes ``name``, it must match
    the identifier name (case, spaces and underscores ignored).
    """
    targets = []
    for ident, _ in find_identifiers(answer):
        token = ident.token()
        for ref in ident.refs:
            ann = annotations.get(ref)
            if ann is None:
                raise UnresolvedReferenceError(token, ref)
            ann_name = ann.get("name") if isinstance(ann, Mapping) else getattr(ann, "name", None)
            if ann_name is not None and normalize_name(ann_name) != normalize_name(ident.name):
                raise UnresolvedReferenceError(token, ref)
            targets.append(ResolvedTarget(ident, ref, ann))
    return targets


def strip_identifiers(text: str) -> str:
    return IDENTIFIER_RE.sub(" ", text)


def unique_refs(identifiers: Sequence[EntityIdentifier]) -> list[Ref]:
    seen: dict[Ref, None] = {}
    for ident in identifiers:
        for ref in ident.refs:
            seen.setdefault(ref, None)
    return list(seen)
