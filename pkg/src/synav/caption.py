"""Structured captions: anchor declarations plus video / audio / joint fields.

Wire format is a JSON object::

    {"anchors": [{"id": "sub_1", "attributes": "..."}],
     "video_caption": "...", "audio_caption": "...", "joint_caption": "..."}

Caption text refers to subjects only through inline ``<sub_k>`` markers.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

FIELDS = ("video_caption", "audio_caption", "joint_caption")
ANCHOR_REF = re.compile(r"<sub_(\d+)>")
ANCHOR_ID = re.compile(r"^sub_([1-9]\d*)$")


class CaptionError(ValueError):
    """Base class; ``subject`` names the offending anchor or field."""

    def __init__(self, message: str, subject: str):
        super().__init__(message)
        self.subject = subject


class SchemaError(CaptionError):
    pass


class UndeclaredAnchorError(CaptionError):
    pass


class DuplicateAnchorError(CaptionError):
    pass


class AnchorNumberingError(CaptionError):
    pass


class UnreferencedAnchorError(CaptionError):
    pass


class AnchorCrossReferenceError(CaptionError):
    pass


class BindingError(CaptionError):
    def __init__(self, message: str, expected: int, actual: int):
        super().__init__(message, "anchors")
        self.expected, self.actual = expected, actual


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Anchor:
    id: str
    attributes: str

    @property
    def k(self) -> int:
        return int(self.id.split("_")[1])


@dataclass(frozen=True)
class StructuredCaption:
    anchors: tuple[Anchor, ...]
    video_caption: str
    audio_caption: str
    joint_caption: str

    def fields(self) -> dict[str, str]:
        return {f: getattr(self, f) for f in FIELDS}


def _referenced(text: str) -> list[str]:
    return [f"sub_{m}" for m in ANCHOR_REF.findall(text)]


def check(doc) -> list[CaptionError]:
    """Every validation problem in a decoded caption document, in discovery order."""
    if not isinstance(doc, dict):
        return [SchemaError("caption must be a JSON object", "document")]
    errors: list[CaptionError] = []
    for name in ("anchors",) + FIELDS:
        if name not in doc:
            errors.append(SchemaError(f"missing field {name}", name))
    for name in FIELDS:
        if name in doc and not isinstance(doc[name], str):
            errors.append(SchemaError(f"field {name} must be a string", name))
    anchors = doc.get("anchors", [])
    if not isinstance(anchors, list):
        return errors + [SchemaError("field anchors must be a list", "anchors")]

    ids: list[str] = []
    for i, a in enumerate(anchors):
        if not (isinstance(a, dict) and isinstance(a.get("id"), str) and isinstance(a.get("attributes"), str)):
            errors.append(SchemaError(f"anchor entry {i} needs string id and attributes", f"anchors[{i}]"))
            continue
        aid = a["id"]
        if not ANCHOR_ID.match(aid):
            errors.append(SchemaError(f"malformed anchor id {aid}", aid))
            continue
        if aid in ids:
            errors.append(DuplicateAnchorError(f"duplicate anchor {aid}", aid))
            continue
        ids.append(aid)
        for ref in _referenced(a["attributes"]):
            errors.append(AnchorCrossReferenceError(
                f"anchor {aid} attributes reference {ref}", ref))
    for pos, aid in enumerate(ids, start=1):
        if aid != f"sub_{pos}":
            errors.append(AnchorNumberingError(
                f"anchor {aid} out of sequence (expected sub_{pos})", aid))
            break

    used: set[str] = set()
    for name in FIELDS:
        text = doc.get(name)
        if not isinstance(text, str):
            continue
        for ref in _referenced(text):
            used.add(ref)
            if ref not in ids:
                errors.append(UndeclaredAnchorError(f"undeclared anchor {ref} in {name}", ref))
    for aid in ids:
        if aid not in used:
            errors.append(UnreferencedAnchorError(f"anchor {aid} is never referenced", aid))
    return errors


def from_dict(doc) -> StructuredCaption:
    errors = check(doc)
    if errors:
        raise errors[0]
    return StructuredCaption(tuple(Anchor(a["id"], a["attributes"]) for a in doc["anchors"]),
                             doc["video_caption"], doc["audio_caption"], doc["joint_caption"])


def parse(text: str | bytes) -> StructuredCaption:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"invalid JSON: {e}", "document") from None
    return from_dict(doc)


def to_dict(c: StructuredCaption) -> dict:
    doc = {"anchors": [{"id": a.id, "attributes": a.attributes} for a in c.anchors]}
    doc.update(c.fields())
    return doc


def serialize(c: StructuredCaption) -> str:
    return json.dumps(to_dict(c), ensure_ascii=False, separators=(",", ":"))


def validate_against_references(c: StructuredCaption, n_identity_refs: int, n_timbre_refs: int) -> None:
    """Raise :class:`BindingError` unless anchors match the reference counts.

    Timbre references may be absent entirely (driving-audio animation).
    """
    if n_identity_refs < 0 or n_timbre_refs < 0:
        raise ValueError("reference counts must be nonnegative")
    if len(c.anchors) != n_identity_refs:
        raise BindingError(f"caption declares {len(c.anchors)} anchors but {n_identity_refs} "
                           f"identity references were given", n_identity_refs, len(c.anchors))
    if n_timbre_refs not in (0, n_identity_refs):
        raise BindingError(f"expected 0 or {n_identity_refs} timbre references, got {n_timbre_refs}",
                           n_identity_refs, n_timbre_refs)


# ---------------------------------------------------------------------------
# toy tokenizer

UNK, SEP_ANCHORS, SEP_VIDEO, SEP_AUDIO, SEP_JOINT = range(5)
_N_SPECIAL = 5


@dataclass(frozen=True)
class Vocab:
    """Ids 0-4 are <unk> and the four section separators, words follow, and
    the top ``anchor_block`` ids are reserved for ``<sub_k>`` (id = size - k)."""

    words: tuple[str, ...]
    size: int = 64
    anchor_block: int = 4
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if _N_SPECIAL + len(self.words) > self.size - self.anchor_block:
            raise VocabError(f"{len(self.words)} words do not fit in vocab of size {self.size}")
        object.__setattr__(self, "index", {w: _N_SPECIAL + i for i, w in enumerate(self.words)})

    def anchor_id(self, k: int) -> int:
        if not 1 <= k <= self.anchor_block:
            raise VocabError(f"anchor sub_{k} exceeds reserved block of {self.anchor_block}")
        return self.size - k


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    anchor_slots: dict[int, int] = field(default_factory=dict)  # token index -> identity k

    def __len__(self) -> int:
        return len(self.ids)


EMPTY_TOKENS = TokenSequence(())


def _words(text: str) -> Iterable[str]:
    return text.split()


def tokenize(c: StructuredCaption, vocab: Vocab) -> TokenSequence:
    ids: list[int] = []
    slots: dict[int, int] = {}

    def emit(text: str):
        for w in _words(text):
            m = re.fullmatch(r"<sub_(\d+)>", w)
            if m:
                k = int(m.group(1))
                slots[len(ids)] = k
                ids.append(vocab.anchor_id(k))
            else:
                ids.append(vocab.index.get(w.lower(), UNK))

    ids.append(SEP_ANCHORS)
    for a in c.anchors:
        emit(f"<{a.id}> {a.attributes}")
    for sep, text in zip((SEP_VIDEO, SEP_AUDIO, SEP_JOINT), (c.video_caption, c.audio_caption, c.joint_caption)):
        ids.append(sep)
        emit(text)
    return TokenSequence(tuple(ids), slots)


def build_vocab(words: Sequence[str], size: int = 64, anchor_block: int = 4) -> Vocab:
    return Vocab(tuple(dict.fromkeys(w.lower() for w in words)), size, anchor_block)
