"""Sentence-level METEOR with exact, Porter-stem and optional synonym stages."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable

from nltk.stem.porter import PorterStemmer

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")
_stemmer = PorterStemmer()


@lru_cache(maxsize=65536)
def _stem(word: str) -> str:
    return _stemmer.stem(word)


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class MeteorParams:
    """``fmean = (1 + w) P R / (R + w P)``, ``penalty = gamma (chunks / matches) ** beta``."""

    recall_weight: float = 9.0
    penalty_gamma: float = 0.5
    penalty_beta: float = 3.0
    use_stem: bool = True
    synonyms: frozenset[frozenset[str]] = field(default_factory=frozenset)


def load_synonyms(path: str | Path) -> frozenset[frozenset[str]]:
    """Read a word-pair table: JSON list of pairs, or one tab/space separated pair per line."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        pairs: Iterable = json.loads(text)
    else:
        pairs = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    out = set()
    for pair in pairs:
        if len(pair) != 2:
            raise ValueError(f"synonym entries must be pairs, got {pair!r}")
        a, b = (w.lower() for w in pair)
        if a != b:
            out.add(frozenset((a, b)))
    return frozenset(out)


def _align_stage(cand, ref, used_c, used_r, matches, same) -> None:
    # Prefer the reference slot that extends the previous match, then the
    # leftmost free slot after it, then the leftmost free slot overall.
    earlier = dict(matches)
    last_r = -2
    for i, cw in enumerate(cand):
        if used_c[i]:
            last_r = earlier[i]
            continue
        options = [j for j, rw in enumerate(ref) if not used_r[j] and same(cw, rw)]
        if not options:
            continue
        if last_r + 1 in options:
            j = last_r + 1
        else:
            after = [j for j in options if j > last_r]
            j = after[0] if after else options[0]
        used_c[i] = used_r[j] = True
        matches.append((i, j))
        last_r = j


def align(cand: list[str], ref: list[str], params: MeteorParams = MeteorParams()) -> list[tuple[int, int]]:
    """Unigram alignment as (candidate index, reference index) pairs sorted by candidate index."""
    used_c = [False] * len(cand)
    used_r = [False] * len(ref)
    matches: list[tuple[int, int]] = []
    stages = [lambda a, b: a == b]
    if params.use_stem:
        stages.append(lambda a, b: _stem(a) == _stem(b))
    if params.synonyms:
        syn = params.synonyms
        stages.append(lambda a, b: frozenset((a, b)) in syn)
    for same in stages:
        _align_stage(cand, ref, used_c, used_r, matches, same)
    return sorted(matches)


def count_chunks(matches: list[tuple[int, int]]) -> int:
    if not matches:
        return 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(matches, matches[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def meteor_score(candidate: str, reference: str, params: MeteorParams = MeteorParams()) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        log.warning("METEOR on an empty candidate or reference; scoring 0")
        return 0.0
    matches = align(cand, ref, params)
    m = len(matches)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    w = params.recall_weight
    fmean = (1.0 + w) * p * r / (r + w * p)
    penalty = params.penalty_gamma * (count_chunks(matches) / m) ** params.penalty_beta
    return fmean * (1.0 - penalty)
