"""Corpus cleaning, augmentation, stratified splitting and record I/O."""
from __future__ import annotations

import csv
import json
import random
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

LABEL_NAMES = {"suicide": 1, "non-suicide": 0}
LABEL_TEXT = {v: k for k, v in LABEL_NAMES.items()}


class DataError(ValueError):
    """Malformed or insufficient input data."""


@dataclass(frozen=True)
class LabeledRecord:
    id: str
    text: str
    label: int

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "text": self.text, "label": self.label}, ensure_ascii=False)


@dataclass
class CleaningRules:
    min_tokens: int = 3
    # Unicode ranges treated as emoticons/pictographs.
    emoticon_ranges: tuple = (
        (0x1F300, 0x1F5FF),  # symbols & pictographs
        (0x1F600, 0x1F64F),  # emoticons
        (0x1F680, 0x1F6FF),  # transport & map
        (0x1F700, 0x1F77F),
        (0x1F780, 0x1F7FF),
        (0x1F800, 0x1F8FF),
        (0x1F900, 0x1F9FF),  # supplemental symbols & pictographs
        (0x1FA00, 0x1FAFF),
        (0x2600, 0x26FF),    # misc symbols
        (0x2700, 0x27BF),    # dingbats
        (0x1F1E6, 0x1F1FF),  # regional indicators
        (0xFE00, 0xFE0F),    # variation selectors
        (0x200D, 0x200D),    # zero-width joiner
    )
    # Characters kept by the "English only" step: printable ASCII.
    allowed_min: int = 0x20
    allowed_max: int = 0x7E

    @classmethod
    def from_dict(cls, d: dict) -> "CleaningRules":
        rules = cls()
        if "min_tokens" in d:
            rules.min_tokens = int(d["min_tokens"])
        if "emoticon_ranges" in d:
            rules.emoticon_ranges = tuple((int(a), int(b)) for a, b in d["emoticon_ranges"])
        return rules


_URL_RE = re.compile(r"(?:[A-Za-z][A-Za-z0-9+.\-]*://|www\.)\S*", re.IGNORECASE)
_WS_RE = re.compile(r"\s+")

REJECT_FRAGMENT = "fragment"


def _is_emoticon(cp: int, ranges) -> bool:
    return any(a <= cp <= b for a, b in ranges)


def clean_text(raw, rules: Optional[CleaningRules] = None) -> tuple:
    """Returns (cleaned text or None, rejection reason or None).

    Character-level steps run before URL stripping so removing a character can
    never assemble a new URL; this makes the function idempotent.
    """
    rules = rules or CleaningRules()
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"input is not valid UTF-8: {exc}") from None
    # noise symbols: emoticons, then accents via canonical decomposition
    text = "".join(ch for ch in raw if not _is_emoticon(ord(ch), rules.emoticon_ranges))
    text = "".join(ch for ch in unicodedata.normalize("NFD", text) if not unicodedata.combining(ch))
    # non-English characters; whitespace of any kind becomes a plain space first
    text = _WS_RE.sub(" ", text)
    text = "".join(ch for ch in text if rules.allowed_min <= ord(ch) <= rules.allowed_max)
    # hyperlinks
    text = _URL_RE.sub("", text)
    text = _WS_RE.sub(" ", text).strip()
    if len(text.split()) < rules.min_tokens:
        return None, REJECT_FRAGMENT
    return text, None


def clean_record(raw, rules: Optional[CleaningRules] = None) -> Optional[str]:
    """Cleaned text, or None when the record is rejected as a sentence fragment."""
    return clean_text(raw, rules)[0]


@dataclass
class CleaningReport:
    kept: int = 0
    rejected: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {"kept": self.kept, "rejected": dict(sorted(self.rejected.items()))}


def clean_corpus(records: Iterable[LabeledRecord], rules: Optional[CleaningRules] = None):
    """Clean every record in order; returns (kept records, CleaningReport)."""
    kept = []
    report = CleaningReport()
    for rec in records:
        text, reason = clean_text(rec.text, rules)
        if text is None:
            report.rejected[reason] += 1
            continue
        kept.append(LabeledRecord(rec.id, text, rec.label))
    report.kept = len(kept)
    return kept, report


# ---------------------------------------------------------------------------
# augmentation


class SynonymLexicon:
    """word -> synonyms; exact lookup first, then case-folded."""

    def __init__(self, entries: dict):
        self.entries = {}
        for word, syns in entries.items():
            syns = [s for s in syns if s and s != word]
            if syns:
                self.entries[word] = syns
        self._folded = {}
        for word, syns in self.entries.items():
            self._folded.setdefault(word.casefold(), syns)

    def lookup(self, word: str) -> Optional[list]:
        return self.entries.get(word) or self._folded.get(word.casefold())

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_file(cls, path) -> "SynonymLexicon":
        entries = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'word<TAB>syn1,syn2,...'")
            word, syns = line.split("\t", 1)
            entries[word.strip()] = [s.strip() for s in syns.split(",") if s.strip()]
        return cls(entries)

    @classmethod
    def demo(cls) -> "SynonymLexicon":
        with resources.as_file(resources.files("sce") / "demo_lexicon.tsv") as p:
            return cls.from_file(p)


_AFFIX_RE = re.compile(r"^(\W*)(.*?)(\W*)$", re.DOTALL)


def augment(record: LabeledRecord, lexicon: SynonymLexicon, p_replace: float, seed: int) -> LabeledRecord:
    """Whitespace-normalise, then swap lexicon words for a random synonym with prob p_replace.

    Leading/trailing punctuation around a word is kept.  The RNG is only
    consulted for words that have lexicon entries.
    """
    if not 0.0 <= p_replace <= 1.0:
        raise ValueError("p_replace must be in [0, 1]")
    rng = random.Random(seed)
    out = []
    for tok in record.text.split():
        pre, core, post = _AFFIX_RE.match(tok).groups()
        syns = lexicon.lookup(core) if core else None
        if syns and rng.random() < p_replace:
            tok = pre + rng.choice(syns) + post
        out.append(tok)
    return LabeledRecord(record.id, " ".join(out), record.label)


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitResult:
    train: list
    validation: list
    test: list
    seed: int

    def sizes(self) -> tuple:
        return len(self.train), len(self.validation), len(self.test)


def largest_remainder(total: int, ratios: Sequence[float]) -> list:
    """Integer allocation of ``total`` proportional to ``ratios``; ties go to earlier slots."""
    s = float(np.sum(ratios))
    quotas = [total * r / s for r in ratios]
    alloc = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - alloc[i]), i))
    for i in order[: total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def _controlled_round(class_sizes: list, targets: list, ratios: Sequence[float]) -> list:
    """Cell counts [class][subset] matching both margins, each within 1 of its quota.

    Floors every quota, then places the leftover units with an augmenting-path
    search over cells whose quota is fractional, preferring larger remainders.
    """
    s = float(np.sum(ratios))
    quota = [[n * r / s for r in ratios] for n in class_sizes]
    cells = [[int(np.floor(q)) for q in row] for row in quota]
    row_need = [n - sum(row) for n, row in zip(class_sizes, cells)]
    col_need = [t - sum(cells[c][j] for c in range(len(cells))) for j, t in enumerate(targets)]
    edges = {
        c: sorted((j for j in range(len(ratios)) if quota[c][j] - cells[c][j] > 1e-12),
                  key=lambda j: (-(quota[c][j] - cells[c][j]), j))
        for c in range(len(cells))
    }
    extra = [[0] * len(ratios) for _ in cells]

    def augment_from(c, seen_cols):
        for j in edges[c]:
            if extra[c][j] or j in seen_cols:
                continue
            seen_cols.add(j)
            if col_need[j] > 0:
                col_need[j] -= 1
                extra[c][j] = 1
                return True
            # reroute: some class currently using column j moves elsewhere
            for c2 in range(len(cells)):
                if extra[c2][j] and augment_from(c2, seen_cols):
                    extra[c2][j] = 0
                    extra[c][j] = 1
                    return True
        return False

    for c in range(len(cells)):
        while row_need[c] > 0 and augment_from(c, set()):
            row_need[c] -= 1
    for c in range(len(cells)):
        for j in range(len(ratios)):
            cells[c][j] += extra[c][j]
    # safety net; unreachable when a controlled rounding exists
    for c in range(len(cells)):
        for j in range(len(ratios)):
            while row_need[c] > 0 and col_need[j] > 0:
                cells[c][j] += 1
                row_need[c] -= 1
                col_need[j] -= 1
    return cells


def stratified_split(records: Sequence[LabeledRecord], ratios=(8, 1, 1), seed: int = 0) -> SplitResult:
    """Seeded per-class shuffle, then per-class allocation to train/validation/test.

    Subset sizes are the largest-remainder rounding of the ratios over the
    whole corpus; each class's share of a subset stays within one record of
    its exact quota.  Within a subset, records keep their input order.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError("ratios must be three non-negative numbers")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DataError("record ids must be unique")
    by_class: dict = {}
    for pos, rec in enumerate(records):
        by_class.setdefault(rec.label, []).append(pos)
    for label, members in sorted(by_class.items()):
        if len(members) < 3:
            raise DataError(f"class {label} has {len(members)} records; at least 3 are required")
    labels = sorted(by_class)
    targets = largest_remainder(len(records), ratios)
    cells = _controlled_round([len(by_class[c]) for c in labels], targets, ratios)
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(records), dtype=np.int64)
    for label, counts in zip(labels, cells):
        members = np.array(by_class[label])
        members = members[rng.permutation(len(members))]
        bounds = np.cumsum([0, *counts])
        for subset in range(3):
            assignment[members[bounds[subset]:bounds[subset + 1]]] = subset
    parts = [[rec for rec, a in zip(records, assignment) if a == s] for s in range(3)]
    return SplitResult(parts[0], parts[1], parts[2], seed)


# ---------------------------------------------------------------------------
# I/O


def read_csv_corpus(path) -> list:
    """Read a ``text,class`` CSV (extra columns ignored)."""
    path = Path(path)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, expected a header with 'text' and 'class'")
        missing = {"text", "class"} - set(reader.fieldnames)
        if missing:
            raise DataError(f"{path}: header lacks column(s) {sorted(missing)}")
        for row in reader:
            rowno = reader.line_num
            if None in row or row.get("text") is None or row.get("class") is None:
                raise DataError(f"{path}: row {rowno}: wrong number of fields")
            cls = row["class"].strip()
            if cls not in LABEL_NAMES:
                raise DataError(f"{path}: row {rowno}: unknown class {cls!r}")
            records.append(LabeledRecord(str(len(records)), row["text"], LABEL_NAMES[cls]))
    return records


def write_csv_corpus(records: Iterable[LabeledRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text", "class"])
        for rec in records:
            writer.writerow([rec.text, LABEL_TEXT[rec.label]])


def write_jsonl(records: Iterable[LabeledRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_jsonl(path) -> list:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = LabeledRecord(str(obj["id"]), obj["text"], int(obj["label"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad record ({exc})") from None
            if rec.label not in (0, 1):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1")
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# synthetic corpus with a planted signal

DISTRESS_WORDS = (
    "hopeless", "worthless", "overdose", "burden", "goodbye", "unbearable",
    "trapped", "pills", "numb", "empty", "ending", "razor",
)
FILLER_WORDS = (
    "I", "you", "we", "they", "today", "yesterday", "school", "work", "friend", "family",
    "movie", "music", "game", "coffee", "cider", "dinner", "weekend", "class", "teacher",
    "phone", "car", "city", "dog", "cat", "book", "really", "just", "think", "feel",
    "know", "want", "like", "went", "saw", "made", "got", "about", "with", "and",
    "the", "a", "to", "of", "in", "on", "for", "is", "was", "it", "that", "this",
    "my", "our", "some", "time", "long", "new", "good", "bad", "tired", "busy",
)


def make_toy_corpus(n: int = 2000, seed: int = 0, min_words: int = 6, max_words: int = 14) -> list:
    """Balanced synthetic posts: label 1 posts carry 2-3 planted distress words.

    Both classes draw from the same filler vocabulary and length range.
    """
    rng = random.Random(seed)
    records = []
    for i in range(n):
        label = i % 2
        words = [rng.choice(FILLER_WORDS) for _ in range(rng.randint(min_words, max_words))]
        if label:
            for w in rng.sample(DISTRESS_WORDS, rng.randint(2, 3)):
                words.insert(rng.randint(0, len(words)), w)
        text = " ".join(words)
        records.append(LabeledRecord(f"toy-{i}", text[0].upper() + text[1:] + ".", label))
    rng.shuffle(records)
    return records
