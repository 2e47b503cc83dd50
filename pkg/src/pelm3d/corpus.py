"""Labeled text corpora, preprocessing, vocabulary and tf-idf weighting.

Two on-disk layouts are understood:

``csv``
    A single file with ``label`` and ``text`` columns (header optional; without
    a header the first two columns are taken as label, text). An ``id`` column
    is honored when present.
``dir``
    The directory-per-class layout of the Stanford IMDb release: ``pos/`` and
    ``neg/`` folders holding one ``.txt`` review each, optionally nested under
    ``train/`` and ``test/``.

Preprocessing is: strip markup and entities, lowercase, split on
non-alphanumeric boundaries, drop stop words (:mod:`pelm3d.stopwords`), stem
with the original Porter rule set and drop stop words again. The stemmer is
iterated to a fixed point so that ``preprocess`` is idempotent on its output.
"""

from __future__ import annotations

import csv
import functools
import html
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from nltk.stem.porter import PorterStemmer

from .stopwords import STOPWORDS

logger = logging.getLogger(__name__)

FORMATS = ("csv", "dir")

_TAG_RE = re.compile(r"<[^>]*>")
_TOKEN_RE = re.compile(r"[a-z0-9]+")
_LABELS = {
    "0": 0, "1": 1,
    "neg": 0, "pos": 1,
    "negative": 0, "positive": 1,
}

_stemmer = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


class CorpusError(ValueError):
    """Raised for malformed, empty or inconsistent corpus input."""


@dataclass(frozen=True)
class Document:
    id: int
    text: str
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise CorpusError(f"document {self.id}: label must be 0 or 1, got {self.label!r}")
        if not self.text.strip():
            raise CorpusError(f"document {self.id}: empty text")


@dataclass
class Vocabulary:
    """Ordered terms with their document frequencies ``S_k``.

    ``terms`` are sorted by descending corpus frequency, ties broken
    lexicographically. ``doc_frequency[k]`` counts the documents containing
    ``terms[k]``.
    """

    terms: list[str]
    doc_frequency: np.ndarray
    min_frequency: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.doc_frequency = np.asarray(self.doc_frequency, dtype=np.int64)
        if len(self.terms) != len(self.doc_frequency):
            raise CorpusError("terms and doc_frequency differ in length")
        self.index = {t: k for k, t in enumerate(self.terms)}
        if len(self.index) != len(self.terms):
            raise CorpusError("duplicate vocabulary terms")

    def __len__(self):
        return len(self.terms)


@dataclass
class TfIdfMatrix:
    """Sparse ``N x V`` tf-idf weights plus per-document token counts."""

    values: sp.csr_matrix
    doc_lengths: np.ndarray
    empty_rows: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _parse_label(raw, where):
    key = str(raw).strip().lower()
    if key not in _LABELS:
        raise CorpusError(f"{where}: unknown label value {raw!r}")
    return _LABELS[key]


def _ingest_csv(path: Path) -> list[Document]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CorpusError(f"{path}: no records")
    header = [c.strip().lower() for c in rows[0]]
    if "label" in header and "text" in header:
        li, ti = header.index("label"), header.index("text")
        ii = header.index("id") if "id" in header else None
        body = rows[1:]
        offset = 1
    else:
        li, ti, ii = 0, 1, None
        body = rows
        offset = 0
    if not body:
        raise CorpusError(f"{path}: no records")

    docs = []
    width = max(li, ti, ii if ii is not None else 0) + 1
    for n, row in enumerate(body):
        where = f"{path}: record {n + offset}"
        if len(row) < width:
            raise CorpusError(f"{where}: expected at least {width} fields, got {len(row)}")
        label = _parse_label(row[li], where)
        if ii is not None:
            try:
                doc_id = int(row[ii])
            except ValueError:
                raise CorpusError(f"{where}: non-integer id {row[ii]!r}") from None
        else:
            doc_id = n
        if not row[ti].strip():
            raise CorpusError(f"{where}: empty text")
        docs.append(Document(doc_id, row[ti], label))
    return docs


def _review_key(p: Path):
    head = p.stem.split("_", 1)[0]
    return (int(head) if head.isdigit() else math.inf, p.name)


def _ingest_dir(root: Path) -> list[Document]:
    splits = [root / s for s in ("train", "test") if (root / s).is_dir()] or [root]
    files = []
    for split in splits:
        for cls in ("neg", "pos"):
            folder = split / cls
            if folder.is_dir():
                files.extend((f, _LABELS[cls]) for f in sorted(folder.glob("*.txt"), key=_review_key))
    if not files:
        raise CorpusError(f"{root}: no records (expected pos/ and neg/ folders)")
    docs = []
    for n, (f, label) in enumerate(files):
        text = f.read_text(encoding="utf-8")
        if not text.strip():
            raise CorpusError(f"{f}: record {n}: empty text")
        docs.append(Document(n, text, label))
    return docs


def ingest_corpus(source, format: str = "csv") -> list[Document]:
    """Read labeled documents from ``source`` in the given ``format``.

    Documents are returned sorted by id. Missing or unreadable sources
    raise :class:`OSError`; content problems raise :class:`CorpusError`.
    """
    path = Path(source)
    if format not in FORMATS:
        raise CorpusError(f"unknown corpus format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(f"corpus source not found: {path}")
    if format == "csv":
        if path.is_dir():
            raise CorpusError(f"{path} is a directory; use format 'dir'")
        docs = _ingest_csv(path)
    else:
        if not path.is_dir():
            raise CorpusError(f"{path} is not a directory")
        docs = _ingest_dir(path)
    docs.sort(key=lambda d: d.id)
    ids = [d.id for d in docs]
    if len(set(ids)) != len(ids):
        raise CorpusError(f"{path}: duplicate document ids")
    return docs


@functools.lru_cache(maxsize=1 << 18)
def stem(token: str) -> str:
    """Porter stem iterated until the token stops changing."""
    while True:
        nxt = _stemmer.stem(token)
        if nxt == token:
            return token
        token = nxt


def preprocess(doc) -> list[str]:
    """Turn a :class:`Document` (or raw string) into a list of stemmed tokens.

    >>> preprocess("The movies <br/> WERE great!")
    ['movi', 'great']
    """
    text = doc.text if isinstance(doc, Document) else doc
    text = html.unescape(_TAG_RE.sub(" ", text)).lower()
    tokens = [t for t in _TOKEN_RE.findall(text) if t not in STOPWORDS]
    stems = (stem(t) for t in tokens)
    return [t for t in stems if t not in STOPWORDS]


def build_vocabulary(
    docs: Sequence[Sequence[str]],
    min_frequency: int = 1,
    max_terms: int | None = None,
) -> Vocabulary:
    """Frequency-thresholded vocabulary over tokenized documents.

    A term is kept when its total count in the corpus is at least
    ``min_frequency``. ``max_terms`` optionally truncates the ordered list
    to the most frequent terms.
    """
    if min_frequency < 1:
        raise CorpusError("min_frequency must be >= 1")
    if len(docs) == 0:
        raise CorpusError("empty corpus")
    counts: Counter[str] = Counter()
    dfs: Counter[str] = Counter()
    for toks in docs:
        counts.update(toks)
        dfs.update(set(toks))
    kept = sorted((t for t, c in counts.items() if c >= min_frequency), key=lambda t: (-counts[t], t))
    if max_terms is not None:
        kept = kept[:max_terms]
    if not kept:
        raise CorpusError("no term reaches min_frequency")
    return Vocabulary(kept, np.array([dfs[t] for t in kept]), min_frequency)


def tfidf(docs: Sequence[Sequence[str]], vocab: Vocabulary) -> TfIdfMatrix:
    """tf-idf weights ``(n_kj / V_j) * log10(N / S_k)``.

    ``n_kj`` counts term ``k`` in document ``j`` and ``V_j`` is the
    document's token count. Tokens outside ``vocab`` still count toward
    ``V_j`` but produce no entry.
    """
    n = len(docs)
    if n == 0:
        raise CorpusError("empty corpus")
    if vocab.doc_frequency.max() > n:
        raise CorpusError("vocabulary was built from a larger corpus")
    idf = np.log10(n / vocab.doc_frequency)
    rows, cols, vals = [], [], []
    lengths = np.zeros(n, dtype=np.int64)
    for j, toks in enumerate(docs):
        lengths[j] = len(toks)
        c = Counter(t for t in toks if t in vocab.index)
        for term, nkj in c.items():
            k = vocab.index[term]
            rows.append(j)
            cols.append(k)
            vals.append(nkj / lengths[j] * idf[k])
    # The stored pattern is the occurrence pattern: a term present in every
    # document keeps explicit zero entries, so column nnz always equals S_k.
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(vocab)), dtype=np.float64)
    m.sort_indices()
    empty = np.flatnonzero(np.diff(m.indptr) == 0)
    if len(empty):
        logger.warning("%d document(s) have no vocabulary tokens; their tf-idf rows are zero", len(empty))
    return TfIdfMatrix(m, lengths, empty)


def write_vocabulary(vocab: Vocabulary, path) -> None:
    """Write ``term<TAB>doc_frequency`` lines, in vocabulary order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# min_frequency={vocab.min_frequency} terms={len(vocab)}\n")
        for t, s in zip(vocab.terms, vocab.doc_frequency):
            fh.write(f"{t}\t{int(s)}\n")


def read_vocabulary(path) -> Vocabulary:
    terms, dfs = [], []
    min_frequency = 1
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            line = line.rstrip("\n")
            if line.startswith("#"):
                m = re.search(r"min_frequency=(\d+)", line)
                if m:
                    min_frequency = int(m.group(1))
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].isdigit():
                raise CorpusError(f"{path}: line {n + 1}: expected 'term<TAB>count'")
            terms.append(parts[0])
            dfs.append(int(parts[1]))
    return Vocabulary(terms, np.array(dfs, dtype=np.int64), min_frequency)


def write_triplets(matrix: TfIdfMatrix, path) -> None:
    """Write the nonzero entries as ``row col value`` lines (0-based indices).

    The first line is a ``# rows=N cols=V nnz=K`` header; values use ``repr``
    precision so the file round-trips exactly.
    """
    coo = matrix.values.tocoo()
    n, v = coo.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# rows={n} cols={v} nnz={coo.nnz}\n")
        for r, c, x in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {float(x)!r}\n")


def read_triplets(path) -> sp.csr_matrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        m = re.match(r"# rows=(\d+) cols=(\d+) nnz=(\d+)", header)
        if not m:
            raise CorpusError(f"{path}: missing triplet header")
        n, v, nnz = map(int, m.groups())
        data = np.loadtxt(fh, ndmin=2) if nnz else np.zeros((0, 3))
    if len(data) != nnz:
        raise CorpusError(f"{path}: expected {nnz} entries, found {len(data)}")
    return sp.csr_matrix(
        (data[:, 2], (data[:, 0].astype(np.int64), data[:, 1].astype(np.int64))), shape=(n, v)
    )


def tokenize_all(docs: Iterable[Document]) -> list[list[str]]:
    return [preprocess(d) for d in docs]
