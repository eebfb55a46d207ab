"""Embedding, trial and score containers plus their on-disk formats.

Three text formats and one binary format are supported:

* ``EVEC`` binary embeddings (little-endian, f32 payload, bit-exact round trip)
* TSV embeddings ``id<TAB>duration<TAB>domain<TAB>c1,c2,...`` (debug only)
* trial lists ``enroll<TAB>test[<TAB>label[<TAB>domain]]`` with label in {tgt, imp}
* score files ``enroll<TAB>test<TAB>score`` with 9 significant digits
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import FormatError, ValidationError

TARGET = 1
NONTARGET = 0
UNLABELED = -1

_LABEL_NAMES = {TARGET: "target", NONTARGET: "nontarget", UNLABELED: "unlabeled"}
_LABEL_TOKENS = {"tgt": TARGET, "imp": NONTARGET, "": UNLABELED}
_TOKEN_OF = {TARGET: "tgt", NONTARGET: "imp"}

EVEC_MAGIC = b"EVEC"
EVEC_VERSION = 1
_EVEC_HEADER = struct.Struct("<4sBIQ")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class EmbeddingRecord:
    id: str
    vector: np.ndarray
    duration_s: float
    domain: str = ""


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """An ordered, immutable collection of utterance embeddings.

    Values are held as f64 but quantized to f32 on construction, which is the
    precision of the binary format; this is what makes the round trip exact.
    """

    ids: tuple[str, ...]
    vectors: np.ndarray
    durations: np.ndarray
    domains: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False)

    def __init__(self, ids: Sequence[str], vectors, durations, domains: Sequence[str] | None = None,
                 dim: int | None = None):
        ids = tuple(ids)
        n = len(ids)
        vec = np.asarray(vectors, dtype=np.float64)
        if vec.size == 0:
            if dim is None:
                dim = vec.shape[1] if vec.ndim == 2 else 0
            vec = np.zeros((n, dim))
        if vec.ndim != 2 or vec.shape[0] != n:
            raise ValidationError(f"vectors must have shape ({n}, d), got {vec.shape}")
        if dim is not None and vec.shape[1] != dim:
            raise ValidationError(f"dimension mismatch: expected {dim}, got {vec.shape[1]}")
        vec = vec.astype(np.float32).astype(np.float64)
        dur = np.asarray(durations, dtype=np.float32).astype(np.float64).reshape(-1)
        if dur.shape[0] != n:
            raise ValidationError(f"expected {n} durations, got {dur.shape[0]}")
        doms = tuple(domains) if domains is not None else ("",) * n
        if len(doms) != n:
            raise ValidationError(f"expected {n} domain tags, got {len(doms)}")

        index: dict[str, int] = {}
        for i, uid in enumerate(ids):
            if not uid:
                raise ValidationError(f"record {i + 1}: empty id")
            if uid in index:
                raise ValidationError(f"record {i + 1}: duplicate id {uid!r}")
            index[uid] = i
        bad = np.flatnonzero(~np.isfinite(vec).all(axis=1))
        if bad.size:
            raise ValidationError(f"record {bad[0] + 1}: non-finite vector component")
        bad = np.flatnonzero(~(np.isfinite(dur) & (dur > 0)))
        if bad.size:
            raise ValidationError(f"record {bad[0] + 1}: duration must be positive and finite")

        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", _frozen(vec))
        object.__setattr__(self, "durations", _frozen(dur))
        object.__setattr__(self, "domains", doms)
        object.__setattr__(self, "index", index)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[EmbeddingRecord]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, key: int | str) -> EmbeddingRecord:
        i = self.index[key] if isinstance(key, str) else key
        return EmbeddingRecord(self.ids[i], self.vectors[i], float(self.durations[i]), self.domains[i])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.domains == other.domains
            and self.vectors.shape == other.vectors.shape
            and np.array_equal(self.vectors, other.vectors)
            and np.array_equal(self.durations, other.durations)
        )

    def rows(self, ids: Iterable[str], what: str = "id") -> np.ndarray:
        """Row indices for ``ids``; unknown ids raise with their position."""
        out = []
        for k, uid in enumerate(ids):
            try:
                out.append(self.index[uid])
            except KeyError:
                raise ValidationError(f"trial {k + 1}: unknown {what} {uid!r}") from None
        return np.asarray(out, dtype=np.intp)

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        r = self.rows(ids)
        return EmbeddingSet([self.ids[i] for i in r], self.vectors[r], self.durations[r],
                            [self.domains[i] for i in r], dim=self.dim)

    @classmethod
    def from_records(cls, records: Sequence[EmbeddingRecord], dim: int | None = None) -> "EmbeddingSet":
        vecs = [r.vector for r in records]
        return cls([r.id for r in records], np.array(vecs) if vecs else np.zeros((0, dim or 0)),
                   [r.duration_s for r in records], [r.domain for r in records], dim=dim)


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    label: str = "unlabeled"
    domain: str = ""


class TrialList:
    """Ordered directed (enroll, test) pairs, stored column-wise."""

    def __init__(self, enroll_ids: Sequence[str], test_ids: Sequence[str],
                 labels=None, domains: Sequence[str] | None = None):
        self.enroll_ids = tuple(enroll_ids)
        self.test_ids = tuple(test_ids)
        n = len(self.enroll_ids)
        if len(self.test_ids) != n:
            raise ValidationError("enroll and test id columns differ in length")
        if labels is None:
            lab = np.full(n, UNLABELED, dtype=np.int8)
        else:
            lab = np.asarray(labels, dtype=np.int8).reshape(-1)
        if lab.shape[0] != n:
            raise ValidationError(f"expected {n} labels, got {lab.shape[0]}")
        if not np.isin(lab, (TARGET, NONTARGET, UNLABELED)).all():
            raise ValidationError("labels must be 1 (target), 0 (nontarget) or -1 (unlabeled)")
        self.labels = _frozen(lab)
        self.domains = tuple(domains) if domains is not None else ("",) * n
        if len(self.domains) != n:
            raise ValidationError(f"expected {n} domain tags, got {len(self.domains)}")
        seen: set[tuple[str, str]] = set()
        for k, pair in enumerate(zip(self.enroll_ids, self.test_ids)):
            if pair in seen:
                raise ValidationError(f"trial {k + 1}: duplicate pair {pair[0]!r} -> {pair[1]!r}")
            seen.add(pair)

    @classmethod
    def from_trials(cls, trials: Iterable[Trial]) -> "TrialList":
        trials = list(trials)
        codes = {v: k for k, v in _LABEL_NAMES.items()}
        try:
            labels = [codes[t.label] for t in trials]
        except KeyError as exc:
            raise ValidationError(f"unknown label {exc.args[0]!r}") from None
        return cls([t.enroll_id for t in trials], [t.test_id for t in trials], labels,
                   [t.domain for t in trials])

    def __len__(self) -> int:
        return len(self.enroll_ids)

    def __getitem__(self, k: int) -> Trial:
        return Trial(self.enroll_ids[k], self.test_ids[k], _LABEL_NAMES[int(self.labels[k])], self.domains[k])

    def __iter__(self) -> Iterator[Trial]:
        return (self[k] for k in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrialList):
            return NotImplemented
        return (self.enroll_ids == other.enroll_ids and self.test_ids == other.test_ids
                and np.array_equal(self.labels, other.labels) and self.domains == other.domains)

    @property
    def n_target(self) -> int:
        return int(np.count_nonzero(self.labels == TARGET))

    @property
    def n_nontarget(self) -> int:
        return int(np.count_nonzero(self.labels == NONTARGET))

    @property
    def n_unlabeled(self) -> int:
        return int(np.count_nonzero(self.labels == UNLABELED))

    @property
    def is_target(self) -> np.ndarray:
        return self.labels == TARGET

    def take(self, idx) -> "TrialList":
        idx = np.arange(len(self))[idx]
        return TrialList([self.enroll_ids[i] for i in idx], [self.test_ids[i] for i in idx],
                         self.labels[idx], [self.domains[i] for i in idx])

    def domain_names(self) -> list[str]:
        return sorted(set(self.domains))


class ScoreSet:
    """Per-trial scores aligned index-for-index with a :class:`TrialList`."""

    def __init__(self, trials: TrialList, scores, stage: str = "external"):
        s = np.array(scores, dtype=np.float64).reshape(-1)
        if s.shape[0] != len(trials):
            raise ValidationError(f"{s.shape[0]} scores for {len(trials)} trials")
        bad = np.flatnonzero(~np.isfinite(s))
        if bad.size:
            raise ValidationError(f"trial {bad[0] + 1}: non-finite score")
        self.trials = trials
        self.scores = _frozen(s)
        self.stage = stage

    def __len__(self) -> int:
        return len(self.scores)

    def with_scores(self, scores, stage: str) -> "ScoreSet":
        return ScoreSet(self.trials, scores, stage)

    def take(self, idx) -> "ScoreSet":
        idx = np.arange(len(self))[idx]
        return ScoreSet(self.trials.take(idx), self.scores[idx], self.stage)

    def split(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (target scores, nontarget scores); unlabeled trials are rejected."""
        if self.trials.n_unlabeled:
            raise ValidationError(f"{self.trials.n_unlabeled} unlabeled trials; labels are required here")
        lab = self.trials.labels
        return self.scores[lab == TARGET], self.scores[lab == NONTARGET]

    @classmethod
    def from_arrays(cls, tar, non, stage: str = "synthetic") -> "ScoreSet":
        """Labeled score set from bare target/nontarget arrays (ids are generated)."""
        tar = np.asarray(tar, dtype=np.float64).reshape(-1)
        non = np.asarray(non, dtype=np.float64).reshape(-1)
        n = tar.size + non.size
        trials = TrialList([f"e{k}" for k in range(n)], [f"t{k}" for k in range(n)],
                           np.r_[np.ones(tar.size, np.int8), np.zeros(non.size, np.int8)])
        return cls(trials, np.r_[tar, non], stage)


# ---------------------------------------------------------------------------
# embeddings on disk


def evec_size(n_records_id_bytes: Iterable[tuple[int, int]], dim: int) -> int:
    """Exact EVEC file size for records given as (id byte length, domain byte length)."""
    return _EVEC_HEADER.size + sum(2 + i + 4 + 2 + d + 4 * dim for i, d in n_records_id_bytes)


def write_embeddings(emb: EmbeddingSet, path, format: str = "binary") -> None:
    path = Path(path)
    if format == "binary":
        parts = [_EVEC_HEADER.pack(EVEC_MAGIC, EVEC_VERSION, emb.dim, len(emb))]
        vec32 = emb.vectors.astype("<f4")
        for i, uid in enumerate(emb.ids):
            bid = uid.encode("utf-8")
            bdom = emb.domains[i].encode("utf-8")
            if len(bid) > 0xFFFF or len(bdom) > 0xFFFF:
                raise ValidationError(f"record {i + 1}: id or domain longer than 65535 bytes")
            parts.append(struct.pack("<H", len(bid)) + bid
                         + struct.pack("<fH", emb.durations[i], len(bdom)) + bdom
                         + vec32[i].tobytes())
        path.write_bytes(b"".join(parts))
    elif format == "tsv":
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for i, uid in enumerate(emb.ids):
                comps = ",".join(f"{np.float32(c):.9g}" for c in emb.vectors[i])
                fh.write(f"{uid}\t{np.float32(emb.durations[i]):.9g}\t{emb.domains[i]}\t{comps}\n")
    else:
        raise ValidationError(f"unknown embedding format {format!r} (expected binary or tsv)")


def read_embeddings(path, format: str = "binary") -> EmbeddingSet:
    path = Path(path)
    if format == "binary":
        return _read_evec(path.read_bytes())
    if format == "tsv":
        return _read_embedding_tsv(path.read_text(encoding="utf-8"))
    raise ValidationError(f"unknown embedding format {format!r} (expected binary or tsv)")


def embedding_format(path) -> str:
    """``tsv`` for ``.tsv``/``.txt`` files, otherwise the binary EVEC format."""
    return "tsv" if Path(path).suffix.lower() in (".tsv", ".txt") else "binary"


def load_embeddings(path) -> EmbeddingSet:
    return read_embeddings(path, embedding_format(path))


def save_embeddings(emb: EmbeddingSet, path) -> None:
    write_embeddings(emb, path, embedding_format(path))


def _read_evec(buf: bytes) -> EmbeddingSet:
    if len(buf) < _EVEC_HEADER.size:
        raise FormatError("truncated EVEC header")
    magic, version, dim, n = _EVEC_HEADER.unpack_from(buf, 0)
    if magic != EVEC_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {EVEC_MAGIC!r}")
    if version != EVEC_VERSION:
        raise FormatError(f"unsupported EVEC version {version}")
    pos = _EVEC_HEADER.size
    ids, durs, doms, vecs = [], [], [], []
    vbytes = 4 * dim
    for k in range(n):
        try:
            (li,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            uid = buf[pos:pos + li].decode("utf-8")
            if len(buf) < pos + li + 6:
                raise struct.error
            pos += li
            dur, ld = struct.unpack_from("<fH", buf, pos)
            pos += 6
            dom = buf[pos:pos + ld].decode("utf-8")
            pos += ld
            if len(buf) < pos + vbytes:
                raise struct.error
            vec = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos)
            pos += vbytes
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"record {k + 1}: truncated or malformed ({exc})") from None
        if not np.isfinite(vec).all():
            raise FormatError(f"record {k + 1}: non-finite vector component")
        ids.append(uid)
        durs.append(dur)
        doms.append(dom)
        vecs.append(vec)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {n} records")
    try:
        return EmbeddingSet(ids, np.array(vecs, dtype=np.float64) if vecs else np.zeros((0, dim)),
                            durs, doms, dim=dim)
    except ValidationError as exc:
        raise FormatError(str(exc)) from None


def _read_embedding_tsv(text: str) -> EmbeddingSet:
    ids, durs, doms, vecs = [], [], [], []
    dim = None
    for k, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        cols = line.rstrip("\r\n").split("\t")
        if len(cols) != 4:
            raise FormatError(f"record {k + 1}: expected 4 tab-separated columns, got {len(cols)}")
        try:
            dur = float(cols[1])
            vec = [float(c) for c in cols[3].split(",")]
        except ValueError as exc:
            raise FormatError(f"record {k + 1}: {exc}") from None
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise FormatError(f"record {k + 1}: dimension {len(vec)} != {dim}")
        if not all(math.isfinite(c) for c in vec):
            raise FormatError(f"record {k + 1}: non-finite vector component")
        ids.append(cols[0])
        durs.append(dur)
        doms.append(cols[2])
        vecs.append(vec)
    try:
        return EmbeddingSet(ids, np.array(vecs) if vecs else np.zeros((0, 0)), durs, doms)
    except ValidationError as exc:
        raise FormatError(str(exc)) from None


# ---------------------------------------------------------------------------
# trials and scores on disk


def read_trials(path) -> TrialList:
    enroll, test, labels, domains = [], [], [], []
    with Path(path).open(encoding="utf-8") as fh:
        for k, line in enumerate(fh):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.rstrip().split("\t")
            if not 2 <= len(cols) <= 4:
                raise FormatError(f"trials line {k + 1}: expected 2-4 columns, got {len(cols)}")
            token = cols[2] if len(cols) > 2 else ""
            if token not in _LABEL_TOKENS:
                raise FormatError(f"trials line {k + 1}: unknown label {token!r} (expected tgt or imp)")
            enroll.append(cols[0])
            test.append(cols[1])
            labels.append(_LABEL_TOKENS[token])
            domains.append(cols[3] if len(cols) > 3 else "")
    try:
        return TrialList(enroll, test, labels, domains)
    except ValidationError as exc:
        raise FormatError(str(exc)) from None


def write_trials(trials: TrialList, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for k in range(len(trials)):
            cols = [trials.enroll_ids[k], trials.test_ids[k]]
            lab = int(trials.labels[k])
            if lab != UNLABELED or trials.domains[k]:
                cols.append(_TOKEN_OF.get(lab, ""))
            if trials.domains[k]:
                cols.append(trials.domains[k])
            fh.write("\t".join(cols) + "\n")


def format_score(x: float) -> str:
    return f"{x:.9g}"


def write_scores(scores: ScoreSet, path) -> None:
    t = scores.trials
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for k, s in enumerate(scores.scores):
            fh.write(f"{t.enroll_ids[k]}\t{t.test_ids[k]}\t{format_score(s)}\n")


def read_scores(path, trials: TrialList, stage: str = "external") -> ScoreSet:
    values = []
    with Path(path).open(encoding="utf-8") as fh:
        rows = [line.rstrip("\r\n") for line in fh if line.strip()]
    if len(rows) != len(trials):
        raise FormatError(f"score file has {len(rows)} lines but trial list has {len(trials)}")
    for k, line in enumerate(rows):
        cols = line.rstrip().split("\t")
        if len(cols) != 3:
            raise FormatError(f"scores line {k + 1}: expected 3 columns, got {len(cols)}")
        if cols[0] != trials.enroll_ids[k] or cols[1] != trials.test_ids[k]:
            raise FormatError(f"scores line {k + 1}: ids {cols[0]!r} {cols[1]!r} do not match trial "
                              f"{trials.enroll_ids[k]!r} {trials.test_ids[k]!r}")
        try:
            values.append(float(cols[2]))
        except ValueError:
            raise FormatError(f"scores line {k + 1}: bad score {cols[2]!r}") from None
    try:
        return ScoreSet(trials, values, stage)
    except ValidationError as exc:
        raise FormatError(str(exc)) from None
