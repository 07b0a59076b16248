"""Corpus construction for multi-language code completion.

Raw code goes through a four-stage normalization: lexical tokenization,
<s>/</s> framing with a language-identifier token, <EOL> insertion for
python line breaks, and literal normalization (frequent string/numeric
literals keep their value as ``<STR_LIT:v>`` / ``<NUM_LIT:v>`` tokens, rare
ones collapse to bare placeholders). A BPE vocabulary is then trained over
the normalized token strings, with all special tokens kept atomic.

Files on disk are JSON-lines: input ``{"pl", "code", "docstring"?}``,
output ``{"pl", "split", "tokens"}``, plus a JSON vocab file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

DEFAULT_LANGUAGES = ("go", "java", "javascript", "php", "python", "ruby", "en")

PAD, UNK, BOS, EOS, EOL = "<pad>", "<unk>", "<s>", "</s>", "<EOL>"
STR_LIT, NUM_LIT = "<STR_LIT>", "<NUM_LIT>"
_END = "</w>"


class ConfigError(ValueError):
    pass


class EmptyDocError(ValueError):
    pass


@dataclass
class PipelineConfig:
    languages: tuple[str, ...] = DEFAULT_LANGUAGES
    string_cap: int = 200
    number_cap: int = 30
    vocab_size: int = 512
    max_seq: int = 256
    bidirectional: bool = False
    # optional [pattern, replacement-token] pairs applied to raw text, for
    # named-entity style scrubbing; empty means no entity replacement
    entity_patterns: tuple[tuple[str, str], ...] = ()

    def pl_token(self, pl: str) -> str:
        if pl not in self.languages:
            raise ConfigError(f"unknown language {pl!r}; configured: {list(self.languages)}")
        return f"<{pl}>"


@dataclass
class RawDoc:
    pl: str
    code: str
    docstring: str | None = None

    def content_hash(self) -> str:
        h = hashlib.sha1()
        h.update(self.pl.encode())
        h.update(b"\x00")
        h.update(self.code.encode())
        if self.docstring:
            h.update(b"\x00")
            h.update(self.docstring.encode())
        return h.hexdigest()


@dataclass
class CorpusDoc:
    pl: str
    tokens: list[int]
    split: str


# ---------------------------------------------------------------------------
# rule 1: lexical tokenization

_LINE_COMMENTS = {
    "python": ("#",),
    "ruby": ("#",),
    "go": ("//",),
    "java": ("//",),
    "javascript": ("//",),
    "php": ("//", "#"),
    "en": (),
}
_BLOCK_COMMENTS = {
    "go": ("/*", "*/"),
    "java": ("/*", "*/"),
    "javascript": ("/*", "*/"),
    "php": ("/*", "*/"),
}

_NUMBER_RE = re.compile(r"0[xX][0-9a-fA-F]+|\d+\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?")
_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_OPERATORS = sorted(
    [
        "===", "!==", "<<=", ">>=", "**=", "<=>", "...",
        "==", "!=", "<=", ">=", "&&", "||", "++", "--", "+=", "-=", "*=", "/=",
        "%=", "&=", "|=", "^=", "::", "<<", ">>", "**", "->", "=>", "?:",
    ],
    key=len,
    reverse=True,
)


def lex(raw: str, pl: str) -> list[tuple[str, str]]:
    """Split source text into (kind, text) tokens; comments are dropped.

    Kinds: ``id``, ``num``, ``str`` (text is the literal content without
    quotes), ``op``, ``nl`` (newline, emitted for every PL, filtered later).
    """
    line_comments = _LINE_COMMENTS.get(pl, ())
    block = _BLOCK_COMMENTS.get(pl)
    out: list[tuple[str, str]] = []
    i, n = 0, len(raw)
    while i < n:
        c = raw[i]
        if c == "\n":
            out.append(("nl", "\n"))
            i += 1
            continue
        if c in " \t\r\f\v":
            i += 1
            continue
        if block and raw.startswith(block[0], i):
            end = raw.find(block[1], i + 2)
            stop = n if end < 0 else end + len(block[1])
            out.extend(("nl", "\n") for _ in range(raw.count("\n", i, stop)))
            i = stop
            continue
        matched_comment = False
        for prefix in line_comments:
            if raw.startswith(prefix, i):
                end = raw.find("\n", i)
                i = n if end < 0 else end  # keep the newline token
                matched_comment = True
                break
        if matched_comment:
            continue
        if raw.startswith(("'''", '"""'), i):
            quote = raw[i : i + 3]
            end = raw.find(quote, i + 3)
            stop = n if end < 0 else end
            out.append(("str", raw[i + 3 : stop]))
            i = stop + (3 if end >= 0 else 0)
            continue
        if c in "'\"":
            j = i + 1
            while j < n and raw[j] != c and raw[j] != "\n":
                j += 2 if raw[j] == "\\" else 1
            out.append(("str", raw[i + 1 : min(j, n)]))
            i = min(j, n) + 1
            continue
        m = _NUMBER_RE.match(raw, i)
        if m:
            out.append(("num", m.group()))
            i = m.end()
            continue
        m = _IDENT_RE.match(raw, i)
        if m:
            out.append(("id", m.group()))
            i = m.end()
            continue
        for op in _OPERATORS:
            if raw.startswith(op, i):
                out.append(("op", op))
                i += len(op)
                break
        else:
            out.append(("op", c))
            i += 1
    return out


# ---------------------------------------------------------------------------
# literal table (rule 4 support)


@dataclass
class LiteralTable:
    """Most frequent literals of the training split, which keep their value."""

    strings: list[tuple[str, int]] = field(default_factory=list)
    numbers: list[tuple[str, int]] = field(default_factory=list)

    def preserved_strings(self) -> set[str]:
        return {s for s, _ in self.strings}

    def preserved_numbers(self) -> set[str]:
        return {s for s, _ in self.numbers}

    def to_json(self) -> dict:
        return {"strings": self.strings, "numbers": self.numbers}

    @classmethod
    def from_json(cls, obj: dict) -> "LiteralTable":
        return cls(
            strings=[tuple(x) for x in obj["strings"]],
            numbers=[tuple(x) for x in obj["numbers"]],
        )


def _top_literals(counts: Counter, cap: int) -> list[tuple[str, int]]:
    # descending frequency, ties broken lexicographically (smaller kept first)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:cap]


def build_literal_table(
    train_docs: list[RawDoc],
    config: PipelineConfig,
    string_cap: int | None = None,
    number_cap: int | None = None,
) -> LiteralTable:
    if not train_docs:
        raise ValueError("build_literal_table needs at least one document")
    scap = config.string_cap if string_cap is None else string_cap
    ncap = config.number_cap if number_cap is None else number_cap
    strs: Counter = Counter()
    nums: Counter = Counter()
    for doc in train_docs:
        for kind, text in lex(doc.code, doc.pl):
            if kind == "str":
                strs[text] += 1
            elif kind == "num":
                nums[text] += 1
    return LiteralTable(strings=_top_literals(strs, scap), numbers=_top_literals(nums, ncap))


# ---------------------------------------------------------------------------
# rules 1-4 combined


def normalize(raw_code: str, pl: str, table: LiteralTable, config: PipelineConfig) -> list[str]:
    """Raw source -> normalized token strings (framing included)."""
    if not raw_code.strip():
        raise EmptyDocError("cannot normalize an empty document")
    pl_tok = config.pl_token(pl)
    for pattern, repl in config.entity_patterns:
        raw_code = re.sub(pattern, repl, raw_code)
    keep_s = table.preserved_strings()
    keep_n = table.preserved_numbers()
    body: list[str] = []
    for kind, text in lex(raw_code, pl):
        if kind == "nl":
            if pl == "python":
                body.append(EOL)
            continue
        if kind == "str":
            body.append(f"<STR_LIT:{text}>" if text in keep_s else STR_LIT)
        elif kind == "num":
            body.append(f"<NUM_LIT:{text}>" if text in keep_n else NUM_LIT)
        else:
            body.append(text)
    return [pl_tok, BOS] + body + [EOS]


# ---------------------------------------------------------------------------
# BPE vocabulary


class BpeVocab:
    """Character-level BPE over normalized token strings.

    Words end with an invisible end-of-word marker so that decoding can
    restore exact token boundaries; merges never cross words and special
    tokens are single atomic ids.
    """

    def __init__(self, specials: list[str], base_symbols: list[str], merges: list[tuple[str, str]]):
        self.specials = list(specials)
        self.base_symbols = list(base_symbols)
        self.merges = [tuple(m) for m in merges]
        symbols = self.specials + self.base_symbols + [a + b for a, b in self.merges]
        self.id_of = {s: i for i, s in enumerate(symbols)}
        self.symbol_of = symbols
        self.special_set = set(self.specials)
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache: dict[str, list[int]] = {}
        self.unknown_count = 0

    def __len__(self) -> int:
        return len(self.symbol_of)

    @property
    def pad_id(self) -> int:
        return self.id_of[PAD]

    def _segment(self, word: str) -> list[str]:
        parts = list(word[:-1]) + [word[-1] + _END]
        while len(parts) > 1:
            best, best_rank = None, None
            for pair in zip(parts, parts[1:]):
                r = self._ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged: list[str] = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == best:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        return parts

    def encode_token(self, token: str) -> list[int]:
        if token in self.special_set:
            return [self.id_of[token]]
        cached = self._cache.get(token)
        if cached is None:
            unk = self.id_of[UNK]
            cached = []
            for sym in self._segment(token):
                i = self.id_of.get(sym)
                if i is None:
                    self.unknown_count += 1
                    i = unk
                cached.append(i)
            self._cache[token] = cached
        return list(cached)

    def encode(self, tokens: list[str]) -> list[int]:
        out: list[int] = []
        for t in tokens:
            out.extend(self.encode_token(t))
        return out

    def decode(self, ids: list[int]) -> list[str]:
        out: list[str] = []
        buf = ""
        for i in ids:
            sym = self.symbol_of[i]
            if sym in self.special_set:
                if buf:
                    out.append(buf)
                    buf = ""
                out.append(sym)
            elif sym.endswith(_END):
                out.append(buf + sym[: -len(_END)])
                buf = ""
            else:
                buf += sym
        if buf:
            out.append(buf)
        return out

    def save(self, path: str | Path) -> None:
        obj = {"specials": self.specials, "base_symbols": self.base_symbols, "merges": self.merges}
        Path(path).write_text(json.dumps(obj, ensure_ascii=False))

    @classmethod
    def load(cls, path: str | Path) -> "BpeVocab":
        obj = json.loads(Path(path).read_text())
        return cls(obj["specials"], obj["base_symbols"], obj["merges"])


def special_tokens(config: PipelineConfig, table: LiteralTable) -> list[str]:
    """Pad first (id 0), then the fixed and table-derived specials."""
    toks = [PAD, UNK, BOS, EOS, EOL, STR_LIT, NUM_LIT]
    toks += [config.pl_token(pl) for pl in config.languages]
    toks += [f"<STR_LIT:{s}>" for s, _ in table.strings]
    toks += [f"<NUM_LIT:{s}>" for s, _ in table.numbers]
    return toks


def train_bpe(
    docs: list[list[str]],
    target_vocab_size: int,
    config: PipelineConfig,
    table: LiteralTable,
) -> BpeVocab:
    """Greedy most-frequent-pair merges over normalized token strings."""
    specials = special_tokens(config, table)
    special_set = set(specials)
    word_freq: Counter = Counter()
    for doc in docs:
        for tok in doc:
            if tok not in special_set:
                word_freq[tok] += 1

    base = sorted({sym for w in word_freq for sym in (list(w[:-1]) + [w[-1] + _END])})
    floor = len(specials) + len(base)
    if target_vocab_size <= floor and target_vocab_size != floor:
        raise ValueError(
            f"target_vocab_size {target_vocab_size} below specials+base symbols ({floor})"
        )

    words = {w: list(w[:-1]) + [w[-1] + _END] for w in word_freq}
    merges: list[tuple[str, str]] = []
    while floor + len(merges) < target_vocab_size:
        pairs: Counter = Counter()
        for w, parts in words.items():
            f = word_freq[w]
            for pair in zip(parts, parts[1:]):
                pairs[pair] += f
        if not pairs:
            log.warning(
                "BPE target vocab %d unreachable, stopping at %d",
                target_vocab_size,
                floor + len(merges),
            )
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        for w, parts in words.items():
            if len(parts) < 2:
                continue
            merged: list[str] = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == best:
                    merged.append(parts[i] + parts[i + 1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            words[w] = merged
    return BpeVocab(specials, base, merges)


# ---------------------------------------------------------------------------
# encoding and windowing


def encode_doc(
    norm_tokens: list[str],
    vocab: BpeVocab,
    pl: str,
    split: str,
    max_seq: int,
) -> list[CorpusDoc]:
    """Encode one normalized doc, windowing overflow into max_seq chunks."""
    ids = vocab.encode(norm_tokens)
    return [CorpusDoc(pl=pl, tokens=ids[i : i + max_seq], split=split) for i in range(0, len(ids), max_seq)]


# ---------------------------------------------------------------------------
# split derivation


def split_fractions(n: int) -> tuple[int, int, int]:
    """96/2/2 counts for n documents (train gets the rounding slack)."""
    dev = round(n * 0.02)
    test = round(n * 0.02)
    return n - dev - test, dev, test


def derive_splits(
    docs: list[RawDoc],
    mode: str = "full",
    *,
    pl: str | None = None,
    reference_pl: str | None = None,
    excluded_pl: str | None = None,
) -> list[tuple[RawDoc, str]]:
    """Assign train/dev/test per PL by stable content-hash order.

    Modes: ``full`` (96/2/2 per PL), ``low_resource`` (target PL's train set
    downsampled to the reference PL's train count), ``cross_domain``
    (excluded PL dropped from the train split).
    """
    by_pl: dict[str, list[RawDoc]] = {}
    for d in docs:
        by_pl.setdefault(d.pl, []).append(d)

    assigned: dict[str, list[tuple[RawDoc, str]]] = {}
    for lang, group in by_pl.items():
        ordered = sorted(group, key=lambda d: d.content_hash())
        n_train, n_dev, _ = split_fractions(len(ordered))
        rows = []
        for i, d in enumerate(ordered):
            split = "train" if i < n_train else ("dev" if i < n_train + n_dev else "test")
            rows.append((d, split))
        assigned[lang] = rows

    if mode == "full":
        pass
    elif mode == "low_resource":
        if pl is None or reference_pl is None:
            raise ConfigError("low_resource mode needs pl and reference_pl")
        ref_train = sum(1 for _, s in assigned.get(reference_pl, []) if s == "train")
        tgt = [row for row in assigned[pl] if row[1] == "train"]
        if ref_train > len(tgt):
            raise ConfigError(
                f"reference PL {reference_pl!r} train set ({ref_train}) larger than "
                f"target {pl!r} ({len(tgt)})"
            )
        keep = {id(d) for d, _ in tgt[:ref_train]}
        assigned[pl] = [row for row in assigned[pl] if row[1] != "train" or id(row[0]) in keep]
    elif mode == "cross_domain":
        if excluded_pl is None:
            raise ConfigError("cross_domain mode needs excluded_pl")
        assigned[excluded_pl] = [row for row in assigned.get(excluded_pl, []) if row[1] != "train"]
    else:
        raise ConfigError(f"unknown split mode {mode!r}")

    out: list[tuple[RawDoc, str]] = []
    for lang in sorted(assigned):
        out.extend(assigned[lang])
    return out


# ---------------------------------------------------------------------------
# end-to-end build and file I/O


def read_raw_jsonl(path: str | Path) -> list[RawDoc]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "_header" in obj:
                continue
            docs.append(RawDoc(pl=obj["pl"], code=obj["code"], docstring=obj.get("docstring")))
    return docs


def write_corpus_jsonl(docs: list[CorpusDoc], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for d in docs:
            f.write(json.dumps({"pl": d.pl, "split": d.split, "tokens": d.tokens}) + "\n")


def read_corpus_jsonl(path: str | Path) -> list[CorpusDoc]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            docs.append(CorpusDoc(pl=obj["pl"], tokens=list(obj["tokens"]), split=obj["split"]))
    return docs


def _doc_token_streams(doc: RawDoc, table: LiteralTable, config: PipelineConfig) -> list[list[str]]:
    code_toks = normalize(doc.code, doc.pl, table, config)
    if not (config.bidirectional and doc.docstring):
        return [code_toks]
    ds_toks = normalize(doc.docstring, "en", table, config)
    return [ds_toks + code_toks, code_toks + ds_toks]


def build_corpus(
    raw_docs: list[RawDoc],
    config: PipelineConfig,
    mode: str = "full",
    **split_params,
) -> tuple[list[CorpusDoc], BpeVocab, LiteralTable]:
    """Split, normalize, train BPE on the train split, and encode everything."""
    rows = derive_splits(raw_docs, mode, **split_params)
    train_raw = [d for d, s in rows if s == "train"]
    if not train_raw:
        raise ConfigError("empty train split")
    table = build_literal_table(train_raw, config)

    norm_rows: list[tuple[list[str], str, str]] = []
    for d, s in rows:
        for toks in _doc_token_streams(d, table, config):
            norm_rows.append((toks, d.pl, s))

    vocab = train_bpe([t for t, _, s in norm_rows if s == "train"], config.vocab_size, config, table)

    out: list[CorpusDoc] = []
    for toks, lang, s in norm_rows:
        out.extend(encode_doc(toks, vocab, lang, s, config.max_seq))
    return out, vocab, table
