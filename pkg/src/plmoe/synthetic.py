"""Synthetic multi-language code generator for controlled experiments.

Each language draws statements from a small probabilistic grammar. The
surface pools are arranged so that sparse per-language capacity is
rewarded: operator and digit pools are shared across languages, keyword
pools are disjoint, and every language carries private deterministic
successor rules over names, operators and digits. Predicting a successor
token requires language identity, so models that can dedicate capacity
per language have an edge over a single shared stack of the same size.
One rule family (the digit-conditioned ``@`` triples) is identical across
languages, so capacity routable by every language can learn it once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import RawDoc
from .rng import make_rng

LANGUAGES = ("go", "java", "javascript", "php", "python", "ruby")

# disjoint per-language keyword pools
KEYWORDS = {
    "go": ("func", "package", "chan", "defer", "fallthrough"),
    "java": ("public", "static", "void", "extends", "implements"),
    "javascript": ("function", "const", "let", "typeof", "await"),
    "php": ("echo", "foreach", "endif", "elseif", "fn"),
    "python": ("def", "elif", "lambda", "yield", "pass"),
    "ruby": ("end", "puts", "unless", "elsif", "begin"),
}

# shared pools
NAMES = (
    "a", "b", "c", "x", "y", "z", "val", "res", "tmp", "n", "i", "j",
    "k", "m", "p", "q", "s", "t", "u", "w",
)
OPS = ("+", "-", "*", "==", "<", ">", "+=", "-=")
DIGITS = tuple(str(d) for d in range(10))


@dataclass
class GrammarConfig:
    languages: tuple[str, ...] = LANGUAGES
    docs_per_pl: int = 200
    min_lines: int = 3
    max_lines: int = 8
    seed: int = 0
    # per-language document count multipliers, e.g. {"ruby": 0.1}
    low_resource: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "languages": list(self.languages),
            "docs_per_pl": self.docs_per_pl,
            "min_lines": self.min_lines,
            "max_lines": self.max_lines,
            "seed": self.seed,
            "low_resource": dict(self.low_resource),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GrammarConfig":
        obj = dict(obj)
        obj["languages"] = tuple(obj.get("languages", LANGUAGES))
        return cls(**obj)


def _permutation(pool: tuple[str, ...], *streams) -> dict[str, str]:
    rng = make_rng(*streams)
    perm = rng.permutation(len(pool))
    return {pool[i]: pool[int(perm[i])] for i in range(len(pool))}


def digit_successor(pl: str, seed: int, kw: str) -> dict[str, str]:
    """The language's private digit permutation for one of its keywords.

    Conditioning on the leading keyword multiplies the number of mappings a
    model must hold per language, which is what makes a single shared
    feed-forward stack saturate while per-language experts do not.
    """
    return _permutation(DIGITS, seed, "digit-perm", pl, kw)


def name_successor(pl: str, seed: int) -> dict[str, str]:
    """The language's private permutation of the shared name pool."""
    return _permutation(NAMES, seed, "name-perm", pl)


def op_successor(pl: str, seed: int) -> dict[str, str]:
    """The language's private permutation of the shared operator pool."""
    return _permutation(OPS, seed, "op-perm", pl)


def shared_successor(seed: int, d: str) -> dict[str, str]:
    """A name permutation common to every language (the ``@`` triples).

    Conditioning on a digit makes the language-agnostic rule family large
    enough (10 x 20 mappings) that it pays to learn it once in capacity
    every language can route to, rather than once per language.
    """
    return _permutation(NAMES, seed, "shared-perm", d)


class _Rules:
    """All successor tables for one (language, seed)."""

    def __init__(self, pl: str, seed: int):
        self.digit = {kw: digit_successor(pl, seed, kw) for kw in KEYWORDS[pl]}
        self.name = name_successor(pl, seed)
        self.op = op_successor(pl, seed)
        self.shared = {d: shared_successor(seed, d) for d in DIGITS}


def _pick(rng: np.random.Generator, pool):
    return pool[int(rng.integers(len(pool)))]


def _statement(pl: str, rng: np.random.Generator, rules: _Rules) -> str:
    kw = _pick(rng, KEYWORDS[pl])
    n1 = _pick(rng, NAMES)
    n2 = rules.name[n1]
    op1 = _pick(rng, OPS)
    op2 = rules.op[op1]
    d1 = _pick(rng, DIGITS)
    d2 = rules.digit[kw][d1]
    d3 = _pick(rng, DIGITS)
    m1 = _pick(rng, NAMES)
    m2 = rules.shared[d3][m1]
    form = int(rng.integers(3))
    if form == 0:
        core = f"{n1} . {n2} = {d1} + {d2} {op1} {op2} @ {d3} {m1} {m2}"
    elif form == 1:
        core = f"{n1} . {n2} {op1} {op2} ( {d1} + {d2} ) @ {d3} {m1} {m2}"
    else:
        core = f"@ {d3} {m1} {m2} , {n1} . {n2} {op1} {op2} {d1} + {d2}"
    if pl in ("python", "ruby"):
        return f"{kw} {core}"
    if pl in ("go", "java", "javascript"):
        return f"{kw} {core} ;"
    return f"{kw} $ {core} ;"  # php


def gen_doc(pl: str, cfg: GrammarConfig, rng: np.random.Generator, rules: _Rules) -> RawDoc:
    n_lines = int(rng.integers(cfg.min_lines, cfg.max_lines + 1))
    code = "\n".join(_statement(pl, rng, rules) for _ in range(n_lines)) + "\n"
    return RawDoc(pl=pl, code=code)


def docs_for(pl: str, cfg: GrammarConfig) -> int:
    frac = cfg.low_resource.get(pl, 1.0)
    return max(1, int(round(cfg.docs_per_pl * frac)))


def generate(cfg: GrammarConfig) -> list[RawDoc]:
    """All documents for all configured languages, deterministically."""
    docs = []
    for pl in cfg.languages:
        if pl not in KEYWORDS:
            raise ValueError(f"no grammar for language {pl!r}")
        rules = _Rules(pl, cfg.seed)
        rng = make_rng(cfg.seed, "docs", pl)
        docs.extend(gen_doc(pl, cfg, rng, rules) for _ in range(docs_for(pl, cfg)))
    return docs


def write_raw_jsonl(docs: list[RawDoc], path: str | Path, cfg: GrammarConfig | None = None) -> None:
    """Raw-document JSONL; the optional first line records grammar params."""
    with open(path, "w", encoding="utf-8") as f:
        if cfg is not None:
            f.write(json.dumps({"_header": {"grammar": cfg.to_json()}}) + "\n")
        for d in docs:
            obj = {"pl": d.pl, "code": d.code}
            if d.docstring:
                obj["docstring"] = d.docstring
            f.write(json.dumps(obj) + "\n")


def read_header(path: str | Path) -> dict | None:
    with open(path, encoding="utf-8") as f:
        first = f.readline().strip()
    if first:
        obj = json.loads(first)
        if "_header" in obj:
            return obj["_header"]
    return None
