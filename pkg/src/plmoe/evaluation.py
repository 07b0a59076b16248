"""Token-level completion metrics and the variant-comparison harness.

Accuracy counts argmax next-token predictions over every evaluable
position; edit similarity scores each predicted token string against the
reference token string via Levenshtein distance and averages. Padding and
the document-initial framing tokens (<s> and the language identifier) are
never evaluable targets; <EOL> and literal placeholders count as ordinary
tokens.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import betainc

from . import tensor as T
from .corpus import BOS, CorpusDoc, BpeVocab
from .model import Model
from .training import PAD_ID, TrainConfig, train_loop


@dataclass
class EvalResult:
    pl: str
    accuracy: float
    edit_similarity: float
    n_positions: int
    per_example: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.accuracy <= 100.0 and 0.0 <= self.edit_similarity <= 100.0):
            raise ValueError("metric percentages must lie in [0, 100]")
        if self.n_positions <= 0:
            raise ValueError("n_positions must be positive")


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance by full dynamic programming."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_similarity(pred_tokens: list[str] | str, gold_tokens: list[str] | str) -> float:
    """100 * (1 - dist / max length), on space-joined token strings."""
    a = pred_tokens if isinstance(pred_tokens, str) else " ".join(pred_tokens)
    b = gold_tokens if isinstance(gold_tokens, str) else " ".join(gold_tokens)
    if not a and not b:
        return 100.0
    return 100.0 * (1.0 - levenshtein(a, b) / max(len(a), len(b)))


def _frame_ids(vocab: BpeVocab) -> set[int]:
    ids = {vocab.id_of[BOS]}
    for tok in vocab.specials:
        inner = tok[1:-1]
        if inner.isalpha() and inner.islower() and tok not in ("<s>", "<pad>", "<unk>"):
            # language identifier tokens like <python>, <en>
            ids.add(vocab.id_of[tok])
    return ids


def token_accuracy(model: Model, docs: list[CorpusDoc], vocab: BpeVocab) -> dict[str, EvalResult]:
    """Next-token accuracy and per-position edit similarity, per language."""
    frame = _frame_ids(vocab)
    agg: dict[str, dict] = {}
    with T.no_grad():
        for doc in docs:
            tokens = np.asarray(doc.tokens)[None, :]
            if tokens.shape[1] < 2:
                continue
            logits, _ = model.forward(tokens, pl=doc.pl, train=False)
            preds = T.argmax(logits).astype(np.int64)[0, :-1]
            targets = tokens[0, 1:]
            mask = (targets != PAD_ID) & ~np.isin(targets, list(frame))
            if not mask.any():
                continue
            correct = (preds == targets) & mask
            es_scores = [
                edit_similarity(vocab.symbol_of[p], vocab.symbol_of[g])
                for p, g in zip(preds[mask], targets[mask])
            ]
            a = agg.setdefault(doc.pl, {"correct": 0, "n": 0, "es_sum": 0.0, "per_example": []})
            n = int(mask.sum())
            a["correct"] += int(correct.sum())
            a["n"] += n
            a["es_sum"] += sum(es_scores)
            a["per_example"].append(
                {"accuracy": 100.0 * correct.sum() / n, "edit_similarity": float(np.mean(es_scores))}
            )
    out = {}
    for pl, a in agg.items():
        out[pl] = EvalResult(
            pl=pl,
            accuracy=100.0 * a["correct"] / a["n"],
            edit_similarity=a["es_sum"] / a["n"],
            n_positions=a["n"],
            per_example=a["per_example"],
        )
    return out


def evaluate_completion(
    model: Model,
    docs: list[CorpusDoc],
    vocab: BpeVocab,
    split: str = "test",
) -> dict[str, EvalResult]:
    """Per-PL results for one split, plus an 'Overall' row averaging PLs."""
    if len(vocab) != model.config.vocab_size:
        raise ValueError(
            f"vocab size {len(vocab)} does not match checkpoint vocab {model.config.vocab_size}"
        )
    subset = [d for d in docs if d.split == split]
    if not subset:
        warnings.warn(f"no documents in split {split!r}", stacklevel=2)
    results = token_accuracy(model, subset, vocab)
    if results:
        pls = sorted(results)
        results["Overall"] = EvalResult(
            pl="Overall",
            accuracy=float(np.mean([results[p].accuracy for p in pls])),
            edit_similarity=float(np.mean([results[p].edit_similarity for p in pls])),
            n_positions=sum(results[p].n_positions for p in pls),
        )
    return results


def paired_t_test(scores_a: list[float], scores_b: list[float]) -> dict:
    """Two-sided paired t-test; flags zero-variance differences as degenerate."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_t_test needs two equal-length samples of size >= 2")
    d = a - b
    sd = d.std(ddof=1)
    n = len(d)
    if sd == 0.0:
        return {"t": None, "p": None, "degenerate": True, "mean_diff": float(d.mean())}
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return {"t": float(t), "p": p, "degenerate": False, "mean_diff": float(d.mean())}


# ---------------------------------------------------------------------------
# ablation harness


def ablation_run(
    docs: list[CorpusDoc],
    vocab: BpeVocab,
    make_model,
    tcfgs: dict[str, TrainConfig],
    out_dir: str | Path | None = None,
) -> dict:
    """Train and evaluate several variants on identical data order.

    ``make_model(variant)`` builds a fresh model; all TrainConfigs must share
    one seed or the paired comparison would be invalid.
    """
    seeds = {cfg.seed for cfg in tcfgs.values()}
    if len(seeds) != 1:
        raise ValueError(f"ablation variants must share one seed, got {sorted(seeds)}")
    out_dir = Path(out_dir) if out_dir else None
    results: dict[str, dict[str, EvalResult]] = {}
    val: dict[str, dict[str, float]] = {}
    for variant, tcfg in tcfgs.items():
        model = make_model(variant)
        ckpt = out_dir / variant if out_dir else None
        res = train_loop(model, docs, tcfg, out_dir=ckpt)
        results[variant] = evaluate_completion(res.model, docs, vocab)
        val[variant] = res.best_val or {}
    return {"results": results, "val": val}


def results_to_json(results: dict[str, dict[str, EvalResult]], path: str | Path) -> None:
    rows = [
        {
            "variant": variant,
            "pl": r.pl,
            "accuracy": r.accuracy,
            "edit_similarity": r.edit_similarity,
            "n_positions": r.n_positions,
        }
        for variant, per_pl in results.items()
        for r in per_pl.values()
    ]
    Path(path).write_text(json.dumps(rows, indent=2))


def results_to_csv(results: dict[str, dict[str, EvalResult]], path: str | Path) -> None:
    """Comparison table: one row per variant, Acc/ES columns per PL + Overall."""
    pls = sorted({pl for per_pl in results.values() for pl in per_pl if pl != "Overall"})
    cols = pls + ["Overall"]
    with open(path, "w", encoding="utf-8") as f:
        f.write("variant," + ",".join(f"{p}_acc,{p}_es" for p in cols) + "\n")
        for variant, per_pl in results.items():
            cells = []
            for p in cols:
                if p in per_pl:
                    cells += [f"{per_pl[p].accuracy:.4f}", f"{per_pl[p].edit_similarity:.4f}"]
                else:
                    cells += ["", ""]
            f.write(variant + "," + ",".join(cells) + "\n")
