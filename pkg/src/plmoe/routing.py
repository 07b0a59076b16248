"""Expert allocation and the three routing strategies.

``switch_route`` gates over every expert and dispatches each token to its
top-1 choice, scaling the expert output by the gate value. ``pl_moe_route``
restricts the gate softmax to the token language's exclusive expert group
plus the shared experts, takes the top-k of that distribution, and sums the
gate-weighted expert outputs without renormalizing over the selected set.
Unselected experts are never executed and therefore receive no gradient.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class AllocationError(ValueError):
    pass


class RoutingError(ValueError):
    pass


@dataclass
class ExpertAllocation:
    """Exclusive expert-index groups per language, plus the shared group."""

    per_pl: dict[str, list[int]]
    shared: list[int]
    total_experts: int

    def __post_init__(self):
        self.per_pl = {pl: sorted(ix) for pl, ix in self.per_pl.items()}
        self.shared = sorted(self.shared)
        self.validate()

    def validate(self) -> None:
        seen: set[int] = set()
        for pl, ix in self.per_pl.items():
            if not ix:
                raise AllocationError(f"language {pl!r} has an empty expert group")
            if seen & set(ix):
                raise AllocationError(f"expert group of {pl!r} overlaps another group")
            seen |= set(ix)
        if seen & set(self.shared):
            raise AllocationError("shared experts overlap a language group")
        seen |= set(self.shared)
        if seen and (min(seen) < 0 or max(seen) >= self.total_experts):
            raise AllocationError(f"expert index out of range for E={self.total_experts}")

    def candidates(self, pl: str, include_shared: bool = True) -> list[int]:
        if pl not in self.per_pl:
            raise RoutingError(f"language {pl!r} missing from expert allocation")
        c = list(self.per_pl[pl])
        if include_shared:
            c += self.shared
        return sorted(c)

    def routable_count(self, pl: str) -> int:
        return len(self.per_pl[pl]) + len(self.shared)

    def save(self, path: str | Path) -> None:
        obj = {"total_experts": self.total_experts, "shared": self.shared, "per_pl": self.per_pl}
        Path(path).write_text(json.dumps(obj, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ExpertAllocation":
        obj = json.loads(Path(path).read_text())
        return cls(per_pl=obj["per_pl"], shared=obj["shared"], total_experts=obj["total_experts"])


def allocate_experts(
    data_sizes: dict[str, int],
    total_experts: int,
    shared: int,
    min_per_pl: int = 2,
    explicit: dict[str, list[int]] | None = None,
) -> ExpertAllocation:
    """Distribute the non-shared budget proportionally to data sizes.

    Largest-remainder rounding over the full budget, then floors enforced by
    taking from the largest groups. Indices are contiguous in language-name
    order with the shared experts on the final indices. An explicit per-PL
    map overrides the heuristic entirely.
    """
    if shared < 0 or total_experts <= 0:
        raise AllocationError("need total_experts > 0 and shared >= 0")
    if explicit is not None:
        shared_ix = list(range(total_experts - shared, total_experts))
        return ExpertAllocation(per_pl=explicit, shared=shared_ix, total_experts=total_experts)

    pls = sorted(data_sizes)
    budget = total_experts - shared
    if budget < len(pls) * min_per_pl:
        raise AllocationError(
            f"budget {budget} cannot give {len(pls)} languages a floor of {min_per_pl}"
        )
    total = sum(data_sizes.values())
    if total <= 0:
        raise AllocationError("data sizes must be positive")

    quotas = {pl: budget * data_sizes[pl] / total for pl in pls}
    counts = {pl: int(np.floor(quotas[pl])) for pl in pls}
    leftover = budget - sum(counts.values())
    by_remainder = sorted(pls, key=lambda pl: (-(quotas[pl] - counts[pl]), pl))
    for pl in by_remainder[:leftover]:
        counts[pl] += 1
    # enforce the floor by taking from the currently largest group
    for pl in pls:
        while counts[pl] < min_per_pl:
            donor = max(pls, key=lambda q: (counts[q], q))
            if counts[donor] <= min_per_pl:
                raise AllocationError("floor enforcement exhausted the budget")
            counts[donor] -= 1
            counts[pl] += 1

    per_pl: dict[str, list[int]] = {}
    nxt = 0
    for pl in pls:
        per_pl[pl] = list(range(nxt, nxt + counts[pl]))
        nxt += counts[pl]
    shared_ix = list(range(total_experts - shared, total_experts))
    return ExpertAllocation(per_pl=per_pl, shared=shared_ix, total_experts=total_experts)


class RoutingTrace:
    """Token counts per (layer, language, expert), mergeable across passes."""

    def __init__(self):
        self.counts: dict[tuple[int, str, int], int] = defaultdict(int)

    def add(self, layer: int, pl: str, expert: int, n: int) -> None:
        if n:
            self.counts[(layer, pl, expert)] += int(n)

    def merge(self, other: "RoutingTrace") -> None:
        for key, n in other.counts.items():
            self.counts[key] += n

    def rows(self, total_experts: int) -> list[tuple[int, str, int, int, float]]:
        """(layer, pl, expert, count, row_fraction) with rows summing to 1."""
        totals: dict[tuple[int, str], int] = defaultdict(int)
        for (layer, pl, _), n in self.counts.items():
            totals[(layer, pl)] += n
        out = []
        for (layer, pl) in sorted(totals):
            denom = totals[(layer, pl)]
            for e in range(total_experts):
                n = self.counts.get((layer, pl, e), 0)
                out.append((layer, pl, e, n, n / denom if denom else 0.0))
        return out

    def write_csv(self, path: str | Path, total_experts: int) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("layer,pl,expert,count,row_fraction\n")
            for layer, pl, e, n, frac in self.rows(total_experts):
                f.write(f"{layer},{pl},{e},{n},{frac!r}\n")


class FlopCounter:
    """Multiply-add counter for expert/dense FFN execution."""

    def __init__(self):
        self.ffn_macs = 0
        self.ffn_calls = 0

    def record(self, n_tokens: int, hidden: int, inner: int) -> None:
        self.ffn_macs += 2 * n_tokens * hidden * inner
        self.ffn_calls += n_tokens


def load_balance_aux_loss(gate: Tensor, top1: np.ndarray, alpha: float) -> Tensor:
    """Switch-style balance penalty over one candidate set.

    alpha * |C| * sum_i f_i * P_i, with f_i the fraction of tokens whose
    top-1 candidate gate is i (constant) and P_i the mean gate probability
    (differentiable).
    """
    n, c = gate.shape
    f = np.bincount(np.asarray(top1), minlength=c).astype(np.float64) / n
    p = T.tmean(gate, axis=0)
    return T.scale(T.tsum(T.multiply(p, Tensor(f))), alpha * c)


def _dispatch(
    x: Tensor,
    gate: Tensor,
    expert_ids: list[int],
    chosen_cols: np.ndarray,
    experts,
    *,
    trace: RoutingTrace | None,
    layer: int,
    pl: str,
) -> Tensor:
    """Run each chosen expert on its token subset; gate-weighted scatter-sum.

    ``chosen_cols`` is [n, k'] of candidate-column indices per token; column
    j of the candidate set corresponds to global expert expert_ids[j].
    """
    n = x.shape[0]
    out: Tensor | None = None
    for col, expert_id in enumerate(expert_ids):
        rows = np.nonzero((chosen_cols == col).any(axis=1))[0]
        if trace is not None:
            trace.add(layer, pl, expert_id, len(rows))
        if len(rows) == 0:
            continue
        xe = T.gather_rows(x, rows)
        ye = experts[expert_id](xe)
        ge = T.take_pairs(gate, rows, np.full(len(rows), col))
        contrib = T.scatter_rows(T.scale_rows(ye, ge), rows, n)
        out = contrib if out is None else T.add(out, contrib)
    if out is None:
        raise RoutingError("no expert received any token")
    return out


def switch_route(
    x: Tensor,
    experts,
    w_r: Tensor,
    *,
    trace: RoutingTrace | None = None,
    layer: int = 0,
    pl: str = "",
    aux_alpha: float = 0.0,
):
    """Top-1 routing over all experts; returns (output, aux_loss | None)."""
    e = w_r.shape[1]
    if len(experts) != e:
        raise RoutingError(f"router has {e} columns but {len(experts)} experts supplied")
    gate = T.softmax(T.matmul(x, w_r), axis=-1)
    _, top1 = T.top_k(gate, 1)
    out = _dispatch(x, gate, list(range(e)), top1, experts, trace=trace, layer=layer, pl=pl)
    aux = load_balance_aux_loss(gate, top1[:, 0], aux_alpha) if aux_alpha else None
    return out, aux


def pl_moe_route(
    x: Tensor,
    pl: str,
    alloc: ExpertAllocation,
    experts,
    w_r: Tensor,
    k: int,
    *,
    include_shared: bool = True,
    trace: RoutingTrace | None = None,
    layer: int = 0,
    aux_alpha: float = 0.0,
):
    """Top-k routing over the language's candidate set; see module docstring."""
    cand = alloc.candidates(pl, include_shared=include_shared)
    cols = np.array(cand)
    # slice the router columns down to the candidate set
    w_c = T.transpose(T.gather_rows(T.transpose(w_r), cols))
    gate = T.softmax(T.matmul(x, w_c), axis=-1)
    kk = min(k, len(cand))
    _, chosen = T.top_k(gate, kk)
    out = _dispatch(x, gate, cand, chosen, experts, trace=trace, layer=layer, pl=pl)
    aux = load_balance_aux_loss(gate, chosen[:, 0], aux_alpha) if aux_alpha else None
    return out, aux


def pl_moe_route_no_shared(x, pl, alloc, experts, w_r, k, **kw):
    return pl_moe_route(x, pl, alloc, experts, w_r, k, include_shared=False, **kw)


def occupancy_report(trace: RoutingTrace, alloc: ExpertAllocation, total_experts: int | None = None) -> dict:
    """Per-PL routable counts/fractions and row-normalized expert usage.

    PLs absent from ``alloc.per_pl`` (the all-shared switch layout) can route
    to every expert.
    """
    if not trace.counts:
        raise ValueError("routing trace is empty")
    e = alloc.total_experts if total_experts is None else total_experts
    trace_pls = {pl for (_, pl, _) in trace.counts}
    per_pl = {}
    for pl in sorted(set(alloc.per_pl) | trace_pls):
        routable = alloc.routable_count(pl) if pl in alloc.per_pl else e
        per_pl[pl] = {"routable": routable, "fraction": routable / e}
    mean_occ = sum(v["fraction"] for v in per_pl.values()) / len(per_pl) if per_pl else 0.0

    rows = trace.rows(e)
    dist: dict[tuple[int, str], list[float]] = {}
    for layer, pl, expert, _, frac in rows:
        dist.setdefault((layer, pl), [0.0] * e)[expert] = frac
    return {"per_pl": per_pl, "mean_occupancy": mean_occ, "distribution": dist}
