"""End-to-end acceptance checks for the whole package.

Each test class is one criterion; the terminal summary prints a pass/fail
line per test. The directional training criteria run real multi-seed
experiments and dominate the runtime of this file.
"""

import itertools
import math
import statistics
import time

import numpy as np
import pytest

from gradcheck import check_gradients
from plmoe import tensor as T
from plmoe.corpus import PipelineConfig, build_corpus
from plmoe.evaluation import edit_similarity, levenshtein
from plmoe.model import Model, ModelConfig, load_checkpoint
from plmoe.rng import make_rng
from plmoe.routing import (
    ExpertAllocation,
    FlopCounter,
    RoutingTrace,
    allocate_experts,
    occupancy_report,
)
from plmoe.synthetic import GrammarConfig, generate
from plmoe.tensor import Tensor
from plmoe.training import (
    TrainConfig,
    eval_loss_per_pl,
    group_docs,
    lm_loss,
    pretrain,
    train_loop,
)

PLS = ("go", "java", "javascript", "php", "python", "ruby")


# ---------------------------------------------------------------------------
# criterion: autodiff soundness


def _quad(z):
    return T.tsum(T.multiply(z, z))


def _dims(rng, lo=2, hi=5):
    return int(rng.integers(lo, hi + 1))


def _case_add(rng):
    m, n = _dims(rng), _dims(rng)
    return lambda a, b: _quad(T.add(a, b)), [rng.normal(size=(m, n)), rng.normal(size=(n,))]


def _case_multiply(rng):
    m, n = _dims(rng), _dims(rng)
    return lambda a, b: _quad(T.multiply(a, b)), [rng.normal(size=(m, n)), rng.normal(size=(m, 1))]


def _case_scale(rng):
    s = float(rng.normal())
    return lambda a: _quad(T.scale(a, s)), [rng.normal(size=(_dims(rng), _dims(rng)))]


def _case_transpose(rng):
    axes = tuple(rng.permutation(3))
    c = rng.normal(size=(2, 3, 2))
    shaped = c.transpose(axes)
    return (
        lambda a: T.tsum(T.multiply(T.transpose(a, axes), Tensor(shaped.copy()))),
        [rng.normal(size=(2, 3, 2))],
    )


def _case_reshape(rng):
    return lambda a: _quad(T.reshape(a, (6,))), [rng.normal(size=(2, 3))]


def _case_concat(rng):
    n = _dims(rng)
    return (
        lambda a, b: _quad(T.concat([a, b], axis=0)),
        [rng.normal(size=(2, n)), rng.normal(size=(3, n))],
    )


def _case_matmul(rng):
    m, k, n = _dims(rng), _dims(rng), _dims(rng)
    return lambda a, b: _quad(T.matmul(a, b)), [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _case_matmul_batched(rng):
    b, m, k, n = 2, _dims(rng), _dims(rng), _dims(rng)
    return (
        lambda x, y: _quad(T.matmul(x, y)),
        [rng.normal(size=(b, m, k)), rng.normal(size=(b, k, n))],
    )


def _case_softmax(rng):
    m, n = _dims(rng), _dims(rng)
    c = Tensor(rng.normal(size=(m, n)))
    return lambda a: T.tsum(T.multiply(T.softmax(a), c)), [rng.normal(size=(m, n))]


def _case_layer_norm(rng):
    m, n = _dims(rng), _dims(rng, 3, 6)
    return (
        lambda x, g, b: _quad(T.layer_norm(x, g, b)),
        [rng.normal(size=(m, n)), 1.0 + 0.1 * rng.normal(size=(n,)), 0.1 * rng.normal(size=(n,))],
    )


def _case_gelu(rng):
    return lambda a: _quad(T.gelu(a)), [rng.normal(size=(_dims(rng), _dims(rng)))]


def _case_embedding(rng):
    rows, d = _dims(rng, 3, 6), _dims(rng)
    ids = rng.integers(0, rows, size=(2, 3))
    return lambda tab: _quad(T.embedding_lookup(tab, ids)), [rng.normal(size=(rows, d))]


def _case_scatter_rows(rng):
    n, d, out = 4, _dims(rng), 6
    idx = rng.integers(0, out, size=n)
    return lambda x: _quad(T.scatter_rows(x, idx, out)), [rng.normal(size=(n, d))]


def _case_take_pairs(rng):
    n, d = _dims(rng, 3, 5), _dims(rng, 3, 5)
    rows = rng.integers(0, n, size=4)
    cols = rng.integers(0, d, size=4)
    return lambda x: _quad(T.take_pairs(x, rows, cols)), [rng.normal(size=(n, d))]


def _case_scale_rows(rng):
    n, d = _dims(rng), _dims(rng)
    return (
        lambda x, s: _quad(T.scale_rows(x, s)),
        [rng.normal(size=(n, d)), rng.normal(size=(n,))],
    )


def _case_tsum_axis(rng):
    axis = int(rng.integers(0, 2))
    return lambda x: _quad(T.tsum(x, axis=axis)), [rng.normal(size=(3, 4))]


def _case_tmean(rng):
    return lambda x: _quad(T.tmean(x, axis=1)), [rng.normal(size=(3, 4))]


def _case_cross_entropy(rng):
    t, v = _dims(rng, 3, 6), _dims(rng, 4, 8)
    targets = rng.integers(0, v, size=t)
    targets[0] = -1  # ignored position
    return lambda lg: T.cross_entropy(lg, targets, ignore_id=-1), [rng.normal(size=(t, v))]


_CASES = [
    _case_add, _case_multiply, _case_scale, _case_transpose, _case_reshape,
    _case_concat, _case_matmul, _case_matmul_batched, _case_softmax,
    _case_layer_norm, _case_gelu, _case_embedding, _case_scatter_rows,
    _case_take_pairs, _case_scale_rows, _case_tsum_axis, _case_tmean,
    _case_cross_entropy,
]


class TestAutodiffSoundness:
    def test_200_random_cases_match_finite_differences(self):
        start = time.monotonic()
        for i in range(200):
            rng = make_rng(9000, "gradcase", i)
            builder = _CASES[i % len(_CASES)]
            fn, inputs = builder(rng)
            check_gradients(fn, inputs, step=1e-3, tol=1e-3)
        assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# criterion: causality


def _random_model(rng, variant):
    heads = int(rng.choice([2, 4]))
    hidden = heads * int(rng.choice([4, 8]))
    l_total = int(rng.integers(1, 4))
    l_moe = int(rng.integers(1, l_total + 1))
    vocab = int(rng.integers(20, 60))
    cfg = ModelConfig(
        vocab_size=vocab,
        l_total=l_total,
        l_moe=l_moe,
        hidden=hidden,
        max_seq=32,
        heads=heads,
        experts_per_layer=8,
        shared_experts=1,
        top_k=2,
        variant=variant,
        dropout=0.0,
    )
    alloc = None
    if variant.startswith("pl_moe"):
        alloc = ExpertAllocation(
            per_pl={pl: [i] for i, pl in enumerate(PLS)},
            shared=[6, 7],
            total_experts=8,
        )
    return Model(cfg, alloc=alloc, seed=int(rng.integers(1 << 16))), vocab


class TestCausality:
    def test_perturbation_never_leaks_backward_50_configs(self):
        variants = ("dense", "switch_moe", "pl_moe")
        for i in range(50):
            rng = make_rng(7000, "causal", i)
            variant = variants[i % 3]
            model, vocab = _random_model(rng, variant)
            t = int(rng.integers(4, 17))
            tokens = rng.integers(0, vocab, size=(1, t))
            pl = PLS[int(rng.integers(len(PLS)))]
            base, _ = model.forward(tokens, pl=pl)
            j = int(rng.integers(1, t))
            mod = tokens.copy()
            mod[0, j] = (mod[0, j] + 1 + int(rng.integers(vocab - 1))) % vocab
            out, _ = model.forward(mod, pl=pl)
            assert np.array_equal(base.data[0, :j], out.data[0, :j]), (variant, i)


# ---------------------------------------------------------------------------
# criterion: routing isolation + gradient isolation


def _toy_alloc():
    sizes = {pl: 100 * (i + 1) for i, pl in enumerate(PLS)}
    return allocate_experts(sizes, total_experts=8, shared=1, min_per_pl=1)


def _toy_model(seed, variant="pl_moe"):
    cfg = ModelConfig(
        vocab_size=64,
        l_total=2,
        l_moe=1,
        hidden=64,
        max_seq=32,
        heads=4,
        experts_per_layer=8,
        shared_experts=1,
        top_k=2,
        variant=variant,
        dropout=0.0,
    )
    return Model(cfg, alloc=_toy_alloc() if variant.startswith("pl") else None, seed=seed)


class TestRoutingAndGradientIsolation:
    def test_20_seeds_zero_mass_and_zero_gradient_outside_group(self):
        start = time.monotonic()
        for seed in range(20):
            model = _toy_model(seed)
            alloc = model.alloc
            rng = make_rng(seed, "iso")
            for pl in PLS:
                candidates = set(alloc.candidates(pl))
                tokens = rng.integers(0, 64, size=(2, 12))

                trace = RoutingTrace()
                logits, _ = model.forward(tokens, pl=pl, trace=trace)
                routed = {e for (_, p, e) in trace.counts if p == pl}
                assert routed <= candidates, (seed, pl)

                model.zero_grad()
                flat = T.reshape(logits, (24, 64))
                T.cross_entropy(flat, rng.integers(0, 64, size=24)).backward()
                for name, p in model.params.items():
                    if ".expert" not in name:
                        continue
                    e = int(name.split("expert")[1].split(".")[0])
                    if e not in candidates:
                        assert p.grad is None or not p.grad.any(), (seed, pl, name)
        assert time.monotonic() - start < 60.0


# ---------------------------------------------------------------------------
# criterion: occupancy reproduction


PROD_ALLOCATION = ExpertAllocation(
    per_pl={
        "ruby": [0, 1],
        "go": [2, 3, 4, 5],
        "javascript": [6, 7, 8, 9, 10],
        "php": [11, 12, 13, 14, 15, 16],
        "java": [17, 18, 19, 20, 21, 22],
        "python": [23, 24, 25, 26, 27, 28, 29, 30],
    },
    shared=[31],
    total_experts=32,
)


class TestOccupancyReproduction:
    def test_routable_counts_and_mean_occupancy(self):
        trace = RoutingTrace()
        for pl in PLS:
            for e in PROD_ALLOCATION.candidates(pl):
                trace.add(0, pl, e, 1)
        report = occupancy_report(trace, PROD_ALLOCATION)
        counts = sorted(v["routable"] for v in report["per_pl"].values())
        assert counts == [3, 5, 6, 7, 7, 9]
        assert report["mean_occupancy"] == pytest.approx(0.1927, abs=1e-4)


# ---------------------------------------------------------------------------
# criterion: compute proportionality


class TestComputeProportionality:
    def _macs(self, variant, top_k, e):
        cfg = ModelConfig(
            vocab_size=64,
            l_total=2,
            l_moe=1,
            hidden=32,
            max_seq=32,
            heads=4,
            experts_per_layer=e,
            shared_experts=1,
            top_k=top_k,
            variant=variant,
            dropout=0.0,
        )
        alloc = None
        if variant.startswith("pl"):
            alloc = allocate_experts(
                {pl: 10 * (i + 1) for i, pl in enumerate(PLS)}, e, 1, min_per_pl=1
            )
        model = Model(cfg, alloc=alloc, seed=0)
        counter = FlopCounter()
        model.forward(np.zeros((2, 9), dtype=int), pl="python", counter=counter)
        return counter.ffn_macs

    @pytest.mark.parametrize("e", [8, 16, 32])
    def test_switch_top1_equals_dense_and_pl_moe_top2_doubles(self, e):
        dense = self._macs("dense", 1, e)
        assert self._macs("switch_moe", 1, e) == dense
        # one of two layers is an expert layer: top-2 doubles that layer only
        n_tokens, hidden, inner = 18, 32, 128
        extra_per_expert_layer = 2 * n_tokens * hidden * inner
        assert self._macs("pl_moe", 2, e) - dense == extra_per_expert_layer


# ---------------------------------------------------------------------------
# criterion: metric oracles


class TestMetricOracles:
    def test_levenshtein_exhaustive_to_length_6(self):
        strings = ["".join(s) for n in range(7) for s in itertools.product("abc", repeat=n)]
        index = {s: i for i, s in enumerate(strings)}
        n = len(strings)
        # independent bottom-up oracle over suffix pairs, shortest first
        oracle = np.zeros((n, n), dtype=np.int8)
        by_len = sorted(strings, key=len)
        for a in by_len:
            ia = index[a]
            for b in by_len:
                ib = index[b]
                if not a:
                    oracle[ia, ib] = len(b)
                elif not b:
                    oracle[ia, ib] = len(a)
                else:
                    ta, tb = index[a[1:]], index[b[1:]]
                    oracle[ia, ib] = min(
                        oracle[ta, ib] + 1,
                        oracle[ia, tb] + 1,
                        oracle[ta, tb] + (a[0] != b[0]),
                    )
        for a in strings:
            ia = index[a]
            row = oracle[ia]
            for b in strings:
                assert levenshtein(a, b) == row[index[b]], (a, b)

    def test_kitten_sitting_edit_similarity(self):
        assert edit_similarity("kitten", "sitting") == pytest.approx(57.14, abs=0.01)

    @pytest.mark.parametrize("vocab", [64, 512])
    def test_fresh_model_loss_near_log_vocab(self, vocab):
        cfg = ModelConfig(
            vocab_size=vocab,
            l_total=2,
            l_moe=1,
            hidden=32,
            max_seq=32,
            heads=4,
            experts_per_layer=8,
            shared_experts=1,
            top_k=2,
            variant="dense",
            dropout=0.0,
        )
        model = Model(cfg, seed=3)
        tokens = make_rng(4, "fresh", vocab).integers(1, vocab, size=(4, 16))
        logits, _ = model.forward(tokens)
        loss, _ = lm_loss(logits, tokens)
        assert abs(float(loss.data) - math.log(vocab)) / math.log(vocab) < 0.05


# ---------------------------------------------------------------------------
# criteria: directional multi-seed training experiments
#
# Both criteria share one protocol: synthetic 6-language corpora, toy model
# (l_total=2, l_moe=1, h=64, E=8, SE=1, k=2), 2000 optimizer steps, and
# median dev loss across DIRECTIONAL_SEEDS. These two tests dominate the
# runtime of the whole suite (roughly 12 and 19 minutes respectively).


DIRECTIONAL_SEEDS = (0, 1, 2, 3, 4)


def _directional_corpus(seed, low_resource):
    gcfg = GrammarConfig(docs_per_pl=300, low_resource=dict(low_resource), seed=seed)
    pcfg = PipelineConfig(languages=gcfg.languages, vocab_size=120, max_seq=64)
    docs, vocab, _ = build_corpus(generate(gcfg), pcfg)
    sizes = {
        pl: sum(1 for d in docs if d.pl == pl and d.split == "train") for pl in gcfg.languages
    }
    alloc = allocate_experts(sizes, 8, 1, min_per_pl=1)
    return docs, vocab, alloc


def _directional_val(variant, docs, vocab, alloc, seed):
    cfg = ModelConfig(
        vocab_size=len(vocab),
        l_total=2,
        l_moe=1,
        hidden=64,
        max_seq=64,
        heads=4,
        experts_per_layer=8,
        shared_experts=1,
        top_k=2,
        variant=variant,
        dropout=0.0,
    )
    model = Model(cfg, alloc=None if variant == "dense" else alloc, seed=seed)
    tcfg = TrainConfig(
        steps=2000, warmup_steps=100, peak_lr=1e-3, batch_size=8, eval_interval=1000, seed=seed
    )
    train_loop(model, docs, tcfg)
    return eval_loss_per_pl(model, group_docs(docs, "dev"))


class TestLowResourceDirection:
    def test_median_small_pl_val_loss_pl_moe_dense_mono(self):
        start = time.monotonic()
        losses = {"mono": [], "dense": [], "pl_moe": []}
        for seed in DIRECTIONAL_SEEDS:
            docs, vocab, alloc = _directional_corpus(seed, {"ruby": 0.1})
            ruby_only = [d for d in docs if d.pl == "ruby"]
            losses["mono"].append(_directional_val("dense", ruby_only, vocab, alloc, seed)["ruby"])
            losses["dense"].append(_directional_val("dense", docs, vocab, alloc, seed)["ruby"])
            losses["pl_moe"].append(_directional_val("pl_moe", docs, vocab, alloc, seed)["ruby"])
        med = {k: statistics.median(v) for k, v in losses.items()}
        assert med["pl_moe"] <= med["dense"] < med["mono"], med
        assert time.monotonic() - start < 1800.0


class TestAblationDirection:
    def test_median_overall_val_loss_orders_all_four_variants(self):
        variants = ("pl_moe", "pl_moe_no_shared", "switch_moe", "dense")
        overall = {v: [] for v in variants}
        for seed in DIRECTIONAL_SEEDS:
            docs, vocab, alloc = _directional_corpus(seed, {})
            for variant in variants:
                val = _directional_val(variant, docs, vocab, alloc, seed)
                overall[variant].append(sum(val.values()) / len(val))
        med = {v: statistics.median(x) for v, x in overall.items()}
        assert med["pl_moe"] <= med["pl_moe_no_shared"], med
        assert med["pl_moe_no_shared"] <= med["switch_moe"], med
        assert med["switch_moe"] <= med["dense"], med
        assert med["pl_moe"] < med["dense"], med


# ---------------------------------------------------------------------------
# criterion: determinism under interrupt and resume


class TestDeterminism:
    def test_resume_at_step_100_of_200_is_bit_identical(self, tmp_path):
        gcfg = GrammarConfig(docs_per_pl=40, seed=2)
        pcfg = PipelineConfig(languages=gcfg.languages, vocab_size=120, max_seq=48)
        docs, vocab, _ = build_corpus(generate(gcfg), pcfg)

        def fresh():
            cfg = ModelConfig(
                vocab_size=len(vocab),
                l_total=2,
                l_moe=1,
                hidden=32,
                max_seq=48,
                heads=4,
                experts_per_layer=8,
                shared_experts=1,
                top_k=2,
                variant="pl_moe",
                dropout=0.1,
            )
            return Model(cfg, alloc=_toy_alloc(), seed=11)

        tcfg = TrainConfig(
            steps=200, warmup_steps=20, peak_lr=1e-3, batch_size=4, seed=12, eval_interval=500
        )
        full = pretrain(docs, fresh(), tcfg, out_dir=tmp_path / "full")

        train_loop(fresh(), docs, tcfg, out_dir=tmp_path / "half", stop_after=100)
        resumed = train_loop(
            load_checkpoint(tmp_path / "half" / "final"),
            docs,
            tcfg,
            out_dir=tmp_path / "resumed",
            resume_from=tmp_path / "half" / "final",
        )
        for name, p in full.model.params.items():
            assert np.array_equal(p.data, resumed.model.params[name].data), name
