import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import protogap.metrics as metrics
from helpers import build_config, build_model, random_prompts, random_tensors
from protogap.container import TokenCorpus
from protogap.errors import DimensionError, DomainError, InterventionError, NonFiniteError
from protogap.metrics import (
    ClassifierThresholds,
    DistanceMatrix,
    GapReport,
    PairDistanceRecord,
    PromptSet,
    RegimeConfig,
    classify_pair,
    head_swap_distance,
    interchange_distance,
    kl_divergence,
    pair_list,
    prompts_from_corpus,
    protocol_gap_report,
    replacement_distance,
    rope_counterfactual,
    sweep_distances,
    symmetrize,
)
from protogap.model import Model, Replace


@pytest.fixture(scope="module")
def model():
    return build_model(seed=30)


@pytest.fixture(scope="module")
def prompts(model):
    return PromptSet(random_prompts(model.config.vocab_size, 6, seed=1), provenance="unit")


class TestKL:
    def test_hand_case(self):
        # 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75)
        expect = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(expect, abs=1e-12)
        assert kl_divergence([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.1438410, abs=1e-7)

    def test_self_is_zero(self):
        p = np.array([0.1, 0.2, 0.7])
        assert kl_divergence(p, p) == 0.0

    def test_zero_in_q_is_clamped(self):
        val = kl_divergence([1.0, 0.0], [0.0, 1.0])
        assert val == pytest.approx(math.log(1e12), rel=1e-9)

    def test_zero_in_p_contributes_nothing(self):
        assert kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2.0))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            kl_divergence([0.5, 0.5], [1.0])

    def test_not_a_distribution(self):
        with pytest.raises(DomainError, match="sums"):
            kl_divergence([0.5, 0.4], [0.5, 0.5])
        with pytest.raises(DomainError, match="negative"):
            kl_divergence([1.5, -0.5], [0.5, 0.5])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_gibbs_inequality(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(8))
        q = rng.dirichlet(np.ones(8))
        assert kl_divergence(p, q) >= 0.0


class TestSymmetrize:
    def test_hand_case(self):
        assert symmetrize(0.2, 0.4, "max") == pytest.approx(0.4)
        assert symmetrize(0.2, 0.4, "mean") == pytest.approx(0.3)
        assert symmetrize(0.2, 0.4, "geometric") == pytest.approx(0.2828427, abs=1e-7)
        assert symmetrize(0.2, 0.4, "min") == pytest.approx(0.2)

    def test_equal_inputs_fixed_point(self):
        for kind in ("max", "mean", "geometric", "min"):
            assert symmetrize(0.37, 0.37, kind) == pytest.approx(0.37)

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            symmetrize(-0.1, 0.2, "max")

    def test_unknown_kind(self):
        with pytest.raises(DomainError):
            symmetrize(0.1, 0.2, "harmonic")

    @given(st.floats(0, 100), st.floats(0, 100))
    @settings(max_examples=200, deadline=None)
    def test_ordering(self, a, b):
        vals = [symmetrize(a, b, k) for k in ("max", "mean", "geometric", "min")]
        assert vals[0] >= vals[1] >= vals[2] >= vals[3]


class TestClassify:
    @pytest.mark.parametrize(
        "d,expect",
        [(0.036, "strong"), (0.07, "conditional"), (0.171, "non"),
         (0.05, "conditional"), (0.10, "non"), (0.0, "strong")],
    )
    def test_default_thresholds(self, d, expect):
        assert classify_pair(d) == expect

    def test_custom_thresholds(self):
        t = ClassifierThresholds(strong=0.2, conditional=0.5)
        assert classify_pair(0.3, t) == "conditional"

    def test_invalid_thresholds(self):
        with pytest.raises(DomainError):
            ClassifierThresholds(strong=0.1, conditional=0.1)
        with pytest.raises(DomainError):
            ClassifierThresholds(strong=-0.1, conditional=0.1)

    def test_negative_distance(self):
        with pytest.raises(DomainError):
            classify_pair(-0.01)


class TestPairList:
    def test_counts(self):
        assert len(pair_list(24, "all")) == 276
        assert len(pair_list(24, "adjacent")) == 23
        assert len(pair_list(24, "gap:3")) == 66
        assert len(pair_list(36, "gap:3")) == 102

    def test_contents(self):
        assert pair_list(4, "adjacent") == [(0, 1), (1, 2), (2, 3)]
        assert pair_list(4, "gap:2") == [(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]
        assert all(i < j for i, j in pair_list(10, "all"))

    def test_gap_one_equals_adjacent(self):
        assert pair_list(7, "gap:1") == pair_list(7, "adjacent")

    def test_errors(self):
        with pytest.raises(DomainError):
            pair_list(1, "all")
        with pytest.raises(DomainError):
            pair_list(8, "gap:0")
        with pytest.raises(DomainError):
            pair_list(8, "gap:x")
        with pytest.raises(DomainError):
            pair_list(8, "everything")


class TestPromptSet:
    def test_validation(self):
        with pytest.raises(DomainError):
            PromptSet([])
        with pytest.raises(DomainError):
            PromptSet([np.array([3])])

    def test_nominal_length_median(self):
        ps = PromptSet([np.zeros(4, int), np.zeros(8, int), np.zeros(9, int)])
        assert ps.nominal_length == 8

    def test_from_corpus(self):
        corpus = TokenCorpus(
            ids=np.arange(20, dtype=np.int64), corpus_id="c1", vocab_size=32, source="x"
        )
        ps = prompts_from_corpus(corpus, n_prompts=3, length=5)
        assert len(ps) == 3
        np.testing.assert_array_equal(ps.prompts[1], np.arange(5, 10))
        assert ps.provenance == "c1:w5x3@0"

    def test_from_corpus_insufficient(self):
        corpus = TokenCorpus(ids=np.arange(9, dtype=np.int64), corpus_id="c", vocab_size=16,
                             source="x")
        with pytest.raises(DomainError, match="need"):
            prompts_from_corpus(corpus, n_prompts=2, length=5)


class TestReplacementDistance:
    def test_self_pair_is_zero(self, model, prompts):
        rec = replacement_distance(model, 2, 2, prompts)
        assert rec.d_max <= 1e-6

    def test_identical_layers_zero(self, prompts):
        twin = build_model(seed=31, identical_layers=True)
        ps = PromptSet(random_prompts(twin.config.vocab_size, 4, seed=2))
        rec = replacement_distance(twin, 0, 1, ps)
        assert rec.d_max <= 1e-6

    def test_canonical_pair_order(self, model, prompts):
        a = replacement_distance(model, 0, 2, prompts)
        b = replacement_distance(model, 2, 0, prompts)
        assert (a.i, a.j) == (b.i, b.j) == (0, 2)
        assert a.kl_ij == pytest.approx(b.kl_ij, rel=1e-12)
        assert a.kl_ji == pytest.approx(b.kl_ji, rel=1e-12)

    def test_directions_differ_generically(self, model, prompts):
        rec = replacement_distance(model, 0, 3, prompts)
        assert rec.kl_ij != pytest.approx(rec.kl_ji, rel=1e-3)

    def test_aggregates_consistent(self, model, prompts):
        rec = replacement_distance(model, 1, 3, prompts)
        assert rec.d_max == pytest.approx(max(rec.kl_ij, rec.kl_ji))
        assert rec.d_mean == pytest.approx((rec.kl_ij + rec.kl_ji) / 2)
        assert rec.d_max >= rec.d_mean >= rec.d_geo >= rec.d_min
        assert rec.gap == 2

    def test_per_prompt_matches_singletons(self, model, prompts):
        rec = replacement_distance(model, 0, 2, prompts)
        for k in range(len(prompts)):
            single = PromptSet([prompts.prompts[k]])
            rk = replacement_distance(model, 0, 2, single)
            assert rec.per_prompt["kl_ij"][k] == pytest.approx(rk.kl_ij, rel=1e-6)

    def test_bootstrap_ci(self, model, prompts):
        boot = dict(n_resamples=200, seed=7)
        a = replacement_distance(model, 0, 2, prompts, bootstrap=boot)
        b = replacement_distance(model, 0, 2, prompts, bootstrap=boot)
        assert a.ci == b.ci
        lo, hi = a.ci
        assert lo <= hi
        assert lo <= a.d_max * 1.5 and hi >= a.d_max * 0.5


class TestInterchangeDistance:
    def test_symmetric_arguments(self, model, prompts):
        a = interchange_distance(model, 1, 3, prompts)
        b = interchange_distance(model, 3, 1, prompts)
        assert (a.i, a.j) == (b.i, b.j) == (1, 3)
        assert a.d_max == b.d_max

    def test_identical_layers_zero(self):
        twin = build_model(seed=32, identical_layers=True)
        ps = PromptSet(random_prompts(twin.config.vocab_size, 4, seed=3))
        rec = interchange_distance(twin, 0, 1, ps)
        assert rec.d_max <= 1e-6

    def test_record_is_flat(self, model, prompts):
        rec = interchange_distance(model, 0, 3, prompts)
        assert rec.kl_ij == rec.kl_ji == rec.d_max == rec.d_mean == rec.d_geo == rec.d_min


class TestHeadSwap:
    def test_self_splice_is_zero(self, model, prompts):
        assert head_swap_distance(model, 1, 1, 2, prompts) <= 1e-6

    def test_identical_layers_zero(self, prompts):
        twin = build_model(seed=33, identical_layers=True)
        ps = PromptSet(random_prompts(twin.config.vocab_size, 3, seed=4))
        assert head_swap_distance(twin, 0, 1, 0, ps) <= 1e-6

    def test_nonzero_generically(self, model, prompts):
        assert head_swap_distance(model, 0, 3, 1, prompts) > 0

    def test_head_out_of_range(self, model, prompts):
        with pytest.raises(InterventionError):
            head_swap_distance(model, 0, 1, model.config.n_heads, prompts)


class TestSweep:
    def test_record_counts(self, model, prompts):
        m = sweep_distances(model, "all", "replacement", prompts)
        assert len(m.records) == 6  # C(4,2)
        assert [(r.i, r.j) for r in m.records] == pair_list(4, "all")

    def test_matches_single_pair_calls(self, model, prompts):
        m = sweep_distances(model, "adjacent", "replacement", prompts)
        solo = replacement_distance(model, 1, 2, prompts)
        rec = m.record_for(1, 2)
        assert rec.d_max == pytest.approx(solo.d_max, rel=1e-12)

    def test_threaded_merge_is_deterministic(self, model, prompts):
        a = sweep_distances(model, "all", "interchange", prompts, threads=4)
        b = sweep_distances(model, "all", "interchange", prompts, threads=1)
        assert [r.d_max for r in a.records] == [r.d_max for r in b.records]

    def test_counts_are_cumulative(self, model, prompts):
        m = sweep_distances(model, "all", "replacement", prompts)
        dists = [r.d_max for r in m.records]
        big = ClassifierThresholds(strong=max(dists) * 2, conditional=max(dists) * 4)
        m2 = sweep_distances(model, "all", "replacement", prompts, thresholds=big)
        assert m2.strong_count == m2.conditional_count == len(m2.records)
        mid = ClassifierThresholds(strong=float(np.median(dists)), conditional=max(dists) * 4)
        m3 = sweep_distances(model, "all", "replacement", prompts, thresholds=mid)
        assert m3.conditional_count == len(m3.records)
        assert 0 < m3.strong_count < m3.conditional_count

    def test_symmetrization_ordering_every_record(self, model, prompts):
        m = sweep_distances(model, "all", "replacement", prompts)
        for r in m.records:
            assert r.d_max >= r.d_mean >= r.d_geo >= r.d_min

    def test_positions_all_mode(self, model, prompts):
        last = sweep_distances(model, "adjacent", "replacement", prompts)
        allpos = sweep_distances(model, "adjacent", "replacement", prompts, positions="all")
        assert [r.d_max for r in last.records] != [r.d_max for r in allpos.records]

    def test_bad_protocol(self, model, prompts):
        with pytest.raises(DomainError):
            sweep_distances(model, "all", "deletion", prompts)

    def test_json_schema(self, model, prompts):
        m = sweep_distances(model, "adjacent", "replacement", prompts)
        d = m.to_json_dict()
        assert set(d) == {
            "model_id", "protocol", "pair_filter", "prompt_provenance",
            "records", "strong_count", "conditional_count",
        }
        assert d["model_id"] == "tiny-test"
        for rec in d["records"]:
            assert set(rec) == {
                "i", "j", "gap", "kl_ij", "kl_ji",
                "d_max", "d_mean", "d_geo", "d_min", "class", "ci",
            }

    def test_nonfinite_forward_flags_pair(self, model, prompts, monkeypatch):
        real = metrics._SweepEngine.kl_against_baseline

        def fake(self, ivs):
            if any(isinstance(iv, Replace) and (iv.target, iv.source) == (0, 1) for iv in ivs):
                raise NonFiniteError("synthetic overflow")
            return real(self, ivs)

        monkeypatch.setattr(metrics._SweepEngine, "kl_against_baseline", fake)
        m = sweep_distances(model, "adjacent", "replacement", prompts)
        rec = m.record_for(0, 1)
        assert rec.flagged and rec.classification is None and rec.d_max is None
        assert m.flagged_pairs == [(0, 1)]
        clean = [r for r in m.records if not r.flagged]
        assert len(clean) == len(m.records) - 1
        assert m.conditional_count <= len(clean)

    def test_nonfinite_kl_value_flags_pair(self, model, prompts, monkeypatch):
        real = metrics._SweepEngine.kl_against_baseline

        def fake(self, ivs):
            out = real(self, ivs)
            if any(isinstance(iv, Replace) and (iv.target, iv.source) == (2, 3) for iv in ivs):
                out = out.copy()
                out[0] = np.nan
            return out

        monkeypatch.setattr(metrics._SweepEngine, "kl_against_baseline", fake)
        m = sweep_distances(model, "adjacent", "replacement", prompts)
        assert m.record_for(2, 3).flagged
        assert m.record_for(2, 3).flag_reason == "non-finite per-prompt KL"


from helpers import synthetic_matrix as _matrix  # noqa: E402


class TestGapReport:
    PAIRS = [(0, 1), (1, 2), (2, 3)]

    def test_identical_nonzero_matrices_tied(self):
        ds = [(p, 0.3) for p in self.PAIRS]
        rep = protocol_gap_report(_matrix("replacement", ds), _matrix("interchange", ds))
        assert rep.verdict == "tied"
        assert all(row["gap"] == 0 and row["ratio"] == 1.0 for row in rep.pairs)

    def test_identical_zero_matrices_tied_degenerate(self):
        ds = [(p, 0.0) for p in self.PAIRS]
        rep = protocol_gap_report(_matrix("replacement", ds), _matrix("interchange", ds))
        assert rep.verdict == "tied"
        assert all(row["ratio"] is None for row in rep.pairs)

    def test_divergent(self):
        rep = protocol_gap_report(
            _matrix("replacement", [(p, 0.5) for p in self.PAIRS]),
            _matrix("interchange", [(p, 0.1) for p in self.PAIRS]),
        )
        assert rep.verdict == "divergent"
        assert rep.pooled["ir_ratio_median"] == pytest.approx(0.2)

    def test_divergent_needs_substantial_repl(self):
        # I/R below cutoff but everything is strongly swappable anyway
        rep = protocol_gap_report(
            _matrix("replacement", [(p, 0.02) for p in self.PAIRS]),
            _matrix("interchange", [(p, 0.004) for p in self.PAIRS]),
        )
        assert rep.verdict != "divergent"

    def test_weak_signal(self):
        rep = protocol_gap_report(
            _matrix("replacement", [(p, 1.0) for p in self.PAIRS]),
            _matrix("interchange", [(p, 0.6) for p in self.PAIRS]),
        )
        assert rep.verdict == "weak-signal"

    def test_indeterminate(self):
        rep = protocol_gap_report(
            _matrix("replacement", [(p, 0.04) for p in self.PAIRS]),
            _matrix("interchange", [(p, 0.024) for p in self.PAIRS]),
        )
        assert rep.verdict == "indeterminate"

    def test_pooled_stats(self):
        gaps = {(0, 1): (0.5, 0.1), (1, 2): (0.4, 0.2), (2, 3): (0.9, 0.3)}
        rep = protocol_gap_report(
            _matrix("replacement", [(p, v[0]) for p, v in gaps.items()]),
            _matrix("interchange", [(p, v[1]) for p, v in gaps.items()]),
        )
        assert rep.pooled["gap_mean"] == pytest.approx((0.4 + 0.2 + 0.6) / 3)
        assert rep.pooled["gap_median"] == pytest.approx(0.4)
        assert rep.pooled["gap_max"] == pytest.approx(0.6)

    def test_pair_set_mismatch(self):
        with pytest.raises(DomainError, match="pair sets differ"):
            protocol_gap_report(
                _matrix("replacement", [((0, 1), 0.1)]),
                _matrix("interchange", [((0, 1), 0.1), ((1, 2), 0.1)]),
            )

    def test_regime_config_logged(self):
        ds = [(p, 0.3) for p in self.PAIRS]
        rep = protocol_gap_report(
            _matrix("replacement", ds), _matrix("interchange", ds),
            regime=RegimeConfig(divergent_cutoff=0.4, tied_lo=0.9, tied_hi=1.1),
        )
        d = rep.to_json_dict()
        assert d["regime"]["divergent_cutoff"] == 0.4
        assert d["regime"]["tied_band"] == [0.9, 1.1]

    def test_invalid_regime(self):
        with pytest.raises(DomainError):
            RegimeConfig(divergent_cutoff=0.9, tied_lo=0.8)


class TestRopeCounterfactual:
    def test_requires_rotary(self, prompts):
        absolute = build_model(seed=34, pe_type="absolute")
        with pytest.raises(DomainError, match="undefined"):
            rope_counterfactual(absolute, [(0, 1)], prompts)

    def test_vector_lengths(self, model, prompts):
        pairs = [(0, 1), (1, 2), (0, 3)]
        rep = rope_counterfactual(model, pairs, prompts)
        assert len(rep.ratio_deltas) == len(pairs)
        assert len(rep.gap_deltas) == len(pairs)
        assert rep.pairs == pairs

    def test_content_blind_attention_unaffected(self, prompts):
        # zero query projections: attention weights are uniform no matter
        # how keys rotate, so the counterfactual is an exact no-op
        cfg = build_config()
        tensors = random_tensors(cfg, seed=35)
        for i in range(cfg.n_layers):
            tensors[f"layers.{i}.Wq"] = np.zeros_like(tensors[f"layers.{i}.Wq"])
        blind = Model(cfg, tensors)
        ps = PromptSet(random_prompts(cfg.vocab_size, 3, seed=5))
        rep = rope_counterfactual(blind, [(0, 1), (2, 3)], ps)
        assert rep.baseline_divergence <= 1e-12
        assert all(abs(g) <= 1e-9 for g in rep.gap_deltas)

    def test_conditions_use_own_baselines(self, model, prompts):
        rep = rope_counterfactual(model, [(0, 1)], prompts)
        # both conditions yield proper gap reports over the same pair
        assert rep.normal.pairs[0]["i"] == rep.disabled.pairs[0]["i"] == 0
        assert rep.baseline_divergence > 0
