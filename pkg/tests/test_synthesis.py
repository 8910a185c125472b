import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metricforge.data import Dataset, Segment, dumps_quadruples
from metricforge.errors import ConfigError, DegenerateInputError
from metricforge.synthesis import (FunctionOracle, LexicalOracle, NoiseConfig, build_pretrain_corpus,
                                   corrupt_corpus, lexical_oracle, selected_indices, word_drop)

words = st.text(alphabet="abcdefg", min_size=1, max_size=4)
sentences = st.lists(words, min_size=1, max_size=20).map(" ".join)


def is_subsequence(short, long):
    it = iter(long)
    return all(tok in it for tok in short)


def _corpus(n=50, seed=0):
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(30)]
    segs = []
    for i in range(n):
        ref = " ".join(rng.choice(vocab, size=rng.integers(3, 12)))
        segs.append(Segment(f"s{i}", hyp=ref, ref=ref, src=f"src {i}", dataset_tag="syn"))
    return Dataset("c", tuple(segs))


class TestWordDrop:
    @settings(max_examples=200, deadline=None)
    @given(sentences, st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_ordered_subsequence_nonempty(self, sentence, ratio, seed):
        out = word_drop(sentence, ratio, seed).split()
        toks = sentence.split()
        assert 1 <= len(out) <= len(toks)
        assert is_subsequence(out, toks)

    def test_count_rounds_half_up(self):
        sent = " ".join(f"t{i}" for i in range(10))
        assert len(word_drop(sent, 0.25, 1).split()) == 7  # round(2.5) -> 3 dropped
        assert len(word_drop(sent, 0.24, 1).split()) == 8

    def test_keeps_one_token(self):
        assert len(word_drop("a b c", 1.0, 0).split()) == 1
        assert word_drop("solo", 1.0, 0) == "solo"

    def test_ratio_zero_identity(self):
        assert word_drop("x  y z", 0.0, 5) == "x  y z"

    def test_small_positive_ratio_still_drops(self):
        assert len(word_drop("a b c", 0.1, 0).split()) == 2


class TestCorruptCorpus:
    def test_exact_selection_count(self):
        ds = _corpus(100)
        cfg = NoiseConfig(selection_fraction=0.3, seed=4)
        out = corrupt_corpus(ds, cfg)
        changed = {i for i, (a, b) in enumerate(zip(ds, out)) if a.hyp != b.hyp}
        assert changed == set(selected_indices(100, cfg).tolist())
        assert len(changed) == 30

    def test_floor_count(self):
        assert len(selected_indices(7, NoiseConfig(selection_fraction=0.3))) == 2

    def test_ratio_zero_identity(self):
        ds = _corpus(40)
        assert corrupt_corpus(ds, NoiseConfig(0.5, 0.0, 0.0, seed=2)) == ds

    def test_only_hyp_changes(self):
        ds = _corpus(40)
        out = corrupt_corpus(ds, NoiseConfig(seed=9))
        for a, b in zip(ds, out):
            assert (a.id, a.ref, a.src) == (b.id, b.ref, b.src)

    def test_per_index_seeding_independent_of_rest(self):
        # the same segment at the same index corrupts identically regardless of others
        ds = _corpus(30)
        cfg = NoiseConfig(selection_fraction=1.0, seed=3)
        other = ds.with_segments([ds[0]] + [Segment(s.id, "q r s t u v", "q", dataset_tag="x") for s in ds[1:]])
        assert corrupt_corpus(ds, cfg)[0].hyp == corrupt_corpus(other, cfg)[0].hyp

    @pytest.mark.parametrize("kwargs", [dict(selection_fraction=1.5), dict(drop_ratio_min=0.6),
                                        dict(drop_ratio_max=1.2), dict(seed=-1)])
    def test_config_invariants(self, kwargs):
        with pytest.raises(ConfigError):
            NoiseConfig(**kwargs)


class TestOracle:
    def test_identity_is_one(self):
        assert lexical_oracle(None, "a b c", "a b c") == 1.0

    def test_textbook_f1(self):
        # overlap 2, precision 2/3, recall 2/4 -> F1 = 4/7
        assert lexical_oracle("ignored", "a b x", "a b c d") == pytest.approx(4 / 7, abs=1e-15)

    def test_multiset_overlap(self):
        assert lexical_oracle(None, "a a a", "a") == pytest.approx(2 * (1 / 3) * 1 / (1 / 3 + 1))

    def test_disjoint(self):
        assert lexical_oracle(None, "x", "y") == 0.0

    @settings(max_examples=100, deadline=None)
    @given(sentences, st.floats(0, 1), st.integers(0, 1000))
    def test_drop_never_raises_perfect_match(self, sentence, ratio, seed):
        dropped = word_drop(sentence, ratio, seed)
        assert lexical_oracle(None, dropped, sentence) <= lexical_oracle(None, sentence, sentence)


class TestBuildCorpus:
    def test_normalized_and_aligned(self):
        ds = _corpus(60)
        quads = build_pretrain_corpus(ds, NoiseConfig(seed=1))
        z = np.array([q.pseudo_score for q in quads])
        assert abs(z.mean()) <= 1e-9 and abs(z.std() - 1) <= 1e-9
        assert len(quads) == len(ds)
        assert all(q.ref == s.ref for q, s in zip(quads, ds))
        assert all(q.src == s.src for q, s in zip(quads, ds))

    def test_raw_scores_recomputed(self):
        ds = _corpus(60)
        cfg = NoiseConfig(seed=1)
        quads = build_pretrain_corpus(ds, cfg)
        noisy = corrupt_corpus(ds, cfg)
        raw = np.array([lexical_oracle(None, s.hyp, s.ref) for s in noisy])
        assert np.allclose([q.pseudo_score for q in quads], (raw - raw.mean()) / raw.std(), atol=1e-12)
        # uncorrupted items (hyp = ref) are at the raw maximum
        assert all(r == 1.0 for r, a, b in zip(raw, ds, noisy) if a.hyp == b.hyp)

    def test_strip_src(self):
        quads = build_pretrain_corpus(_corpus(20), NoiseConfig(seed=1), include_src=False)
        assert all(q.src is None for q in quads)
        assert all("src" not in json.loads(line) for line in dumps_quadruples(quads).splitlines())

    def test_deterministic_bytes(self):
        ds, cfg = _corpus(80), NoiseConfig(seed=11)
        assert dumps_quadruples(build_pretrain_corpus(ds, cfg)) == dumps_quadruples(build_pretrain_corpus(ds, cfg))

    def test_custom_oracle(self):
        oracle = FunctionOracle(lambda src, hyp, ref: float(len(hyp.split())), "length")
        quads = build_pretrain_corpus(_corpus(30), NoiseConfig(seed=2), oracle=oracle)
        assert len(quads) == 30

    def test_constant_oracle_rejected(self):
        with pytest.raises(DegenerateInputError, match="const"):
            build_pretrain_corpus(_corpus(10), NoiseConfig(seed=2), oracle=FunctionOracle(lambda *a: 1.0, "const"))

    def test_default_oracle_identifier(self):
        assert LexicalOracle().identifier == "lexical-f1"
