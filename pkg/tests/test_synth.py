import io

import pytest

from irvuln.corpus import prepare_corpus, save_corpus
from irvuln.errors import DataError
from irvuln.synth import (SINK_OP, SOURCE_OP, SynthConfig, generate_corpus,
                          rule_based_labels)
from irvuln.vocab import tokenize


def corpus_bytes(corpus):
    import json
    return "".join(
        json.dumps({"id": p.id, "lines": p.lines, "label": p.label,
                    "vulnerable_lines": list(p.vulnerable_lines)}) + "\n"
        for p in corpus).encode()


class TestGenerate:
    def test_counts_are_exact(self):
        corpus = generate_corpus(SynthConfig(program_count=200, seed=42))
        assert len(corpus) == 200
        assert sum(p.label for p in corpus) == 60

    def test_default_count_rounding(self):
        corpus = generate_corpus(SynthConfig(program_count=50,
                                             vulnerable_fraction=0.25, seed=0))
        assert sum(p.label for p in corpus) == round(50 * 0.25)

    def test_byte_identical_across_runs(self):
        a = generate_corpus(SynthConfig(program_count=80, seed=42))
        b = generate_corpus(SynthConfig(program_count=80, seed=42))
        assert corpus_bytes(a) == corpus_bytes(b)

    def test_different_seeds_differ(self):
        a = generate_corpus(SynthConfig(program_count=20, seed=1))
        b = generate_corpus(SynthConfig(program_count=20, seed=2))
        assert corpus_bytes(a) != corpus_bytes(b)

    def test_infeasible_motif_span(self):
        with pytest.raises(DataError, match="motif_span"):
            SynthConfig(lines_min=4, motif_span=5)

    def test_line_counts_within_range(self):
        config = SynthConfig(program_count=60, lines_min=8, lines_max=20,
                             seed=3)
        for p in generate_corpus(config):
            assert 8 <= len(p.lines) <= 20


@pytest.fixture(scope="module")
def motif_corpus():
    return generate_corpus(SynthConfig(program_count=300, seed=42))


class TestPlantedMotifs:
    @pytest.fixture
    def corpus(self, motif_corpus):
        return motif_corpus

    def test_rule_oracle_reproduces_labels_exactly(self, corpus):
        for p in corpus:
            label, vuln = rule_based_labels(p)
            assert label == p.label, p.id
            assert tuple(vuln) == p.vulnerable_lines, p.id

    def test_sink_token_on_every_flagged_line(self, corpus):
        for p in corpus:
            for t in p.vulnerable_lines:
                assert SINK_OP in tokenize(p.lines[t])

    def test_no_clean_program_has_linked_source_sink(self, corpus):
        for p in corpus:
            if p.label == 0:
                assert rule_based_labels(p)[0] == 0

    def test_source_precedes_first_sink(self, corpus):
        for p in corpus:
            if p.label == 1 and len(p.vulnerable_lines) > 1:
                src_lines = [t for t, line in enumerate(p.lines)
                             if SOURCE_OP in tokenize(line)]
                assert min(src_lines) < min(p.vulnerable_lines)


class TestPrepareInteraction:
    def test_passes_prepare_unchanged(self):
        corpus = generate_corpus(SynthConfig(program_count=50, seed=7))
        prepared = prepare_corpus(corpus)
        assert [p.lines for p in prepared] == [p.lines for p in corpus]
        assert [p.vulnerable_lines for p in prepared] == \
            [p.vulnerable_lines for p in corpus]

    def test_user_function_injection_is_stripped_by_prepare(self):
        config = SynthConfig(program_count=60, seed=7,
                             with_user_functions=True)
        injected = generate_corpus(config)
        assert any("call" in tokenize(line)
                   for p in injected for line in p.lines)
        prepared = prepare_corpus(injected)
        assert not any("call" in tokenize(line)
                       for p in prepared for line in p.lines)
        # labels stay consistent with the scan oracle after the remap
        for p in prepared:
            label, vuln = rule_based_labels(p)
            assert label == p.label
            assert tuple(vuln) == p.vulnerable_lines
