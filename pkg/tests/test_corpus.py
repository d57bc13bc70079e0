import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irvuln.corpus import (Corpus, Program, filter_by_length, load_corpus,
                           prepare_corpus, save_corpus, strip_user_functions)
from irvuln.errors import DataError


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def record(pid="p0", lines=("a b", "c"), label=0, vuln=()):
    return {"id": pid, "lines": list(lines), "label": label,
            "vulnerable_lines": list(vuln)}


class TestLoadCorpus:
    def test_two_valid_records_in_order(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [record("a"), record("b", label=1, vuln=[0])])
        corpus = load_corpus(path)
        assert [p.id for p in corpus] == ["a", "b"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_corpus(tmp_path / "nope.jsonl")

    def test_label_zero_with_vulnerable_lines(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [record(label=0, vuln=[1])])
        with pytest.raises(DataError, match="inconsistent labels"):
            load_corpus(path)

    def test_vulnerable_index_out_of_range(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [record(lines=["x"] * 10, label=1, vuln=[12])])
        with pytest.raises(DataError, match="out of range"):
            load_corpus(path)

    def test_malformed_record_reports_line_number(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps(record()) + "\n{broken\n", encoding="utf-8")
        with pytest.raises(DataError, match=":2:"):
            load_corpus(path)

    def test_duplicate_id(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_jsonl(path, [record("a"), record("a")])
        with pytest.raises(DataError, match="duplicate"):
            load_corpus(path)

    def test_unknown_field_rejected(self, tmp_path):
        path = tmp_path / "d.jsonl"
        rec = record()
        rec["extra"] = 1
        write_jsonl(path, [rec])
        with pytest.raises(DataError, match="unknown fields"):
            load_corpus(path)

    def test_roundtrip(self, tmp_path):
        path = tmp_path / "d.jsonl"
        recs = [record("a"), record("b", label=1, vuln=[1])]
        write_jsonl(path, recs)
        out = tmp_path / "o.jsonl"
        save_corpus(load_corpus(path), out)
        assert load_corpus(out).programs == load_corpus(path).programs


class TestStripUserFunctions:
    def test_call_then_define_removed(self):
        lines = ["%3 = call void @f()", "define void @f() {", "ret void", "}"]
        assert strip_user_functions(lines) == ["ret void", "}"]

    def test_call_without_define_kept(self):
        lines = ["%3 = call i32 @g()", "%4 = add i32 %3, 1"]
        assert strip_user_functions(lines) == lines

    def test_empty(self):
        assert strip_user_functions([]) == []

    def test_substring_does_not_fire(self):
        lines = ["recalled something", "define void @f() {"]
        assert strip_user_functions(lines) == lines

    @given(st.lists(st.sampled_from(
        ["%1 = call @f()", "define @f() {", "ret", "br x", "call"]),
        max_size=12))
    def test_survivors_are_a_subsequence(self, lines):
        out = strip_user_functions(lines)
        it = iter(lines)
        assert all(any(line == cand for cand in it) for line in out)


class TestFilterByLength:
    def test_264_kept(self):
        p = Program("p", ["x"] * 264, 0, ())
        assert filter_by_length(p) is p

    def test_265_excluded(self):
        p = Program("p", ["x"] * 265, 0, ())
        assert filter_by_length(p) is None

    def test_single_line_kept(self):
        p = Program("p", ["x"], 0, ())
        assert filter_by_length(p) is p


class TestPrepareCorpus:
    def test_length_filter_composition(self):
        programs = [Program(f"p{n}", ["x"] * n, 0, ())
                    for n in (10, 264, 300)]
        prepared = prepare_corpus(Corpus(programs))
        assert [len(p.lines) for p in prepared] == [10, 264]

    def test_vulnerable_index_remap(self):
        # call+define pair sits before the vulnerable line at index 5
        lines = ["a", "x call y", "define f", "b", "c", "BAD", "d"]
        p = Program("p", lines, 1, (5,))
        prepared = prepare_corpus(Corpus([p]))
        out = prepared.programs[0]
        assert out.lines == ["a", "b", "c", "BAD", "d"]
        assert out.vulnerable_lines == (3,)

    def test_all_programs_too_long(self):
        programs = [Program("p", ["x"] * 265, 0, ())]
        with pytest.raises(DataError, match="empty corpus"):
            prepare_corpus(Corpus(programs))

    def test_program_dropped_when_all_vulnerable_lines_stripped(self):
        p = Program("p", ["x call y", "define f", "keep"], 1, (0,))
        with pytest.raises(DataError, match="empty corpus"):
            prepare_corpus(Corpus([p]))

    @given(st.lists(
        st.lists(st.sampled_from(
            ["%1 = call @f()", "define @f() {", "ret", "br x", "call"]),
            min_size=1, max_size=10),
        min_size=1, max_size=6))
    @settings(max_examples=60)
    def test_idempotent_and_invariants(self, programs_lines):
        programs = [Program(f"p{k}", lines, 0, ())
                    for k, lines in enumerate(programs_lines)]
        try:
            once = prepare_corpus(Corpus(programs))
        except DataError:
            return
        twice = prepare_corpus(once)
        assert [p.lines for p in twice] == [p.lines for p in once]
        for p in once:
            p.validate()
