"""Confusion counts, detection metrics and the repeated-run experiment."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .corpus import Corpus, prepare_corpus
from .detector import ModelConfig, predict, train_stage1, train_stage2
from .errors import DataError
from .vocab import build_vocabulary


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class MetricsReport:
    """Rates in [0,1]; any 0/0 ratio is reported as 0 and named in
    `undefined`."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    fnr: float
    undefined: frozenset = frozenset()


def confusion(predicted, actual) -> ConfusionCounts:
    """Standard counts with the vulnerable class as positive."""
    predicted = list(predicted)
    actual = list(actual)
    if len(predicted) != len(actual):
        raise DataError("confusion: length mismatch")
    counts = ConfusionCounts()
    for p, a in zip(predicted, actual):
        if a and p:
            counts.tp += 1
        elif a and not p:
            counts.fn += 1
        elif not a and p:
            counts.fp += 1
        else:
            counts.tn += 1
    return counts


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.add(name)
        return 0.0
    return num / den


def metrics(counts: ConfusionCounts) -> MetricsReport:
    undefined = set()
    acc = _ratio(counts.tp + counts.tn, counts.total, "accuracy", undefined)
    precision = _ratio(counts.tp, counts.tp + counts.fp, "precision", undefined)
    recall = _ratio(counts.tp, counts.tp + counts.fn, "recall", undefined)
    f1 = _ratio(2 * counts.tp, 2 * counts.tp + counts.fp + counts.fn,
                "f1", undefined)
    fpr = _ratio(counts.fp, counts.fp + counts.tn, "fpr", undefined)
    fnr = _ratio(counts.fn, counts.fn + counts.tp, "fnr", undefined)
    return MetricsReport(acc, precision, recall, f1, fpr, fnr,
                         frozenset(undefined))


def split_corpus(corpus: Corpus, test_fraction: float,
                 rng: np.random.Generator):
    """Stratified by-program split; returns (train Corpus, test Corpus)."""
    by_label = {0: [], 1: []}
    for p in corpus:
        by_label[p.label].append(p)
    train, test = [], []
    for label in (0, 1):
        group = by_label[label]
        n_test = int(round(len(group) * test_fraction))
        if len(group) and (n_test == 0 or n_test == len(group)):
            raise DataError("corpus too small to stratify")
        order = rng.permutation(len(group))
        test.extend(group[i] for i in order[:n_test])
        train.extend(group[i] for i in order[n_test:])
    if not train or not test:
        raise DataError("corpus too small to stratify")
    train.sort(key=lambda p: p.id)
    test.sort(key=lambda p: p.id)
    return (Corpus(train, provenance=corpus.provenance + "|train"),
            Corpus(test, provenance=corpus.provenance + "|test"))


@dataclass
class RunResult:
    run_id: int
    code: MetricsReport
    line: MetricsReport


def evaluate_models(stage1, stage2, vocab, test: Corpus):
    """Whole-code metrics over all test programs; line metrics over all lines
    of ground-truth-vulnerable test programs, after hierarchical gating."""
    code_pred, code_true = [], []
    line_pred, line_true = [], []
    for program in test:
        pred = predict(stage1, stage2, vocab, program)
        code_pred.append(pred.code_vulnerable)
        code_true.append(program.label == 1)
        if program.label == 1:
            flagged = set(program.vulnerable_lines)
            for t, flag in enumerate(pred.line_flags):
                line_pred.append(flag)
                line_true.append(t in flagged)
    return metrics(confusion(code_pred, code_true)), \
        metrics(confusion(line_pred, line_true))


def run_experiment(corpus: Corpus, config: ModelConfig, repeats: int = 5,
                   vocab_from_all: bool = False):
    """The repeated balanced-resample protocol.

    The train/test split is fixed from the master seed; run r trains with
    seed = master_seed XOR r. By default the vocabulary is built from the
    training split only; vocab_from_all switches to the whole corpus.
    """
    if repeats <= 0:
        raise DataError("repeats must be positive")
    corpus = prepare_corpus(corpus)
    split_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(config.seed)))
    train, test = split_corpus(corpus, config.test_fraction, split_rng)
    vocab = build_vocabulary(corpus if vocab_from_all else train)
    results = []
    for r in range(1, repeats + 1):
        run_cfg = replace(config, seed=config.seed ^ r)
        stage1, _ = train_stage1(train, vocab, run_cfg)
        stage2, _ = train_stage2(train, vocab, stage1, run_cfg)
        code_report, line_report = evaluate_models(stage1, stage2, vocab, test)
        results.append(RunResult(r, code_report, line_report))
    return results


CSV_HEADER = "run,split,acc,precision,recall,f1,fpr,fnr,scope"


def _csv_row(run_id: int, report: MetricsReport, scope: str) -> str:
    vals = [report.accuracy, report.precision, report.recall,
            report.f1, report.fpr, report.fnr]
    return ",".join([str(run_id), "test"]
                    + [f"{100.0 * v:.2f}" for v in vals] + [scope])


def report_csv(results) -> str:
    lines = [CSV_HEADER]
    for res in results:
        lines.append(_csv_row(res.run_id, res.code, "code"))
        lines.append(_csv_row(res.run_id, res.line, "line"))
    return "\n".join(lines) + "\n"


def report_table(results) -> str:
    header = (f"{'run':>3} {'scope':>5} {'acc%':>7} {'prec%':>7} {'rec%':>7} "
              f"{'f1%':>7} {'fpr%':>7} {'fnr%':>7}")
    rows = [header]
    for res in results:
        for scope, rep in (("code", res.code), ("line", res.line)):
            rows.append(f"{res.run_id:>3} {scope:>5} "
                        f"{100 * rep.accuracy:>7.2f} {100 * rep.precision:>7.2f} "
                        f"{100 * rep.recall:>7.2f} {100 * rep.f1:>7.2f} "
                        f"{100 * rep.fpr:>7.2f} {100 * rep.fnr:>7.2f}")
    return "\n".join(rows)
