"""Translation quality and latency measurement.

Corpus-level 4-gram BLEU, Average Lagging aggregation, read/unread
("present"/"absent") unigram accuracy from oracle alignments, encoder-state
distance between a model pair, and the train-k vs test-k BLEU matrix.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import no_grad
from .waitk import average_lagging, streaming_decode

BLEU_EPSILON = 1e-9


@dataclass
class EvalReport:
    corpus_bleu: float
    mean_al: float
    absent_1gram: float
    present_1gram: float
    mean_hidden_l2: float
    sentences: int

    FIELDS = ("corpus_bleu", "mean_al", "absent_1gram", "present_1gram",
              "mean_hidden_l2", "sentences")

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            writer.writerow([
                f"{self.corpus_bleu:.4f}",
                f"{self.mean_al:.4f}",
                f"{self.absent_1gram:.4f}",
                f"{self.present_1gram:.4f}",
                f"{self.mean_hidden_l2:.6f}",
                self.sentences,
            ])


def _ngram_counts(tokens, order):
    return Counter(
        tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1)
    )


def _closest_ref_len(cand_len, refs):
    # ties broken toward the shorter reference
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def corpus_bleu(candidates, references, max_order=4):
    """Corpus-level BLEU on a 0..100 scale.

    Geometric mean of modified n-gram precisions (clip counts maximized
    across references) times the brevity penalty with closest-reference
    lengths. Raw aggregate counts: a zero precision with support yields 0;
    an order with no candidate n-grams at all falls back to a tiny epsilon
    so short-sentence corpora stay scoreable.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates vs {len(references)} reference lists"
        )
    matched = [0] * max_order
    totals = [0] * max_order
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand = list(cand)
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), refs)
        for order in range(1, max_order + 1):
            counts = _ngram_counts(cand, order)
            if not counts:
                continue
            clip = Counter()
            for ref in refs:
                ref_counts = _ngram_counts(list(ref), order)
                for gram, c in ref_counts.items():
                    if c > clip[gram]:
                        clip[gram] = c
            totals[order - 1] += sum(counts.values())
            matched[order - 1] += sum(
                min(c, clip[gram]) for gram, c in counts.items()
            )
    precisions = []
    for order in range(1, max_order + 1):
        if totals[order - 1] == 0:
            precisions.append(BLEU_EPSILON if order >= 2 else 0.0)
        else:
            precisions.append(matched[order - 1] / totals[order - 1])
    if any(p == 0.0 for p in precisions):
        return 0.0
    log_mean = sum(np.log(p) for p in precisions) / max_order
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else float(np.exp(1.0 - ref_len / cand_len))
    return float(100.0 * bp * np.exp(log_mean))


def sentence_bleu(candidate, references, max_order=4):
    """Sentence-level BLEU with epsilon smoothing on zero precisions of
    order two and above."""
    candidate = list(candidate)
    if not candidate:
        return 0.0
    precisions = []
    for order in range(1, max_order + 1):
        counts = _ngram_counts(candidate, order)
        total = sum(counts.values())
        clip = Counter()
        for ref in references:
            for gram, c in _ngram_counts(list(ref), order).items():
                if c > clip[gram]:
                    clip[gram] = c
        got = sum(min(c, clip[gram]) for gram, c in counts.items())
        p = got / total if total else 0.0
        if p == 0.0:
            if order == 1:
                return 0.0
            p = BLEU_EPSILON
        precisions.append(p)
    log_mean = sum(np.log(p) for p in precisions) / max_order
    ref_len = _closest_ref_len(len(candidate), references)
    bp = 1.0 if len(candidate) > ref_len else float(
        np.exp(1.0 - ref_len / len(candidate))
    )
    return float(100.0 * bp * np.exp(log_mean))


def one_gram_score(set_tokens, reference_tokens):
    """Clipped unigram precision of a token set against a reference.

    Returns None for an empty set (reported as absent, not zero).
    """
    set_tokens = list(set_tokens)
    if not set_tokens:
        return None
    counts = Counter(set_tokens)
    ref_counts = Counter(reference_tokens)
    got = sum(min(c, ref_counts[tok]) for tok, c in counts.items())
    return got / len(set_tokens)


def present_absent_split(example, generated, alignment, k):
    """Partition generated tokens by whether their aligned source token had
    been read when they were emitted.

    With 1-based positions, generated token i aligned to source j is
    "present" iff j <= min(i + k - 1, n). Generated positions past the oracle
    alignment are treated as aligned to the final source token. Returns None
    when no alignment is available.
    """
    if alignment is None:
        return None
    n = len(example.src)
    align_map = dict(alignment)
    present, absent = [], []
    for i0, token in enumerate(generated):
        j0 = align_map.get(i0, n - 1)
        if (j0 + 1) <= min(i0 + k, n):
            present.append(token)
        else:
            absent.append(token)
    return present, absent


def hidden_distance_stats(student, teacher, dataset):
    """Mean over sentences of the per-token squared distance between the
    two encoders' final states (no gradients)."""
    total = 0.0
    with no_grad():
        for ex in dataset:
            z_s = student.encode(ex.src).states
            z_t = teacher.encode(ex.src).states
            total += T.l2_distance_loss(z_s, z_t).item()
    return total / len(dataset)


def evaluate_model(student, dataset, k, teacher=None, trace_path=None):
    """Streaming-decode every sentence and aggregate the report.

    Absent/present unigram accuracies are pooled over the corpus and only
    computed when oracle alignments are present; the hidden-state distance
    needs the teacher.
    """
    candidates = []
    references = []
    al_values = []
    traces = []
    ab_match, ab_total = 0, 0
    pr_match, pr_total = 0, 0
    have_alignments = False
    for ex in dataset:
        tokens, trace = streaming_decode(student, ex.src, k)
        traces.append(trace)
        candidates.append(tokens)
        references.append([ex.tgt])
        if trace.tgt_len > 0:
            al_values.append(average_lagging(trace))
        split = present_absent_split(ex, tokens, ex.alignment, k)
        if split is not None:
            have_alignments = True
            present, absent = split
            ref_counts = Counter(ex.tgt)
            for tokens_set, is_present in ((present, True), (absent, False)):
                counts = Counter(tokens_set)
                got = sum(min(c, ref_counts[t]) for t, c in counts.items())
                if is_present:
                    pr_match += got
                    pr_total += len(tokens_set)
                else:
                    ab_match += got
                    ab_total += len(tokens_set)
    if trace_path is not None:
        with open(trace_path, "w", encoding="utf-8") as fh:
            for trace in traces:
                fh.write(trace.to_json_line() + "\n")
    report = EvalReport(
        corpus_bleu=corpus_bleu(candidates, references),
        mean_al=float(np.mean(al_values)) if al_values else float("nan"),
        absent_1gram=(ab_match / ab_total
                      if have_alignments and ab_total else float("nan")),
        present_1gram=(pr_match / pr_total
                       if have_alignments and pr_total else float("nan")),
        mean_hidden_l2=(hidden_distance_stats(student, teacher, dataset)
                        if teacher is not None else float("nan")),
        sentences=len(dataset),
    )
    return report


def k_matrix(students_by_k, test_ks, dataset, csv_path=None):
    """BLEU for every trained model evaluated at every test k.

    students_by_k maps training-time k to a trained student model. Returns
    a [train x test] array in the key order given.
    """
    train_ks = list(students_by_k)
    matrix = np.zeros((len(train_ks), len(test_ks)))
    for i, train_k in enumerate(train_ks):
        model = students_by_k[train_k]
        for j, test_k in enumerate(test_ks):
            report = evaluate_model(model, dataset, test_k)
            matrix[i, j] = report.corpus_bleu
    if csv_path is not None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["train_k"] + [f"test_k={k}" for k in test_ks])
            for i, train_k in enumerate(train_ks):
                writer.writerow(
                    [train_k] + [f"{matrix[i, j]:.4f}" for j in range(len(test_ks))]
                )
    return matrix
