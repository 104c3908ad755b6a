"""Corpus-level caption metrics: BLEU-n, ROUGE-L, and CIDEr.

Scores follow the standard corpus definitions: BLEU pools clipped n-gram
counts over the whole corpus before taking the geometric mean and applies
the closest-reference brevity penalty; ROUGE-L averages per-pair LCS
F-scores (max over references); CIDEr averages per-n TF-IDF cosines over
references and n, scaled by 10, without any length penalty. Sentence
markers and padding are stripped before any counting.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>")


def strip_specials(tokens: list[str]) -> list[str]:
    return [t for t in tokens if t not in SPECIAL_TOKENS]


@dataclass
class EvalCorpus:
    """Candidates and references keyed by id; every candidate id must
    carry at least one reference."""
    candidates: dict[int, list[str]]
    references: dict[int, list[list[str]]]

    def __post_init__(self):
        self.candidates = {i: strip_specials(c) for i, c in self.candidates.items()}
        clean_refs = {}
        for i in self.candidates:
            refs = self.references.get(i, [])
            if not refs:
                raise ValueError(f"candidate id {i} has no references")
            clean_refs[i] = [strip_specials(r) for r in refs]
        self.references = clean_refs

    def ids(self) -> list[int]:
        return sorted(self.candidates)


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _require_nonempty(corpus: EvalCorpus) -> list[int]:
    ids = corpus.ids()
    if not ids:
        raise ValueError("empty evaluation corpus")
    return ids


def bleu(corpus: EvalCorpus, max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..BLEU-max_n with count clipping, uniform geometric
    mean, and closest-reference brevity penalty. Any zero pooled n-gram
    precision makes the affected orders score 0 (no smoothing)."""
    ids = _require_nonempty(corpus)
    clipped = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for i in ids:
        cand = corpus.candidates[i]
        refs = corpus.references[i]
        cand_len += len(cand)
        # closest reference length; ties go to the shorter reference
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngram_counts(cand, n)
            if not counts:
                continue
            cap = Counter()
            for r in refs:
                for gram, k in _ngram_counts(r, n).items():
                    if k > cap[gram]:
                        cap[gram] = k
            clipped[n - 1] += sum(min(k, cap[gram]) for gram, k in counts.items())
            total[n - 1] += sum(counts.values())

    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    for n in range(1, max_n + 1):
        if any(total[k] == 0 or clipped[k] == 0 for k in range(n)):
            scores.append(0.0)
            continue
        log_mean = sum(math.log(clipped[k] / total[k]) for k in range(n)) / n
        scores.append(bp * math.exp(log_mean))
    return scores


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for i in range(1, len(a) + 1):
        cur = [0] * (len(b) + 1)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[-1]


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    """Mean over ids of the best per-reference LCS F_beta score."""
    ids = _require_nonempty(corpus)
    total = 0.0
    for i in ids:
        cand = corpus.candidates[i]
        best = 0.0
        for ref in corpus.references[i]:
            lcs = _lcs_length(cand, ref)
            if lcs == 0 or not cand or not ref:
                continue
            p = lcs / len(cand)
            r = lcs / len(ref)
            f = (1.0 + beta * beta) * p * r / (r + beta * beta * p)
            best = max(best, f)
        total += best
    return total / len(ids)


def cider_per_n(corpus: EvalCorpus, max_n: int = 4) -> dict[int, list[float]]:
    """Reference-averaged TF-IDF cosine per id and n-gram order.

    IDF is log(N / df) over the ids' reference sets, with df floored at 1
    so candidate-only n-grams still get a finite weight in the norm. A
    zero-weight vector on either side makes that cosine 0.
    """
    ids = _require_nonempty(corpus)
    if len(ids) < 2:
        raise ValueError("cider needs at least 2 ids to define IDF")
    n_docs = len(ids)
    df: list[Counter] = [Counter() for _ in range(max_n)]
    for i in ids:
        for n in range(1, max_n + 1):
            seen = set()
            for ref in corpus.references[i]:
                seen.update(_ngram_counts(ref, n))
            for gram in seen:
                df[n - 1][gram] += 1

    def tfidf(tokens: list[str], n: int) -> dict:
        return {gram: k * math.log(n_docs / max(1, df[n - 1][gram]))
                for gram, k in _ngram_counts(tokens, n).items()}

    def cosine(u: dict, v: dict) -> float:
        nu2 = sum(x * x for x in u.values())
        nv2 = sum(x * x for x in v.values())
        if nu2 == 0.0 or nv2 == 0.0:
            return 0.0
        dot = sum(x * v.get(gram, 0.0) for gram, x in u.items())
        # single sqrt keeps identical vectors at exactly 1 (IEEE
        # sqrt(x*x) == x); the min guards the nonnegative-weight range
        return min(1.0, dot / math.sqrt(nu2 * nv2))

    out = {}
    for i in ids:
        refs = corpus.references[i]
        out[i] = [
            sum(cosine(tfidf(corpus.candidates[i], n), tfidf(r, n)) for r in refs) / len(refs)
            for n in range(1, max_n + 1)]
    return out


def cider(corpus: EvalCorpus, max_n: int = 4) -> float:
    """Plain CIDEr: the per-n cosines averaged over n and ids, times 10."""
    per_n = cider_per_n(corpus, max_n)
    return 10.0 * sum(sum(v) / max_n for v in per_n.values()) / len(per_n)


@dataclass
class EvalReport:
    bleu: list[float] = field(default_factory=list)
    rouge_l: float = 0.0
    cider: float = 0.0

    CSV_HEADER = "bleu_1,bleu_2,bleu_3,bleu_4,rouge_l,cider"

    def to_dict(self) -> dict:
        out = {f"bleu_{n + 1}": v for n, v in enumerate(self.bleu)}
        out["rouge_l"] = self.rouge_l
        out["cider"] = self.cider
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> str:
        vals = list(self.bleu) + [self.rouge_l, self.cider]
        return ",".join(format(v, ".17g") for v in vals)


def evaluate(corpus: EvalCorpus, max_n: int = 4, beta: float = 1.2) -> EvalReport:
    return EvalReport(bleu=bleu(corpus, max_n), rouge_l=rouge_l(corpus, beta),
                      cider=cider(corpus, max_n))


def read_tokens_jsonl(path: str) -> dict[int, list[list[str]]]:
    """Read {"id": int, "tokens": [...]} lines, grouping by id."""
    out: dict[int, list[list[str]]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            out[int(raw["id"])].append([str(t) for t in raw["tokens"]])
    return dict(out)


def corpus_from_files(cand_path: str, ref_path: str) -> EvalCorpus:
    cands = read_tokens_jsonl(cand_path)
    for i, rows in cands.items():
        if len(rows) != 1:
            raise ValueError(f"candidate id {i} appears {len(rows)} times")
    return EvalCorpus({i: rows[0] for i, rows in cands.items()},
                      read_tokens_jsonl(ref_path))
