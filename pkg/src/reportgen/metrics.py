"""Text-generation metrics (BLEU-1..4, ROUGE-L, CIDEr) and the
keyword-presence clinical AUC analog."""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_MAX_N = 4


@dataclass
class MetricReport:
    cider: float
    rouge_l: float
    bleu: list  # BLEU-1..4
    auc: float

    def as_dict(self) -> dict:
        return {
            "CIDEr": self.cider,
            "ROUGE-L": self.rouge_l,
            "BLEU-1": self.bleu[0],
            "BLEU-2": self.bleu[1],
            "BLEU-3": self.bleu[2],
            "BLEU-4": self.bleu[3],
            "AUC": self.auc,
        }


def ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n: int) -> float:
    """Geometric mean of clipped i-gram precisions times brevity penalty."""
    if not 1 <= n <= 4:
        raise ValueError(f"bleu_n order must be in 1..4, got {n}")
    if not candidate:
        return 0.0
    log_sum = 0.0
    for i in range(1, n + 1):
        cand = ngrams(candidate, i)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        ref = ngrams(reference, i)
        clipped = sum(min(count, ref[gram]) for gram, count in cand.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c, r = len(candidate), len(reference)
    brevity = 1.0 if c > r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum / n)


def lcs_length(a, b) -> int:
    """Longest common subsequence length, O(len(a) * len(b))."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = ROUGE_BETA) -> float:
    """LCS F-measure with recall weighted by beta."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    prec = lcs / len(candidate)
    rec = lcs / len(reference)
    return (1 + beta**2) * prec * rec / (rec + beta**2 * prec)


def _tfidf_vector(tokens, n: int, df: Counter, num_docs: int):
    counts = ngrams(tokens, n)
    vec = {}
    for gram, c in counts.items():
        idf = math.log((num_docs + 1.0) / (df[gram] + 1.0))
        vec[gram] = c * idf
    norm = math.sqrt(sum(w * w for w in vec.values()))
    return vec, norm


def cider(candidates, references, corpus=None) -> float:
    """Mean over n=1..4 of tf-idf n-gram cosine similarity, x10, with the
    Gaussian length penalty (sigma=6).

    Document frequencies come from ``corpus`` (defaults to the references);
    idf uses log((N+1)/(df+1)) so a singleton corpus stays finite.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    docs = references if corpus is None else corpus
    num_docs = len(docs)
    dfs = []
    for n in range(1, CIDER_MAX_N + 1):
        df = Counter()
        for doc in docs:
            for gram in set(ngrams(doc, n)):
                df[gram] += 1
        dfs.append(df)
    scores = []
    for cand, ref in zip(candidates, references):
        per_n = []
        penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * CIDER_SIGMA**2))
        for n in range(1, CIDER_MAX_N + 1):
            cv, cn = _tfidf_vector(cand, n, dfs[n - 1], num_docs)
            rv, rn = _tfidf_vector(ref, n, dfs[n - 1], num_docs)
            if cn == 0.0 or rn == 0.0:
                per_n.append(0.0)
                continue
            inner = sum(w * rv.get(gram, 0.0) for gram, w in cv.items())
            per_n.append(penalty * inner / (cn * rn))
        scores.append(10.0 * float(np.mean(per_n)))
    return float(np.mean(scores))


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC with tie correction."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("rank_auc needs at least one positive and one negative")
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (len(pos) * len(neg)))


def clinical_auc(generated_reports, label_sets, class_tokens) -> float:
    """Macro AUC of keyword-presence scores against the true labels.

    Per class the sample score is the fraction of that class's scoring
    tokens present in the generated report. Classes without both a positive
    and a negative example are skipped with a warning.
    """
    present = [set(tokens) for tokens in generated_reports]
    aucs = []
    for k, tokens in enumerate(class_tokens):
        y = np.array([1 if k in labels else 0 for labels in label_sets])
        if y.min() == y.max():
            warnings.warn(f"clinical_auc: class {k} lacks both outcomes, skipped")
            continue
        scores = np.array(
            [sum(1 for t in tokens if t in toks) / len(tokens) for toks in present]
        )
        aucs.append(rank_auc(scores, y))
    return float(np.mean(aucs)) if aucs else float("nan")


def evaluate_generations(candidates, references, label_sets=None, class_tokens=None) -> MetricReport:
    """Corpus-level metric table for paired token sequences."""
    bleu = [float(np.mean([bleu_n(c, r, n) for c, r in zip(candidates, references)]))
            for n in range(1, 5)]
    rouge = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
    cider_score = cider(candidates, references)
    auc = float("nan")
    if label_sets is not None and class_tokens is not None:
        auc = clinical_auc(candidates, label_sets, class_tokens)
    return MetricReport(cider=cider_score, rouge_l=rouge, bleu=bleu, auc=auc)
