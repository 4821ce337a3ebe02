"""Caption and retrieval metrics.

CIDEr here is the plain variant: per n in 1..4, TF-IDF n-gram vectors of
candidate and each reference, cosine similarity averaged over references,
then averaged over n and scaled by 10. No length penalty or count
clipping. Document frequency counts images whose references contain the
n-gram; ``idf = ln(N / max(1, df))``.
"""
from __future__ import annotations

import math
from collections import Counter

import numpy as np


def _tokens(text):
    return text.lower().split() if isinstance(text, str) else [t.lower() for t in text]


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


class CiderCorpus:
    """Document frequencies over the reference sets of a test split."""

    def __init__(self, references, n=4):
        self.n = n
        self.refs = [[_tokens(r) for r in refs] for refs in references]
        self.size = len(self.refs)
        self.df = Counter()
        for refs in self.refs:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(r, k))
            self.df.update(seen)

    def idf(self, gram):
        return math.log(self.size / max(1, self.df.get(gram, 0)))

    def vector(self, tokens, k):
        return {g: c * self.idf(g) for g, c in ngrams(tokens, k).items()}


def _cosine(a, b):
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider(candidate, references, corpus):
    """CIDEr of one candidate against its references, in [0, 10]."""
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not cand or not refs:
        return 0.0
    total = 0.0
    for k in range(1, corpus.n + 1):
        vc = corpus.vector(cand, k)
        total += sum(_cosine(vc, corpus.vector(r, k)) for r in refs) / len(refs)
    return 10.0 * total / corpus.n


def corpus_cider(candidates, references):
    """Mean CIDEr over a split; ``references[i]`` is the list of refs of item i."""
    corpus = CiderCorpus(references)
    scores = [cider(c, r, corpus) for c, r in zip(candidates, references)]
    return float(np.mean(scores)) if scores else 0.0


def similarity_matrix(query_feats, text_feats):
    """[B, B] max-over-queries dot products (query feats [B, nq, d] or [B, d])."""
    q = np.asarray(query_feats, dtype=np.float64)
    t = np.asarray(text_feats, dtype=np.float64)
    if q.ndim == 2:
        q = q[:, None, :]
    return np.einsum("bkd,cd->bkc", q, t).max(axis=1)


def recall_from_similarity(sim, k=1):
    sim = np.asarray(sim, dtype=np.float64)
    diag = np.diag(sim)
    better = (sim > diag[:, None]).sum(axis=1)
    return float(np.mean(better < k))


def retrieval_recall(query_feats, text_feats, k=1):
    """Fraction of items whose true text ranks within the top ``k``."""
    if len(query_feats) != len(text_feats):
        raise ValueError("retrieval_recall: query and text counts differ")
    if not 1 <= k <= len(text_feats):
        raise ValueError(f"retrieval_recall: k={k} out of range")
    return recall_from_similarity(similarity_matrix(query_feats, text_feats), k)
