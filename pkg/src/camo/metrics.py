"""Caption metrics over whitespace-tokenised UTF-8 text.

BLEU@1-4, ROUGE-L and CIDEr-D follow the usual captioning-toolkit
conventions. METEOR here is an exact-match-only variant ("METEOR-lite"):
there is no stemming or synonym stage, so its numbers are not comparable with
the official Java implementation.
"""

from __future__ import annotations

import json
import math
import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

Tokens = Sequence[str]


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizedCaption:
    tokens: tuple[str, ...]
    original: str


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(s: str | bytes) -> TokenizedCaption:
    """NFC-normalise, lowercase, replace punctuation by spaces, split.

    Diacritics are kept, and Vietnamese syllables stay separate tokens.
    """
    if isinstance(s, bytes):
        try:
            s = s.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MetricError(f"invalid UTF-8 input: {exc}") from None
    try:
        s.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise MetricError(f"invalid UTF-8 input: {exc}") from None
    text = unicodedata.normalize("NFC", s).lower()
    text = "".join(" " if _is_punct(ch) else ch for ch in text)
    return TokenizedCaption(tuple(text.split()), s)


def tok(s: str) -> list[str]:
    return list(tokenize(s).tokens)


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ---------------------------------------------------------------------


def modified_precision(cand: Tokens, refs: Sequence[Tokens], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and total candidate n-grams."""
    counts = ngrams(cand, n)
    max_ref: Counter = Counter()
    for ref in refs:
        for gram, c in ngrams(ref, n).items():
            max_ref[gram] = max(max_ref[gram], c)
    clipped = sum(min(c, max_ref[g]) for g, c in counts.items())
    return clipped, sum(counts.values())


def bleu(cands: Sequence[Tokens], refs_per_cand: Sequence[Sequence[Tokens]], max_n: int = 4, smooth: bool = False, eps: float = 1e-9) -> list[float]:
    """Corpus BLEU@1..max_n with the closest-reference-length brevity penalty.

    Without ``smooth`` a zero clipped count makes that order (and all higher
    ones) score 0; with it, zero counts are replaced by ``eps``.
    """
    if len(cands) != len(refs_per_cand):
        raise MetricError("candidate and reference lists differ in length")
    if any(len(r) == 0 for r in refs_per_cand):
        raise MetricError("every candidate needs at least one reference")
    if any(len(c) == 0 for c in cands):
        warnings.warn("empty candidate caption(s) in BLEU input", stacklevel=2)
    correct = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(cands, refs_per_cand):
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            c, t = modified_precision(cand, refs, n)
            correct[n - 1] += c
            total[n - 1] += t
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    prod = 1.0
    for n in range(max_n):
        if total[n] == 0 or correct[n] == 0:
            p = eps if smooth and total[n] else 0.0
        else:
            p = correct[n] / total[n]
        prod *= p
        scores.append(bp * prod ** (1.0 / (n + 1)) if prod > 0 else 0.0)
    return scores


# -- ROUGE-L ------------------------------------------------------------------


def lcs_length(a: Tokens, b: Tokens) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand: Tokens, refs: Sequence[Tokens], beta: float = 1.2) -> float:
    """LCS F-measure using the best precision and recall over references."""
    if not cand or not refs:
        return 0.0
    precs, recs = [], []
    for ref in refs:
        if not ref:
            continue
        lcs = lcs_length(cand, ref)
        precs.append(lcs / len(cand))
        recs.append(lcs / len(ref))
    if not precs:
        return 0.0
    p, r = max(precs), max(recs)
    if p == 0 or r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (r + beta**2 * p)


# -- CIDEr-D ------------------------------------------------------------------


@dataclass
class CiderD:
    """CIDEr-D with document frequencies frozen from a reference corpus.

    ``df`` maps an n-gram tuple to the number of images whose references
    contain it; ``n_docs`` is the number of images.
    """

    df: dict[tuple[str, ...], int]
    n_docs: int
    n: int = 4
    sigma: float = 6.0

    @classmethod
    def from_references(cls, refs_corpus: Sequence[Sequence[Tokens]], n: int = 4, sigma: float = 6.0) -> "CiderD":
        if not refs_corpus:
            raise MetricError("empty reference corpus for CIDEr-D document frequencies")
        df: Counter = Counter()
        for refs in refs_corpus:
            seen = set()
            for ref in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(ref, k))
            df.update(seen)
        return cls(dict(df), len(refs_corpus), n, sigma)

    def _vec(self, tokens: Tokens):
        log_docs = math.log(float(self.n_docs))
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (log_docs - math.log(max(1.0, self.df.get(g, 0.0)))) for g, tf in ngrams(tokens, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms

    def _sim(self, vh, nh, lh, vr, nr, lr) -> list[float]:
        delta = float(lh - lr)
        penalty = math.exp(-(delta**2) / (2 * self.sigma**2))
        out = []
        for k in range(self.n):
            val = sum(min(x, vr[k].get(g, 0.0)) * vr[k].get(g, 0.0) for g, x in vh[k].items())
            if nh[k] != 0 and nr[k] != 0:
                val /= nh[k] * nr[k]
            else:
                val = 0.0
            out.append(val * penalty)
        return out

    def score_one(self, cand: Tokens, refs: Sequence[Tokens]) -> float:
        if not refs:
            raise MetricError("CIDEr-D needs at least one reference")
        vh, nh = self._vec(cand)
        acc = [0.0] * self.n
        for ref in refs:
            vr, nr = self._vec(ref)
            for k, s in enumerate(self._sim(vh, nh, len(cand), vr, nr, len(ref))):
                acc[k] += s
        return 10.0 * (sum(acc) / self.n) / len(refs)

    def compute(self, cands: Sequence[Tokens], refs: Sequence[Sequence[Tokens]]) -> tuple[float, list[float]]:
        if len(cands) != len(refs):
            raise MetricError("candidate and reference lists differ in length")
        if not cands:
            raise MetricError("empty corpus")
        per = [self.score_one(c, r) for c, r in zip(cands, refs)]
        return sum(per) / len(per), per

    def to_dict(self) -> dict:
        return {"n_docs": self.n_docs, "n": self.n, "sigma": self.sigma, "df": {" ".join(g): c for g, c in sorted(self.df.items())}}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CiderD":
        df = {tuple(k.split(" ")): int(v) for k, v in d["df"].items()}
        return cls(df, int(d["n_docs"]), int(d.get("n", 4)), float(d.get("sigma", 6.0)))


def cider_d(cands: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], idf_corpus: Sequence[Sequence[Tokens]] | CiderD | None = None):
    """Corpus CIDEr-D and per-image scores; IDF defaults to ``refs`` itself."""
    scorer = idf_corpus if isinstance(idf_corpus, CiderD) else CiderD.from_references(refs if idf_corpus is None else idf_corpus)
    return scorer.compute(cands, refs)


# -- METEOR-lite ----------------------------------------------------------------


def _align(cand: Tokens, ref: Tokens) -> list[tuple[int, int]]:
    """Exact unigram alignment preferring continuations of the previous match."""
    used = [False] * len(ref)
    pairs = []
    last = -2
    for i, w in enumerate(cand):
        slots = [j for j, r in enumerate(ref) if r == w and not used[j]]
        if not slots:
            continue
        j = last + 1 if last + 1 in slots else slots[0]
        used[j] = True
        pairs.append((i, j))
        last = j
    return pairs


def _chunks(pairs: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in pairs:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_lite(cand: Tokens, refs: Sequence[Tokens], alpha: float = 0.9, gamma: float = 0.5, beta: float = 3.0) -> float:
    """Recall-weighted (9:1) harmonic mean with a fragmentation penalty.

    The penalty is ``gamma * (chunks / matches) ** beta``; the best
    reference wins.
    """
    best = 0.0
    if not cand:
        return 0.0
    for ref in refs:
        if not ref:
            continue
        pairs = _align(cand, ref)
        m = len(pairs)
        if m == 0:
            continue
        p, r = m / len(cand), m / len(ref)
        fmean = p * r / (alpha * p + (1 - alpha) * r)
        score = fmean * (1.0 - gamma * (_chunks(pairs) / m) ** beta)
        best = max(best, score)
    return best


# -- report ---------------------------------------------------------------------

REPORT_FIELDS = ("bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "cider_d")


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    cider_d: float
    per_image_cider: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Fixed-point JSON (4 decimals) with exactly the metric fields."""
        body = ", ".join(f'"{name}": {getattr(self, name):.4f}' for name in REPORT_FIELDS)
        return "{" + body + "}\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(**{k: float(d[k]) for k in REPORT_FIELDS})


def evaluate(predictions: Mapping, references: Mapping, idf: CiderD | None = None) -> EvalReport:
    """Score ``{image_id: caption}`` against ``{image_id: [captions]}``."""
    missing = set(references) - set(predictions)
    if missing:
        raise MetricError(f"no prediction for image ids {sorted(missing)[:5]}")
    ids = sorted(references)
    cands = [tok(predictions[i]) for i in ids]
    refs = [[tok(r) for r in references[i]] for i in ids]
    b = bleu(cands, refs)
    if idf is None:
        idf = CiderD.from_references(refs)
    corpus, per = idf.compute(cands, refs)
    return EvalReport(
        bleu1=b[0],
        bleu2=b[1],
        bleu3=b[2],
        bleu4=b[3],
        meteor=sum(meteor_lite(c, r) for c, r in zip(cands, refs)) / len(ids),
        rouge_l=sum(rouge_l(c, r) for c, r in zip(cands, refs)) / len(ids),
        cider_d=corpus,
        per_image_cider=dict(zip(ids, per)),
    )
