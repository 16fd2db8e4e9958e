"""Language-language retrieval: sentence-sentence matching pretraining,
per-query candidate sentence pools, exact top-k_s sentence retrieval, and
the sentence-level template representation."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import encoders as enc
from .autodiff import AdamState, ParameterStore, Tensor
from .config import Config, LrSchedule, derived_rng
from .corpus import Vocabulary
from .vlr import TemplateParams, template_queries


@dataclass
class LlrParams:
    """Sentence encoder f_s; the token embedding table is borrowed (frozen)."""

    store: ParameterStore
    sentence_encoder: enc.TextEncoderParams


def init_llr(cfg: Config, embedding: Tensor, rng: np.random.Generator) -> LlrParams:
    store = ParameterStore()
    sentence_encoder = enc.init_text_encoder(
        store, "sen", rng, cfg, embedding, cfg.max_sentence_tokens
    )
    return LlrParams(store=store, sentence_encoder=sentence_encoder)


def sentence_match_logit(a: Tensor, b: Tensor) -> Tensor:
    return ad.dot(a, b)


def sentence_match(a: Tensor, b: Tensor) -> Tensor:
    """p_ll = sigmoid(s_i . s_j); symmetric in its arguments."""
    return ad.sigmoid(sentence_match_logit(a, b))


# ---------------------------------------------------------------------------
# pretraining


def make_llr_pairs(train, vocab: Vocabulary, pairs_per_report: int, rng: np.random.Generator):
    """Balanced same-report / cross-report sentence pairs as token-id tuples."""
    pairs = []
    n_pos = max(pairs_per_report // 2, 1)
    for idx, sample in enumerate(train):
        sents = sample.sentences
        for _ in range(n_pos):
            i = int(rng.integers(len(sents)))
            if len(sents) > 1:
                j = int(rng.integers(len(sents) - 1))
                if j >= i:
                    j += 1
            else:
                j = i
            pairs.append((vocab.encode(sents[i]), vocab.encode(sents[j]), 1.0))
        for _ in range(n_pos):
            i = int(rng.integers(len(sents)))
            other = int(rng.integers(len(train) - 1))
            if other >= idx:
                other += 1
            osents = train[other].sentences
            j = int(rng.integers(len(osents)))
            pairs.append((vocab.encode(sents[i]), vocab.encode(osents[j]), 0.0))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def llr_pretrain_step(batch, p: LlrParams, opt: AdamState, clip: float = 5.0) -> float:
    """One BCE step on a batch of (tokens_a, tokens_b, same_report) pairs.

    Template sentences repeat heavily, so each distinct token sequence is
    encoded once per step; reusing the tape node accumulates its gradient
    across all occurrences.
    """
    cache: dict = {}

    def encode(tokens):
        key = tuple(tokens)
        if key not in cache:
            cache[key] = enc.encode_text(tokens, p.sentence_encoder)
        return cache[key]

    total = None
    for tok_a, tok_b, target in batch:
        term = ad.bce_with_logits(sentence_match_logit(encode(tok_a), encode(tok_b)), target)
        total = term if total is None else ad.add(total, term)
    loss = ad.mul(total, 1.0 / len(batch))
    p.store.zero_grad()
    ad.backward(loss, p.store)
    ad.clip_and_step(p.store, opt, clip=clip)
    return loss.item()


def pretrain_llr(train, vocab: Vocabulary, cfg: Config, embedding: Tensor, log=None):
    """Stage 2: train f_s on sentence-sentence matching; embedding frozen."""
    rng = derived_rng(cfg.seed, "llr:init")
    p = init_llr(cfg, embedding, rng)
    opt = AdamState(
        lr=cfg.llr_lr,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.llr_l2,
    )
    schedule = LrSchedule(factor=cfg.llr_factor, every=cfg.llr_every)
    history = []
    for epoch in range(cfg.llr_epochs):
        opt.lr_scale = schedule.scale(epoch)
        pairs = make_llr_pairs(
            train, vocab, cfg.llr_pairs_per_report, derived_rng(cfg.seed, f"llr:epoch:{epoch}")
        )
        losses = []
        for start in range(0, len(pairs) - cfg.llr_batch + 1, cfg.llr_batch):
            losses.append(
                llr_pretrain_step(pairs[start : start + cfg.llr_batch], p, opt, clip=cfg.grad_clip)
            )
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append(mean)
        if log:
            log(f"llr epoch {epoch}: loss {mean:.4f} lr_scale {opt.lr_scale:g}")
    return p, history


def evaluate_pair_accuracy(samples, vocab: Vocabulary, p: LlrParams, seed: int = 0) -> float:
    """Held-out same-report pair accuracy on a balanced deterministic set."""
    rng = derived_rng(seed, "llr:eval")
    pairs = make_llr_pairs(samples, vocab, 2, rng)
    correct = 0
    with ad.no_grad():
        for tok_a, tok_b, target in pairs:
            ea = enc.encode_text(tok_a, p.sentence_encoder)
            eb = enc.encode_text(tok_b, p.sentence_encoder)
            pred = float(ea.data @ eb.data) > 0.0
            correct += int(pred == bool(target))
    return correct / len(pairs)


# ---------------------------------------------------------------------------
# sentence pools and retrieval


@dataclass
class SentencePool:
    ids: list            # (source_report_id, sentence_index) pairs
    embeddings: np.ndarray
    tokens: list
    source_report_ids: list


@dataclass
class RetrievedSentence:
    sentence_id: tuple
    score: float  # p_ll
    embedding: np.ndarray
    tokens: list


def build_sentence_pool(retrieved_reports, p: LlrParams, vocab: Vocabulary) -> SentencePool:
    """Split the k_r retrieved reports into candidate sentences and embed
    each with the frozen f_s. The corpus stores sentence lists, so no
    re-segmentation happens here."""
    if not retrieved_reports:
        raise ad.ValidationError("cannot build a sentence pool from an empty retrieval")
    ids, embs, toks, sources = [], [], [], []
    with ad.no_grad():
        for rep in retrieved_reports:
            for si, sent in enumerate(rep.sentences):
                ids.append((rep.report_id, si))
                embs.append(enc.encode_text(vocab.encode(sent), p.sentence_encoder).data)
                toks.append(list(sent))
                sources.append(rep.report_id)
    return SentencePool(
        ids=ids, embeddings=np.stack(embs), tokens=toks, source_report_ids=sources
    )


def build_global_sentence_pool(train, p: LlrParams, vocab: Vocabulary) -> SentencePool:
    """All training sentences; the w/o VLRM ablation retrieves from this."""
    if not train:
        raise ad.ValidationError("cannot build a sentence pool from an empty corpus")
    ids, embs, toks, sources = [], [], [], []
    with ad.no_grad():
        for sample in sorted(train, key=lambda s: s.id):
            for si, sent in enumerate(sample.sentences):
                ids.append((sample.id, si))
                embs.append(enc.encode_text(vocab.encode(sent), p.sentence_encoder).data)
                toks.append(list(sent))
                sources.append(sample.id)
    return SentencePool(
        ids=ids, embeddings=np.stack(embs), tokens=toks, source_report_ids=sources
    )


def retrieve_sentences(query_embedding, pool: SentencePool, k_s: int):
    """Exact top-k_s sentences by p_ll; ties break by ascending id.

    When the pool holds fewer than k_s sentences, returns all of them with
    a warning (retrieved reports can be short).
    """
    q = query_embedding.data if isinstance(query_embedding, Tensor) else np.asarray(query_embedding)
    size = len(pool.ids)
    if k_s > size:
        warnings.warn(f"k_s={k_s} exceeds sentence pool size {size}; clamping")
        k_s = size
    dots = pool.embeddings @ q
    ranked = sorted(range(size), key=lambda i: (-dots[i], pool.ids[i]))[:k_s]
    return [
        RetrievedSentence(
            sentence_id=pool.ids[i],
            score=float(_sigmoid_scalar(dots[i])),
            embedding=pool.embeddings[i],
            tokens=pool.tokens[i],
        )
        for i in ranked
    ]


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def sentence_template(
    hidden: Tensor,
    retrieved_sentences,
    keyword_ids,
    disease_ids,
    tp: TemplateParams,
    proj_w: Tensor,
    proj_b: Tensor,
    return_weights: bool = False,
):
    """u_t (or u_i^w): multi-query attention over retrieved sentences with
    the projected decoder hidden state as the key anchor."""
    anchor = ad.linear(hidden, proj_w, proj_b)
    d = anchor.shape[0]
    queries = template_queries(keyword_ids, disease_ids, tp, d)
    values = [
        s.embedding if isinstance(s.embedding, Tensor) else Tensor(s.embedding)
        for s in retrieved_sentences
    ]
    return attn.multi_query_attention(queries, anchor, values, tp.mqa, return_weights=return_weights)
