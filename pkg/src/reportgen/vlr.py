"""Visual-language retrieval: disease classification, image-report matching,
the frozen report pool, exact top-k report retrieval, keyword extraction,
and the report-level template representation."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import encoders as enc
from .autodiff import AdamState, ParameterStore, Tensor
from .config import Config, LrSchedule, derived_rng, lr_schedule
from .corpus import Vocabulary


@dataclass
class VlrParams:
    """Image pathway (prefix img.) plus language pathway (prefix txt.)."""

    store: ParameterStore
    image: enc.ImageEncoderParams
    report_encoder: enc.TextEncoderParams
    spatial: attn.SpatialAttentionParams  # conditioned on c_pred
    w_fuse: Tensor                        # (b*d, d)
    w_cls: Tensor                         # (c, d)
    b_cls: Tensor                         # (c,)
    num_views: int


def init_vlr(cfg: Config, vocab_size: int, rng: np.random.Generator) -> VlrParams:
    store = ParameterStore()
    d, c = cfg.feature_dim, cfg.num_classes
    image = enc.init_image_encoder(store, "img.enc", rng, cfg)
    embedding = store.add("txt.embedding", ad.uniform_init(rng, (vocab_size, d), d))
    report_encoder = enc.init_text_encoder(
        store, "txt.report", rng, cfg, embedding, cfg.max_report_tokens
    )
    spatial = attn.init_spatial_attention(store, "img.spatial", rng, d, c, cfg.attn_hidden)
    return VlrParams(
        store=store,
        image=image,
        report_encoder=report_encoder,
        spatial=spatial,
        w_fuse=store.add("img.w_fuse", ad.uniform_init(rng, (cfg.num_views * d, d), cfg.num_views * d)),
        w_cls=store.add("img.cls.w", ad.uniform_init(rng, (c, d), d)),
        b_cls=store.add("img.cls.b", np.zeros(c)),
        num_views=cfg.num_views,
    )


def disease_logits(feature_maps, p: VlrParams) -> Tensor:
    """c_pred = W_cls (sum_i AvgPool(v_i)) + b_cls."""
    if len(feature_maps) != p.num_views:
        raise ad.ValidationError(f"expected {p.num_views} views, got {len(feature_maps)}")
    pooled = ad.avg_pool_spatial(feature_maps[0])
    for fmap in feature_maps[1:]:
        pooled = ad.add(pooled, ad.avg_pool_spatial(fmap))
    return ad.linear(pooled, p.w_cls, p.b_cls)


def image_context(feature_maps, c_pred: Tensor, p: VlrParams, return_weights: bool = False):
    """Spatial attention per view conditioned on c_pred, then view fusion."""
    attended = []
    weights = []
    for fmap in feature_maps:
        sa = attn.spatial_scores(fmap, c_pred, p.spatial)
        attended.append(attn.attend_spatial(fmap, sa.weights))
        weights.append(sa.weights.data.copy())
    fused = attn.fuse_views(attended, p.w_fuse)
    if return_weights:
        return fused, weights
    return fused


def match_logit(v: Tensor, r: Tensor) -> Tensor:
    return ad.dot(r, v)


def match_score(v: Tensor, r: Tensor) -> Tensor:
    """p_vl = sigmoid(r . v)."""
    return ad.sigmoid(match_logit(v, r))


def encode_sample(sample_views, sample_report_ids, p: VlrParams):
    """Full VLR forward for one subject: maps, logits, context, report vec."""
    maps = [enc.encode_image(view, p.image) for view in sample_views]
    c_pred = disease_logits(maps, p)
    v = image_context(maps, c_pred, p)
    r = enc.encode_text(sample_report_ids, p.report_encoder)
    return maps, c_pred, v, r


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class VlrExample:
    views: list
    report_ids: list   # token ids of the paired (possibly swapped) report
    labels: np.ndarray  # multi-hot over classes, belongs to the image
    match_target: float


def vlr_pretrain_step(
    batch, p: VlrParams, opt: AdamState, clip: float = 5.0
):
    """One optimization step over a half-matched half-swapped batch."""
    loss_dc = None
    loss_vl = None
    for ex in batch:
        maps = [enc.encode_image(view, p.image) for view in ex.views]
        c_pred = disease_logits(maps, p)
        v = image_context(maps, c_pred, p)
        r = enc.encode_text(ex.report_ids, p.report_encoder)
        dc = ad.bce_with_logits(c_pred, ex.labels)
        vl = ad.bce_with_logits(match_logit(v, r), ex.match_target)
        loss_dc = dc if loss_dc is None else ad.add(loss_dc, dc)
        loss_vl = vl if loss_vl is None else ad.add(loss_vl, vl)
    inv = 1.0 / len(batch)
    total = ad.mul(ad.add(loss_dc, loss_vl), inv)
    p.store.zero_grad()
    ad.backward(total, p.store)
    ad.clip_and_step(p.store, opt, clip=clip)
    return loss_dc.item() * inv, loss_vl.item() * inv


def make_vlr_batches(
    train, vocab: Vocabulary, batch_size: int, num_classes: int, rng: np.random.Generator
):
    """Shuffled batches, first half matched, second half report-swapped."""
    order = list(range(len(train)))
    rng.shuffle(order)
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        chunk = [train[i] for i in order[start : start + batch_size]]
        half = len(chunk) // 2
        examples = []
        for j, sample in enumerate(chunk):
            if j < half:
                report = sample
                target = 1.0
            else:
                # uniform swap within the batch, never with itself
                other = int(rng.integers(len(chunk) - 1))
                if other >= j:
                    other += 1
                report = chunk[other]
                target = 0.0
            labels = np.zeros(num_classes, dtype=np.float64)
            for k in sample.labels:
                labels[k] = 1.0
            examples.append(
                VlrExample(
                    views=sample.views,
                    report_ids=vocab.encode(report.tokens()),
                    labels=labels,
                    match_target=target,
                )
            )
        batches.append(examples)
    return batches


def pretrain_vlr(train, val, vocab: Vocabulary, cfg: Config, log=None):
    """Stage 1: train the VLR module; returns params and the loss history."""
    rng = derived_rng(cfg.seed, "vlr:init")
    p = init_vlr(cfg, len(vocab), rng)
    opt = AdamState(
        lr=cfg.vlr_lr_image,
        beta1=cfg.adam_beta1,
        beta2=cfg.adam_beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.vlr_l2,
        group_lr={"img.": cfg.vlr_lr_image, "txt.": cfg.vlr_lr_text},
    )
    schedule = LrSchedule(factor=cfg.vlr_factor, milestones=(cfg.vlr_milestone,))
    history = []
    for epoch in range(cfg.vlr_epochs):
        opt.lr_scale = schedule.scale(epoch)
        epoch_rng = derived_rng(cfg.seed, f"vlr:epoch:{epoch}")
        losses = []
        for batch in make_vlr_batches(train, vocab, cfg.vlr_batch, cfg.num_classes, epoch_rng):
            losses.append(sum(vlr_pretrain_step(batch, p, opt, clip=cfg.grad_clip)))
        mean = float(np.mean(losses)) if losses else float("nan")
        history.append(mean)
        if log:
            log(f"vlr epoch {epoch}: loss {mean:.4f} lr_scale {opt.lr_scale:g}")
    return p, history


def evaluate_matching(samples, vocab: Vocabulary, p: VlrParams) -> float:
    """Accuracy over one matched and one derangement-mismatched pair each."""
    with ad.no_grad():
        contexts = []
        reports = []
        for s in samples:
            maps = [enc.encode_image(view, p.image) for view in s.views]
            c_pred = disease_logits(maps, p)
            contexts.append(image_context(maps, c_pred, p).data)
            reports.append(enc.encode_text(vocab.encode(s.tokens()), p.report_encoder).data)
    correct = 0
    n = len(samples)
    for i in range(n):
        matched = float(contexts[i] @ reports[i])
        swapped = float(contexts[i] @ reports[(i + 1) % n])
        correct += int(matched > 0.0) + int(swapped <= 0.0)
    return correct / (2 * n)


def evaluate_disease_auc(samples, p: VlrParams, num_classes: int) -> float:
    from .metrics import rank_auc

    with ad.no_grad():
        scores = []
        for s in samples:
            maps = [enc.encode_image(view, p.image) for view in s.views]
            scores.append(disease_logits(maps, p).data)
    scores = np.stack(scores)
    aucs = []
    for k in range(num_classes):
        y = np.array([1 if k in s.labels else 0 for s in samples])
        if y.min() == y.max():
            continue
        aucs.append(rank_auc(scores[:, k], y))
    return float(np.mean(aucs)) if aucs else float("nan")


# ---------------------------------------------------------------------------
# report pool and retrieval


@dataclass
class ReportPool:
    ids: list
    embeddings: np.ndarray  # (n, d)
    sentences: list         # token payload per report
    frozen: bool = True


@dataclass
class RetrievedReport:
    report_id: int
    score: float            # p_vl
    embedding: np.ndarray
    sentences: list


def build_report_pool(train, vocab: Vocabulary, p: VlrParams) -> ReportPool:
    """Embed every training report with the frozen f_l, ordered by id."""
    if not train:
        raise ad.ValidationError("cannot build a report pool from an empty corpus")
    entries = sorted(train, key=lambda s: s.id)
    with ad.no_grad():
        embs = [
            enc.encode_text(vocab.encode(s.tokens()), p.report_encoder).data for s in entries
        ]
    return ReportPool(
        ids=[s.id for s in entries],
        embeddings=np.stack(embs),
        sentences=[s.sentences for s in entries],
        frozen=True,
    )


def retrieve_reports(v: np.ndarray, pool: ReportPool, k_r: int, exclude_id=None):
    """Exact top-k_r by p_vl, ties broken by ascending report id."""
    if not pool.frozen:
        raise ad.ValidationError("report pool must be frozen before retrieval")
    v = v.data if isinstance(v, Tensor) else np.asarray(v)
    candidates = [
        i for i, rid in enumerate(pool.ids) if exclude_id is None or rid != exclude_id
    ]
    if k_r > len(candidates):
        raise ad.ValidationError(
            f"k_r={k_r} exceeds pool size {len(candidates)} after exclusion"
        )
    dots = pool.embeddings @ v
    ranked = sorted(candidates, key=lambda i: (-dots[i], pool.ids[i]))[:k_r]
    return [
        RetrievedReport(
            report_id=pool.ids[i],
            score=float(_sigmoid_scalar(dots[i])),
            embedding=pool.embeddings[i],
            sentences=pool.sentences[i],
        )
        for i in ranked
    ]


def _sigmoid_scalar(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


def save_pool_jsonl(pool: ReportPool, path: str):
    with open(path, "w") as fh:
        for rid, emb, sents in zip(pool.ids, pool.embeddings, pool.sentences):
            fh.write(
                json.dumps({"id": rid, "embedding": emb.tolist(), "tokens": sents}, sort_keys=True)
                + "\n"
            )


def load_pool_jsonl(path: str) -> ReportPool:
    ids, embs, sentences = [], [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            ids.append(rec["id"])
            embs.append(np.array(rec["embedding"], dtype=np.float64))
            sentences.append([list(s) for s in rec["tokens"]])
    return ReportPool(ids=ids, embeddings=np.stack(embs), sentences=sentences, frozen=True)


# ---------------------------------------------------------------------------
# keywords and the report template


def extract_keywords(token_lists, dictionary, n: int):
    """Top-n dictionary words by case-insensitive exact-token count.

    Words that never occur are not returned; ties resolve in dictionary
    order.
    """
    counts = {w: 0 for w in dictionary}
    lowered = {w.lower(): w for w in dictionary}
    for tokens in token_lists:
        for tok in tokens:
            hit = lowered.get(tok.lower())
            if hit is not None:
                counts[hit] += 1
    order = {w: i for i, w in enumerate(dictionary)}
    found = [w for w in dictionary if counts[w] > 0]
    found.sort(key=lambda w: (-counts[w], order[w]))
    return found[:n]


def top_m_diseases(c_pred, m: int):
    """Indices of the m highest-probability classes, ties ascending index."""
    logits = c_pred.data if isinstance(c_pred, Tensor) else np.asarray(c_pred)
    return sorted(range(len(logits)), key=lambda k: (-logits[k], k))[:m]


@dataclass
class TemplateParams:
    """Multi-query attention bundle for one template level."""

    mqa: attn.MultiQueryParams
    disease_embed: Tensor  # (c, d) learnable table, shared across levels
    token_embed: Tensor    # frozen token embedding table
    n_keywords: int
    m_diseases: int


def template_queries(keyword_ids, disease_ids, tp: TemplateParams, d: int) -> attn.QuerySet:
    keyword_embs = (
        ad.embedding_lookup(tp.token_embed, keyword_ids) if keyword_ids else None
    )
    disease_embs = ad.embedding_lookup(tp.disease_embed, disease_ids)
    return attn.build_query_set(keyword_embs, disease_embs, tp.n_keywords, d)


def report_template(
    v: Tensor, retrieved_embeddings, keyword_ids, disease_ids, tp: TemplateParams,
    return_weights: bool = False,
):
    """r_s: multi-query attention over retrieved report embeddings."""
    d = v.shape[0]
    queries = template_queries(keyword_ids, disease_ids, tp, d)
    values = [
        e if isinstance(e, Tensor) else Tensor(e) for e in retrieved_embeddings
    ]
    return attn.multi_query_attention(queries, v, values, tp.mqa, return_weights=return_weights)
