"""Synthetic corpus generator: multi-view images with class-specific stamps
paired with template-built findings reports.

The world has 8 finding classes in a fixed anatomical order. Each class
owns a 6x6 image stamp at a fixed region, a sentence skeleton with a
3-way slot (so 3 templates per class, all containing the class keyword),
and an organ. Reports list one sentence per active class in anatomical
order, then 1-2 normal sentences about unaffected organs; the normal-organ
choice is a deterministic function of the label set so that sentence
co-occurrence carries real signal for the retrieval pretraining tasks.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import Config, ConfigError, derived_rng

PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

STAMP_SIZE = 6
STAMP_AMPLITUDE = 1.5
VIEW_JITTER = (1, 2)  # fixed shift of every stamp in the second view

NO_FINDING_RATE = 0.25
SIBLING_RATE = 0.6  # chance the sibling class co-occurs; E[active] = 0.75 * 1.6 = 1.2

# per-style temporal register closing every sentence; the third token of each
# template triple alongside the slot word
STYLE_QUALIFIERS = ("currently", "newly", "persistently")


@dataclass(frozen=True)
class DiseaseClass:
    name: str
    organ: str
    region: tuple  # top-left corner of the stamp
    stamp_rows: tuple  # 6 strings of '.'/'#'
    skeleton: tuple  # tokens, one entry is the literal "{}" slot
    slot_options: tuple  # 3 options
    scoring_tokens: tuple  # tokens whose presence scores this class

    def sentence(self, slot_index: int) -> list:
        return [self.slot_options[slot_index] if tok == "{}" else tok for tok in self.skeleton]

    def stamp(self) -> np.ndarray:
        return np.array(
            [[STAMP_AMPLITUDE if ch == "#" else 0.0 for ch in row] for row in self.stamp_rows]
        )


@dataclass(frozen=True)
class SyntheticWorld:
    classes: tuple
    organs: tuple  # fixed order used when picking normal sentences
    normal_templates: dict  # organ -> (skeleton with "{}" slot, 3 slot options)
    sibling: dict  # class index -> comorbid class index
    domain_terms: tuple  # candidate tokens for the keyword dictionary

    @property
    def class_keywords(self):
        return [c.name for c in self.classes]

    def normal_sentence(self, organ: str, style: int) -> list:
        skeleton, options = self.normal_templates[organ]
        return [options[style] if tok == "{}" else tok for tok in skeleton]


def default_world() -> SyntheticWorld:
    classes = (
        DiseaseClass(
            "cardiomegaly", "heart", (13, 7),
            ("..##..", "..##..", "######", "######", "..##..", "..##.."),
            ("the", "heart", "is", "{}", "enlarged", "consistent", "with", "cardiomegaly"),
            ("mildly", "moderately", "severely"),
            ("cardiomegaly", "enlarged"),
        ),
        DiseaseClass(
            "edema", "lungs", (6, 16),
            ("######", "#....#", "#....#", "#....#", "#....#", "######"),
            ("there", "is", "{}", "vascular", "congestion", "with", "interstitial", "edema"),
            ("mild", "moderate", "severe"),
            ("edema", "congestion"),
        ),
        DiseaseClass(
            "pneumonia", "lungs", (3, 3),
            ("##....", ".##...", "..##..", "...##.", "....##", ".....#"),
            ("patchy", "{}", "airspace", "opacity", "suggesting", "pneumonia"),
            ("left", "right", "bilateral"),
            ("pneumonia", "airspace"),
        ),
        DiseaseClass(
            "atelectasis", "lungs", (21, 5),
            ("......", "......", "######", "######", "......", "......"),
            ("{}", "basilar", "atelectasis", "is", "noted"),
            ("left", "right", "bibasilar"),
            ("atelectasis", "basilar"),
        ),
        DiseaseClass(
            "effusion", "pleura", (23, 19),
            ("..##..", "..##..", "..##..", "..##..", "..##..", "..##.."),
            ("a", "{}", "pleural", "effusion", "is", "present"),
            ("small", "moderate", "large"),
            ("effusion", "present"),
        ),
        DiseaseClass(
            "pneumothorax", "pleura", (2, 22),
            ("#.#.#.", ".#.#.#", "#.#.#.", ".#.#.#", "#.#.#.", ".#.#.#"),
            ("there", "is", "a", "{}", "apical", "pneumothorax"),
            ("tiny", "small", "moderate"),
            ("pneumothorax", "apical"),
        ),
        DiseaseClass(
            "scoliosis", "spine", (11, 13),
            ("#.....", "##....", "###...", "####..", "#####.", "######"),
            ("{}", "curvature", "of", "the", "thoracic", "spine", "indicates", "scoliosis"),
            ("mild", "moderate", "marked"),
            ("scoliosis", "curvature"),
        ),
        DiseaseClass(
            "fracture", "bones", (17, 24),
            ("##..##", "##..##", "......", "......", "##..##", "##..##"),
            ("an", "{}", "fracture", "of", "the", "posterior", "rib", "is", "identified"),
            ("acute", "old", "healing"),
            ("fracture", "rib"),
        ),
    )
    normal_templates = {
        "heart": (("the", "heart", "size", "{}", "within", "normal", "limits"),
                  ("is", "appears", "remains")),
        "mediastinum": (("the", "mediastinal", "contours", "are", "{}", "and", "unremarkable"),
                        ("stable", "unchanged", "midline")),
        "lungs": (("the", "lungs", "are", "{}", "without", "focal", "consolidation"),
                  ("clear", "expanded", "aerated")),
        "pleura": (("no", "pleural", "fluid", "or", "{}", "air", "collection", "is", "seen"),
                   ("abnormal", "residual", "loculated")),
        "spine": (("vertebral", "body", "heights", "and", "alignment", "are", "{}"),
                  ("preserved", "maintained", "anatomic")),
        "bones": (("the", "visualized", "osseous", "structures", "appear", "{}"),
                  ("intact", "unremarkable", "benign")),
    }
    domain_terms = tuple(c.name for c in classes) + (
        "heart", "lungs", "pleural", "spine", "rib", "mediastinal", "osseous",
        "vascular", "airspace", "basilar", "apical", "opacity", "consolidation",
        "curvature", "interstitial", "congestion",
    )
    return SyntheticWorld(
        classes=classes,
        organs=("heart", "mediastinum", "lungs", "pleura", "spine", "bones"),
        normal_templates=normal_templates,
        sibling={0: 1, 1: 0, 2: 4, 4: 2, 3: 5, 5: 3, 6: 7, 7: 6},
        domain_terms=domain_terms,
    )


@dataclass
class CorpusSample:
    id: int
    views: list  # num_views arrays of shape (G, G)
    sentences: list  # list of token lists
    labels: list  # sorted active class indices

    def tokens(self) -> list:
        return [tok for sent in self.sentences for tok in sent]


def _sample_labels(rng: np.random.Generator, world: SyntheticWorld) -> list:
    if rng.uniform() < NO_FINDING_RATE:
        return []
    primary = int(rng.integers(len(world.classes)))
    labels = {primary}
    if rng.uniform() < SIBLING_RATE:
        labels.add(world.sibling[primary])
    return sorted(labels)


def _normal_organs(labels, n_normal: int, world: SyntheticWorld) -> list:
    affected = {world.classes[k].organ for k in labels}
    unaffected = [o for o in world.organs if o not in affected]
    start = sum(labels) % len(unaffected)
    return [unaffected[(start + j) % len(unaffected)] for j in range(n_normal)]


def make_sample(seed: int, index: int, world: SyntheticWorld, cfg: Config) -> CorpusSample:
    """Render one subject; deterministic in (seed, index) alone.

    One style index is drawn per subject and shared by every sentence, the
    way a report keeps a consistent severity register; this is what makes
    same-report sentences mutually predictive.
    """
    rng = derived_rng(seed, f"sample:{index}")
    labels = _sample_labels(rng, world)
    style = int(rng.integers(3))
    qualifier = STYLE_QUALIFIERS[style]
    sentences = []
    for k in labels:
        sentences.append(world.classes[k].sentence(style) + [qualifier])
    n_normal = 1 + int(rng.uniform() < 0.5)
    for organ in _normal_organs(labels, n_normal, world):
        sentences.append(world.normal_sentence(organ, style) + [qualifier])
    views = []
    for v in range(cfg.num_views):
        shift = (0, 0) if v == 0 else VIEW_JITTER
        noise = rng.normal(0.0, cfg.noise_sigma, size=(cfg.image_size, cfg.image_size))
        view = noise
        for k in labels:
            cls = world.classes[k]
            r, c = cls.region[0] + shift[0], cls.region[1] + shift[1]
            view[r : r + STAMP_SIZE, c : c + STAMP_SIZE] += cls.stamp()
        views.append(view)
    return CorpusSample(id=index, views=views, sentences=sentences, labels=list(labels))


def generate_corpus(seed: int, n_samples: int, world: SyntheticWorld, cfg: Config) -> list:
    if n_samples < 10:
        raise ConfigError(f"corpus needs at least 10 samples, got {n_samples}")
    return [make_sample(seed, i, world, cfg) for i in range(n_samples)]


def split_corpus(corpus, ratios, seed: int):
    """Seeded shuffle, then partition into train/val/test."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    order = list(range(len(corpus)))
    derived_rng(seed, "split").shuffle(order)
    n = len(corpus)
    n_train = int(ratios[0] * n)
    n_val = int(ratios[1] * n)
    train = [corpus[i] for i in order[:n_train]]
    val = [corpus[i] for i in order[n_train : n_train + n_val]]
    test = [corpus[i] for i in order[n_train + n_val :]]
    return train, val, test


@dataclass
class Vocabulary:
    id_to_token: list
    token_to_id: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_to_id:
            self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens) -> list:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list:
        return [self.id_to_token[i] for i in ids]

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id


def build_vocab(train_split, min_count: int = 3) -> Vocabulary:
    """Tokens appearing strictly more than ``min_count`` times in training."""
    counts: dict = {}
    for sample in train_split:
        for tok in sample.tokens():
            counts[tok] = counts.get(tok, 0) + 1
    kept = sorted(t for t, c in counts.items() if c > min_count)
    return Vocabulary(id_to_token=list(SPECIAL_TOKENS) + kept)


def build_keyword_dictionary(
    train_split, size: int, world: SyntheticWorld, vocab: Vocabulary | None = None
) -> list:
    """Most frequent domain terms in the training split, ties alphabetical."""
    candidates = [t for t in world.domain_terms if vocab is None or t in vocab]
    if size > len(candidates):
        raise ConfigError(f"dictionary size {size} exceeds {len(candidates)} domain terms")
    counts = {t: 0 for t in candidates}
    for sample in train_split:
        for tok in sample.tokens():
            if tok in counts:
                counts[tok] += 1
    ranked = sorted(candidates, key=lambda t: (-counts[t], t))
    return ranked[:size]


# ---------------------------------------------------------------------------
# serialization


def save_corpus(corpus, path: str):
    with open(path, "w") as fh:
        for s in corpus:
            fh.write(
                json.dumps(
                    {
                        "id": s.id,
                        "views": [v.tolist() for v in s.views],
                        "sentences": s.sentences,
                        "labels": s.labels,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_corpus(path: str) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            out.append(
                CorpusSample(
                    id=rec["id"],
                    views=[np.array(v, dtype=np.float64) for v in rec["views"]],
                    sentences=[list(s) for s in rec["sentences"]],
                    labels=list(rec["labels"]),
                )
            )
    return out


def save_json(obj, path: str):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)


def load_json(path: str):
    with open(path) as fh:
        return json.load(fh)
