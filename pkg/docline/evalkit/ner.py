"""BIO token classification on top of the fused text features.

A word's tag goes to its first token; its later tokens continue the entity
(`B-X` becomes `I-X`). `[CLS]` carries no label. Entities are scored by exact span
match, per type and micro-averaged over types.
"""

import logging
import math
import typing as t

import numpy as np
from pydantic import BaseModel, Field, field_validator

from docline.doclib.batch import EncodedDocument
from docline.doclib.ocr import Document
from docline.encoders.config import ModelConfig
from docline.errors import DataError
from docline.evalkit.features import forward_clean
from docline.numkit.functional import cross_entropy_mean, linear
from docline.numkit.optim import AdamState, ScheduleConfig, adam_step, schedule_lr
from docline.numkit.tensor import Tensor
from docline.toolbox.threads import map_in_threads

OUTSIDE = "O"
IGNORE = -1


class TagSet(BaseModel):
    entity_types: list[str]

    @field_validator("entity_types")
    @classmethod
    def _distinct(cls, value: list[str]) -> list[str]:
        if len(set(value)) != len(value) or any(not name or "-" in name for name in value):
            raise ValueError(f"entity types must be distinct, non-empty and without '-': {value}")
        return sorted(value)

    @classmethod
    def from_tags(cls, tags: t.Iterable[str]) -> "TagSet":
        types = set()
        for tag in tags:
            if tag == OUTSIDE:
                continue
            prefix, _, name = tag.partition("-")
            if prefix not in ("B", "I") or not name:
                raise DataError(f"tag {tag!r} is not O, B-<type> or I-<type>")
            types.add(name)
        return cls(entity_types=sorted(types))

    @property
    def tags(self) -> list[str]:
        return [OUTSIDE] + [f"{prefix}-{name}" for name in self.entity_types for prefix in ("B", "I")]

    @property
    def size(self) -> int:
        return len(self.tags)

    def index(self, tag: str) -> int:
        try:
            return self.tags.index(tag)
        except ValueError as e:
            raise DataError(f"tag {tag!r} outside the declared set {self.tags}") from e


def token_labels(doc: Document, encoded: EncodedDocument, tagset: TagSet) -> np.ndarray:
    words = doc.words
    labels = np.full(encoded.length, IGNORE, dtype=np.int64)
    previous_word = -1
    for position, word_index in enumerate(encoded.word_index):
        if word_index < 0:
            continue
        tag = words[word_index].tag or OUTSIDE
        if word_index == previous_word and tag.startswith("B-"):
            tag = "I-" + tag[2:]
        labels[position] = tagset.index(tag)
        previous_word = int(word_index)
    return labels


def bio_spans(tags: t.Sequence[str]) -> set[tuple[str, int, int]]:
    """Entity spans `(type, start, end)`, end exclusive. An `I-X` that does not continue an X entity opens one."""
    spans = set()
    current: t.Optional[tuple[str, int]] = None
    for position, tag in enumerate([*tags, OUTSIDE]):
        prefix, _, name = tag.partition("-")
        continues = prefix == "I" and current is not None and current[0] == name
        if current is not None and not continues:
            spans.add((current[0], current[1], position))
            current = None
        if prefix in ("B", "I") and not continues:
            current = (name, position)
    return spans


class TypeScores(BaseModel):
    gold: int = 0
    predicted: int = 0
    correct: int = 0

    @property
    def precision(self) -> float:
        return self.correct / self.predicted if self.predicted else 0.0

    @property
    def recall(self) -> float:
        return self.correct / self.gold if self.gold else 0.0

    @property
    def f1(self) -> t.Optional[float]:
        if self.gold == 0:
            return None
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)


class EntityScores(BaseModel):
    overall: TypeScores = Field(default_factory=TypeScores)
    per_type: dict[str, TypeScores] = Field(default_factory=dict)

    @property
    def f1(self) -> t.Optional[float]:
        return self.overall.f1

    @property
    def degenerate(self) -> bool:
        return self.overall.gold == 0

    def summary(self) -> dict[str, t.Any]:
        return {
            "precision": self.overall.precision,
            "recall": self.overall.recall,
            "f1": self.f1,
            "per_type": {name: {"precision": s.precision, "recall": s.recall, "f1": s.f1, "gold": s.gold}
                         for name, s in sorted(self.per_type.items())},
        }


def entity_scores(gold: t.Sequence[t.Sequence[str]], predicted: t.Sequence[t.Sequence[str]]) -> EntityScores:
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold sequences but {len(predicted)} predictions")
    scores = EntityScores()
    for gold_tags, predicted_tags in zip(gold, predicted):
        if len(gold_tags) != len(predicted_tags):
            raise ValueError(f"sequence lengths differ: {len(gold_tags)} gold, {len(predicted_tags)} predicted")
        gold_spans, predicted_spans = bio_spans(gold_tags), bio_spans(predicted_tags)
        for spans, field in ((gold_spans, "gold"), (predicted_spans, "predicted"), (gold_spans & predicted_spans, "correct")):
            for name, _, _ in spans:
                per_type = scores.per_type.setdefault(name, TypeScores())
                setattr(per_type, field, getattr(per_type, field) + 1)
                setattr(scores.overall, field, getattr(scores.overall, field) + 1)
    if scores.degenerate:
        logging.warning("Entity F1 is undefined: the gold tags contain no entity (degenerate corpus)")
    return scores


class FinetuneConfig(BaseModel):
    """Head training schedule: linear warmup and decay, as in pre-training. Only the
    head learns; the encoder features stay frozen.
    """

    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=8, ge=1)
    peak_lr: float = Field(default=5e-2, gt=0.0)
    warmup_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-2, ge=0.0)
    init_std: float = Field(default=0.02, gt=0.0)
    seed: int = Field(default=0, ge=0)

    def schedule(self, steps_per_epoch: int) -> ScheduleConfig:
        return ScheduleConfig(
            peak_lr=self.peak_lr,
            total_steps=self.epochs * steps_per_epoch,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
        )


def train_linear_head(
    features: t.Sequence[np.ndarray],
    labels: t.Sequence[np.ndarray],
    classes: int,
    cfg: FinetuneConfig,
    prefix: str,
) -> tuple[dict[str, Tensor], list[float]]:
    """Fit `prefix.w`, `prefix.b` on frozen per-example features with mini-batch Adam.

    `features[i]` is `[n_i, d]` and `labels[i]` is `[n_i]`, with IGNORE rows skipped.
    Returns the head and the loss of every step.
    """
    width = features[0].shape[1]
    rng = np.random.default_rng(cfg.seed)
    head = {
        f"{prefix}.w": Tensor(rng.normal(0.0, cfg.init_std, size=(width, classes)), requires_grad=True),
        f"{prefix}.b": Tensor(np.zeros(classes), requires_grad=True),
    }
    steps_per_epoch = math.ceil(len(features) / cfg.batch_size)
    schedule = cfg.schedule(steps_per_epoch)
    state = AdamState.zeros_like(head)
    losses: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(features))
        for start in range(0, len(order), cfg.batch_size):
            picked = order[start:start + cfg.batch_size]
            rows = np.concatenate([features[i][labels[i] != IGNORE] for i in picked])
            targets = np.concatenate([labels[i][labels[i] != IGNORE] for i in picked])
            if targets.size:
                loss = cross_entropy_mean(linear(Tensor(rows), head[f"{prefix}.w"], head[f"{prefix}.b"]), targets)
                loss.backward()
                grads = {name: p.grad for name, p in head.items() if p.grad is not None}
                head, state = adam_step(head, grads, state, schedule_lr(step, schedule), schedule.weight_decay,
                                        no_decay={f"{prefix}.b"})
                losses.append(loss.item())
            step += 1
    return head, losses


def head_logits(features: np.ndarray, head: t.Mapping[str, Tensor], prefix: str) -> np.ndarray:
    return linear(Tensor(features), head[f"{prefix}.w"], head[f"{prefix}.b"]).numpy()


class TokenClassifierResult(BaseModel):
    tagset: TagSet
    head: dict[str, t.Any]
    losses: list[float]
    train_scores: EntityScores
    eval_scores: t.Optional[EntityScores] = None


class TaggedDocument(t.NamedTuple):
    features: np.ndarray
    labels: np.ndarray


def tagged_features(
    params: t.Mapping[str, Tensor], cfg: ModelConfig, docs: t.Sequence[Document], tagset: TagSet,
    threads: t.Optional[int] = None,
) -> list[TaggedDocument]:
    def one(doc: Document) -> TaggedDocument:
        encoded, forward = forward_clean(params, cfg, doc)
        return TaggedDocument(features=forward.fused_text.numpy(), labels=token_labels(doc, encoded, tagset))

    return map_in_threads(one, list(docs), threads)


def predicted_tags(items: t.Sequence[TaggedDocument], head: t.Mapping[str, Tensor], tagset: TagSet) -> list[list[str]]:
    out = []
    for item in items:
        keep = item.labels != IGNORE
        best = np.argmax(head_logits(item.features[keep], head, "ner"), axis=1)
        out.append([tagset.tags[i] for i in best])
    return out


def gold_tags(items: t.Sequence[TaggedDocument], tagset: TagSet) -> list[list[str]]:
    return [[tagset.tags[i] for i in item.labels[item.labels != IGNORE]] for item in items]


def finetune_token_classifier(
    params: t.Mapping[str, Tensor],
    cfg: ModelConfig,
    train_docs: t.Sequence[Document],
    tagset: TagSet,
    finetune: t.Optional[FinetuneConfig] = None,
    eval_docs: t.Optional[t.Sequence[Document]] = None,
    threads: t.Optional[int] = None,
) -> TokenClassifierResult:
    """Train a linear BIO head over frozen fused text features and score it by entity F1."""
    finetune = finetune or FinetuneConfig()
    if not train_docs:
        raise DataError("token classification needs at least one training document")
    train = tagged_features(params, cfg, train_docs, tagset, threads)
    head, losses = train_linear_head(
        [item.features for item in train], [item.labels for item in train], tagset.size, finetune, "ner"
    )
    train_scores = entity_scores(gold_tags(train, tagset), predicted_tags(train, head, tagset))
    eval_scores = None
    if eval_docs:
        held_out = tagged_features(params, cfg, eval_docs, tagset, threads)
        eval_scores = entity_scores(gold_tags(held_out, tagset), predicted_tags(held_out, head, tagset))
    logging.info(f"Token classifier: train F1 {train_scores.f1}, eval F1 {eval_scores.f1 if eval_scores else None}")
    return TokenClassifierResult(
        tagset=tagset,
        head={name: p.numpy() for name, p in head.items()},
        losses=losses,
        train_scores=train_scores,
        eval_scores=eval_scores,
    )
