"""Multiple-choice log-likelihood scoring over arbitrary item sets.

Each choice is scored as a teacher-forced continuation of the rendered
question context in a single forward pass; both the raw log-probability sum
and its per-token mean are reported, with argmax ties broken toward the
lowest choice index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Tokenizer
from .errors import ConfigurationError, DomainError
from .model import Model, model_forward

QA_TEMPLATE = "qa"


@dataclass
class ChoiceItem:
    question: str
    choices: list[str]
    gold: int

    def __post_init__(self):
        if len(self.choices) < 2:
            raise ConfigurationError("choice items need at least 2 choices")
        if not 0 <= self.gold < len(self.choices):
            raise ConfigurationError(f"gold index {self.gold} out of range")


def load_items(path: str | Path) -> list[ChoiceItem]:
    """JSON Lines: {question, choices[], gold} per line."""
    items = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            items.append(ChoiceItem(question=doc["question"],
                                    choices=list(doc["choices"]),
                                    gold=int(doc["gold"])))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigurationError(f"{path}:{line_no}: bad item ({exc})") from exc
    if not items:
        raise ConfigurationError(f"{path}: no items")
    return items


def render_context(question: str, template: str = QA_TEMPLATE) -> str:
    if template != QA_TEMPLATE:
        raise ConfigurationError(f"unknown template {template!r}")
    return f"Question: {question}\nAnswer:"


def score_choice(model: Model, context_tokens: np.ndarray, choice_tokens: np.ndarray,
                 *, tau: float, adaptive: bool = False) -> tuple[float, float]:
    """(raw, normalized) continuation scores in one teacher-forced pass.

    raw = sum of log p(choice_j | context, choice_<j); normalized divides by
    the choice length.
    """
    context_tokens = np.asarray(context_tokens, dtype=np.int64)
    choice_tokens = np.asarray(choice_tokens, dtype=np.int64)
    n_ctx, n_choice = context_tokens.size, choice_tokens.size
    if n_ctx < 1 or n_choice < 1:
        raise DomainError("score_choice needs nonempty context and choice")
    if n_ctx + n_choice > model.config.context:
        raise ConfigurationError(
            f"context+choice is {n_ctx + n_choice} tokens, beyond {model.config.context}")
    tokens = np.concatenate([context_tokens, choice_tokens])
    result = model_forward(model, tokens[:-1], tau=tau, adaptive=adaptive)
    logits = result.logits.data
    shift = logits - logits.max(axis=1, keepdims=True)
    log_probs = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    rows = np.arange(n_ctx - 1, n_ctx - 1 + n_choice)
    raw = float(log_probs[rows, choice_tokens].sum())
    return raw, raw / n_choice


@dataclass
class ItemRecord:
    index: int
    gold: int
    pick_raw: int | None
    pick_norm: int | None
    raw_scores: list[float]
    norm_scores: list[float]
    skipped: bool = False

    def to_json(self) -> dict:
        return {"index": self.index, "gold": self.gold, "pick_raw": self.pick_raw,
                "pick_norm": self.pick_norm, "raw_scores": self.raw_scores,
                "norm_scores": self.norm_scores, "skipped": self.skipped}


@dataclass
class ChoiceReport:
    acc_raw: float
    acc_norm: float
    n: int
    skipped: int
    records: list[ItemRecord]

    def to_json(self) -> dict:
        return {"acc_raw": self.acc_raw, "acc_norm": self.acc_norm, "n": self.n,
                "skipped": self.skipped,
                "records": [r.to_json() for r in self.records]}


def evaluate_choices(model: Model, items: list[ChoiceItem], tokenizer: Tokenizer, *,
                     tau: float, template: str = QA_TEMPLATE,
                     adaptive: bool = False) -> ChoiceReport:
    """Raw and length-normalized accuracy over an item set.

    Choice text is scored with one prepended space. Items whose rendered
    context plus longest choice overflows the context window are skipped
    and counted; accuracies are over the scored items.
    """
    if not items:
        raise ConfigurationError("evaluate_choices needs at least one item")
    records: list[ItemRecord] = []
    hit_raw = hit_norm = scored = 0
    for index, item in enumerate(items):
        ctx = np.asarray(tokenizer.encode(render_context(item.question, template)),
                         dtype=np.int64)
        choice_ids = [np.asarray(tokenizer.encode(" " + c), dtype=np.int64)
                      for c in item.choices]
        limit = model.config.context
        if any(ctx.size + ids.size > limit or ids.size == 0 for ids in choice_ids) \
                or ctx.size == 0:
            records.append(ItemRecord(index=index, gold=item.gold, pick_raw=None,
                                      pick_norm=None, raw_scores=[], norm_scores=[],
                                      skipped=True))
            continue
        raw_scores, norm_scores = [], []
        for ids in choice_ids:
            raw, norm = score_choice(model, ctx, ids, tau=tau, adaptive=adaptive)
            raw_scores.append(raw)
            norm_scores.append(norm)
        pick_raw = int(np.argmax(raw_scores))    # first max: ties go low
        pick_norm = int(np.argmax(norm_scores))
        scored += 1
        hit_raw += pick_raw == item.gold
        hit_norm += pick_norm == item.gold
        records.append(ItemRecord(index=index, gold=item.gold, pick_raw=pick_raw,
                                  pick_norm=pick_norm, raw_scores=raw_scores,
                                  norm_scores=norm_scores))
    skipped = len(items) - scored
    if scored == 0:
        raise DomainError("every item overflowed the context window")
    return ChoiceReport(acc_raw=hit_raw / scored, acc_norm=hit_norm / scored,
                        n=len(items), skipped=skipped, records=records)
