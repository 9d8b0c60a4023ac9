"""Downstream fine-tuning: intent, dialogue act, DST classifiers and response selection.

Every task puts at most a linear head on the pooled last-layer representation
and trains the whole encoder with it (unless ``freeze_encoder`` is set).
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from . import seeding
from .checkpoint import VOCAB, load_into, load_tensors, read_manifest, save_checkpoint
from .config import FinetuneConfig
from .corpus import USER, Utterance
from .encoder import Encoder, EncoderConfig, cosine_similarity, freeze
from .inference import represent
from .metrics import MetricReport, dst_metrics, f1_metrics, intent_metrics, ranking_report
from .probe import sample_distractors
from .tokenizer import Vocab

logger = logging.getLogger(__name__)

OOD_LABEL = "oos"
NONE_VALUE = "none"
POOL_SIZE = 100


class FinetuneError(ValueError):
    pass


# ------------------------------------------------------------------- examples

@dataclass(frozen=True)
class IntentExample:
    utterance: str
    label: int
    is_ood: bool = False


@dataclass(frozen=True)
class ActExample:
    history: tuple[Utterance, ...]
    acts: tuple[int, ...]  # 0/1 per act type


@dataclass(frozen=True)
class DstExample:
    history: tuple[Utterance, ...]
    labels: dict[str, int] = field(hash=False)


@dataclass(frozen=True)
class RsExample:
    history: tuple[Utterance, ...]
    gold_response: Utterance


@dataclass
class LabelSpace:
    """Label inventory fixed at training time and stored with the head."""

    task: str
    labels: list[str] = field(default_factory=list)          # intent classes or act names
    ontology: dict[str, list[str]] = field(default_factory=dict)  # dst: slot -> values

    @property
    def ood_index(self) -> Optional[int]:
        return self.labels.index(OOD_LABEL) if OOD_LABEL in self.labels else None

    def to_json(self) -> dict[str, Any]:
        return {"task": self.task, "labels": self.labels, "ontology": self.ontology}


def _utts(raw: Sequence[dict[str, str]]) -> tuple[Utterance, ...]:
    return tuple(Utterance(u["role"], u["text"]) for u in raw)


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FinetuneError(f"{path}: line {lineno}: {exc.msg}") from None
    if not records:
        raise FinetuneError(f"{path}: no records")
    return records


def label_space(task: str, records: Sequence[dict[str, Any]]) -> LabelSpace:
    if task == "intent":
        names = sorted({r["label"] for r in records} - {OOD_LABEL})
        if any(r["label"] == OOD_LABEL for r in records):
            names.append(OOD_LABEL)  # OOD is the last class
        return LabelSpace(task, names)
    if task == "act":
        return LabelSpace(task, sorted({a for r in records for a in r["acts"]}))
    if task == "dst":
        ontology: dict[str, set[str]] = {}
        for r in records:
            for slot, value in r["slots"].items():
                ontology.setdefault(slot, {NONE_VALUE}).add(value)
        return LabelSpace(task, ontology={s: [NONE_VALUE, *sorted(v - {NONE_VALUE})] for s, v in sorted(ontology.items())})
    return LabelSpace(task)


def to_examples(task: str, records: Sequence[dict[str, Any]], space: LabelSpace) -> list:
    out: list = []
    for i, r in enumerate(records):
        if task == "intent":
            if r["label"] not in space.labels:
                raise FinetuneError(f"record {i}: label {r['label']!r} outside the label space")
            out.append(IntentExample(r["text"], space.labels.index(r["label"]), r["label"] == OOD_LABEL))
        elif task == "act":
            unknown = set(r["acts"]) - set(space.labels)
            if unknown:
                raise FinetuneError(f"record {i}: unknown acts {sorted(unknown)}")
            out.append(ActExample(_utts(r["history"]), tuple(int(a in r["acts"]) for a in space.labels)))
        elif task == "dst":
            if set(r["slots"]) != set(space.ontology):
                raise FinetuneError(f"record {i}: slots differ from the ontology")
            labels = {}
            for slot, values in space.ontology.items():
                value = r["slots"][slot]
                if value not in values:
                    raise FinetuneError(f"record {i}: value {value!r} not in ontology for {slot}")
                labels[slot] = values.index(value)
            out.append(DstExample(_utts(r["history"]), labels))
        elif task == "rs":
            out.append(RsExample(_utts(r["history"]), Utterance(**r["response"])))
        else:
            raise FinetuneError(f"unknown task {task!r}")
    return out


def inputs_of(example: Any) -> tuple[Utterance, ...]:
    if isinstance(example, IntentExample):
        return (Utterance(USER, example.utterance),)
    return example.history


def few_shot(examples: Sequence[IntentExample], shots: int, rng: np.random.Generator) -> list[IntentExample]:
    """Keep ``shots`` examples per class, chosen by a seeded shuffle."""
    taken: dict[int, int] = {}
    out = []
    for i in rng.permutation(len(examples)):
        ex = examples[int(i)]
        if taken.get(ex.label, 0) < shots:
            taken[ex.label] = taken.get(ex.label, 0) + 1
            out.append(ex)
    return out


# ---------------------------------------------------------------------- heads

class TaskHead(nn.Module):
    """Linear map(s) from the pooled representation to task logits."""

    def __init__(self, space: LabelSpace, hidden_dim: int):
        super().__init__()
        self.space = space
        if space.task in ("intent", "act"):
            self.out = nn.Linear(hidden_dim, len(space.labels))
        elif space.task == "dst":
            self.slots = nn.ModuleList(nn.Linear(hidden_dim, len(v)) for v in space.ontology.values())
        elif space.task != "rs":
            raise FinetuneError(f"unknown task {space.task!r}")

    def forward(self, h: Tensor) -> Tensor | list[Tensor]:
        if self.space.task == "dst":
            return [lin(h) for lin in self.slots]
        return self.out(h)


def init_head(space: LabelSpace, hidden_dim: int, seed: int) -> TaskHead:
    head = TaskHead(space, hidden_dim)
    gen = torch.Generator().manual_seed(seeding.sub_seed(seed, "head"))
    with torch.no_grad():
        for name, p in head.named_parameters():
            p.copy_(torch.zeros_like(p) if name.endswith("bias") else torch.randn(p.shape, generator=gen) * 0.02)
    return head


def task_loss(task: str, logits: Tensor | list[Tensor], targets: Tensor) -> Tensor:
    if task == "intent":
        return F.cross_entropy(logits, targets)
    if task == "act":
        # summed over acts, averaged over the batch
        return F.binary_cross_entropy_with_logits(logits, targets.float(), reduction="none").sum(-1).mean()
    return sum(F.cross_entropy(lg, targets[:, j]) for j, lg in enumerate(logits))


def targets_of(task: str, batch: Sequence[Any], space: LabelSpace) -> Tensor:
    if task == "intent":
        return torch.tensor([ex.label for ex in batch])
    if task == "act":
        return torch.tensor([ex.acts for ex in batch])
    return torch.tensor([[ex.labels[s] for s in space.ontology] for ex in batch])


# ----------------------------------------------------------------- prediction

def argmax_class(logits: Tensor | np.ndarray) -> np.ndarray:
    return np.asarray(torch.as_tensor(logits).argmax(-1))


def acts_from_probs(probs: Tensor | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary act matrix; a probability exactly at the threshold counts as predicted."""
    return (np.asarray(probs) >= threshold).astype(np.int64)


def dst_from_logits(logits: Sequence[Tensor], space: LabelSpace) -> list[dict[str, str]]:
    idx = torch.stack([lg.argmax(-1) for lg in logits], dim=-1).tolist()
    slots = list(space.ontology)
    return [{s: space.ontology[s][row[j]] for j, s in enumerate(slots)} for row in idx]


@dataclass
class FinetunedModel:
    encoder: Encoder
    head: TaskHead
    vocab: Vocab
    space: LabelSpace
    cfg: FinetuneConfig
    history: list[dict[str, float]] = field(default_factory=list)

    @property
    def task(self) -> str:
        return self.space.task

    @property
    def max_len(self) -> int:
        return self.cfg.max_len or self.encoder.cfg.max_len

    def logits(self, examples: Sequence[Any]) -> Tensor | list[Tensor]:
        self.encoder.eval()
        with torch.no_grad():
            h = represent(self.encoder, self.vocab, [inputs_of(e) for e in examples], self.max_len, self.cfg.pooling)
            return self.head(h)

    def predict(self, examples: Sequence[Any]) -> list[Any]:
        """Class index (intent), act index set (act) or slot->value map (dst)."""
        logits = self.logits(examples)
        if self.task == "intent":
            return argmax_class(logits).tolist()
        if self.task == "act":
            acts = acts_from_probs(torch.sigmoid(logits), self.cfg.act_threshold)
            return [set(np.flatnonzero(row).tolist()) for row in acts]
        return dst_from_logits(logits, self.space)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        save_checkpoint(directory / "encoder", self.encoder, self.encoder.cfg.to_json())
        self.vocab.save(directory / "encoder" / VOCAB)
        save_checkpoint(directory / "head", self.head, self.cfg.to_json(),
                        extra={"label_space": self.space.to_json()})
        return directory


def load_finetuned(directory: str | Path) -> FinetunedModel:
    directory = Path(directory)
    encoder, vocab = load_encoder(directory / "encoder")
    manifest = read_manifest(directory / "head")
    doc = manifest["label_space"]
    space = LabelSpace(doc["task"], doc["labels"], doc["ontology"])
    cfg = FinetuneConfig(**manifest["config"])
    head = TaskHead(space, encoder.cfg.hidden_dim)
    load_into(head, directory / "head")
    return FinetunedModel(encoder, head, vocab, space, cfg)


def load_encoder(directory: str | Path) -> tuple[Encoder, Vocab]:
    """Encoder plus vocabulary from a pre-training or fine-tuning checkpoint directory."""
    directory = Path(directory)
    tensors, manifest = load_tensors(directory)
    encoder = Encoder(EncoderConfig.from_json(manifest["config"]))
    load_into(encoder, directory)
    return encoder, Vocab.load(directory / VOCAB)


# ------------------------------------------------------------------- training

def evaluate_model(model: FinetunedModel, examples: Sequence[Any]) -> MetricReport:
    space, cfg = model.space, model.cfg.to_json()
    if model.task == "intent":
        preds = model.predict(examples)
        golds = [ex.label for ex in examples]
        ood = space.ood_index if space.ood_index is not None else -1
        return intent_metrics(preds, golds, ood, cfg)
    if model.task == "act":
        preds = model.predict(examples)
        pred_m = np.array([[int(a in p) for a in range(len(space.labels))] for p in preds])
        return f1_metrics(pred_m, np.array([ex.acts for ex in examples]), cfg)
    if model.task == "dst":
        preds = model.predict(examples)
        golds = [{s: space.ontology[s][ex.labels[s]] for s in space.ontology} for ex in examples]
        return dst_metrics(preds, golds, cfg)
    raise FinetuneError(f"use evaluate_response_selection for task {model.task!r}")


_SELECTION_METRIC = {"intent": "acc_all", "act": "micro_f1", "dst": "joint_acc", "rs": "1_to_100"}


def _trainable(encoder: Encoder, freeze_encoder: bool) -> Encoder:
    encoder = copy.deepcopy(encoder)
    if freeze_encoder:
        freeze(encoder)
    else:
        for p in encoder.parameters():
            p.requires_grad_(True)
    return encoder


def finetune_classifier(
    encoder: Encoder,
    vocab: Vocab,
    examples: Sequence[Any],
    space: LabelSpace,
    cfg: FinetuneConfig,
    dev: Sequence[Any] = (),
) -> FinetunedModel:
    """Train head + encoder with CE (intent, dst: summed over slots) or BCE summed over acts.

    With a dev set, the model is evaluated every ``eval_every`` steps and
    training stops after ``patience`` evaluations without improvement; the
    best evaluated weights are restored.
    """
    if cfg.task not in ("intent", "act", "dst"):
        raise FinetuneError(f"finetune_classifier does not handle task {cfg.task!r}")
    if not examples:
        raise FinetuneError("empty training set")
    model = FinetunedModel(
        _trainable(encoder, cfg.freeze_encoder), init_head(space, encoder.cfg.hidden_dim, cfg.seed),
        vocab, space, cfg,
    )
    params = [p for p in (*model.encoder.parameters(), *model.head.parameters()) if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    order_rng = seeding.stream(cfg.seed, "finetune")
    metric = _SELECTION_METRIC[cfg.task]
    best, best_state, bad_evals, step = -1.0, None, 0, 0
    bs = cfg.effective_batch_size

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(examples))
        for start in range(0, len(examples), bs):
            batch = [examples[int(i)] for i in order[start:start + bs]]
            model.encoder.train()
            gen = seeding.torch_generator(cfg.seed, "dropout", step)
            h = represent(model.encoder, vocab, [inputs_of(e) for e in batch], model.max_len, cfg.pooling,
                          train=not cfg.freeze_encoder, generator=gen)
            loss = task_loss(cfg.task, model.head(h), targets_of(cfg.task, batch, space))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            if dev and step % cfg.eval_every == 0:
                score = evaluate_model(model, dev).metrics[metric]
                model.history.append({"step": step, "loss": float(loss.detach()), metric: score})
                if score > best:
                    best, bad_evals = score, 0
                    best_state = copy.deepcopy((model.encoder.state_dict(), model.head.state_dict()))
                else:
                    bad_evals += 1
                    if bad_evals >= cfg.patience:
                        logger.info("early stop at step %d (best %s=%.4f)", step, metric, best)
                        _restore(model, best_state)
                        return model
    if dev:
        score = evaluate_model(model, dev).metrics[metric]
        if best_state is not None and score < best:
            _restore(model, best_state)
    return model


def _restore(model: FinetunedModel, state) -> None:
    if state is not None:
        model.encoder.load_state_dict(state[0])
        model.head.load_state_dict(state[1])


def in_batch_loss(history_reps: Tensor, response_reps: Tensor, temperature: float = 1.0) -> Tensor:
    """Softmax over cosine similarities with each anchor's gold response on the diagonal."""
    if history_reps.shape[0] < 2:
        raise FinetuneError("response selection needs at least 2 examples per batch for negatives")
    sims = cosine_similarity(history_reps.unsqueeze(1), response_reps.unsqueeze(0)) / temperature
    return F.cross_entropy(sims, torch.arange(sims.shape[0]))


def duplicate_responses(batch: Sequence[RsExample]) -> int:
    """Number of examples whose gold response text repeats within the batch (false negatives)."""
    seen: dict[str, int] = {}
    for ex in batch:
        seen[ex.gold_response.text] = seen.get(ex.gold_response.text, 0) + 1
    return sum(c for c in seen.values() if c > 1)


def finetune_response_selection(
    encoder: Encoder,
    vocab: Vocab,
    examples: Sequence[RsExample],
    cfg: FinetuneConfig,
    dev: Sequence[RsExample] = (),
) -> FinetunedModel:
    """Shared encoder for histories and responses, in-batch negatives, CE loss."""
    if len(examples) < 2 or cfg.effective_batch_size < 2:
        raise FinetuneError("response selection needs batches of at least 2")
    space = LabelSpace("rs")
    model = FinetunedModel(_trainable(encoder, cfg.freeze_encoder), TaskHead(space, encoder.cfg.hidden_dim),
                           vocab, space, cfg)
    params = [p for p in model.encoder.parameters() if p.requires_grad]
    if not params:
        raise FinetuneError("response selection with a frozen encoder has nothing to train")
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)
    order_rng = seeding.stream(cfg.seed, "finetune")
    dev_rng_seed = seeding.sub_seed(cfg.seed, "probe")
    best, best_state, bad_evals, step, collisions = -1.0, None, 0, 0, 0
    bs = cfg.effective_batch_size

    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(examples))
        for start in range(0, len(examples), bs):
            batch = [examples[int(i)] for i in order[start:start + bs]]
            if len(batch) < 2:
                continue
            dup = duplicate_responses(batch)
            if dup:
                collisions += dup
                logger.debug("step %d: %d in-batch false-negative collisions", step, dup)
            model.encoder.train()
            gen = seeding.torch_generator(cfg.seed, "dropout", step)
            reps = represent(model.encoder, vocab, [ex.history for ex in batch] + [(ex.gold_response,) for ex in batch],
                             model.max_len, cfg.pooling, train=True, generator=gen)
            loss = in_batch_loss(reps[:len(batch)], reps[len(batch):], cfg.temperature)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            if dev and step % cfg.eval_every == 0:
                score = evaluate_response_selection(model, dev, np.random.default_rng(dev_rng_seed)).metrics["1_to_100"]
                model.history.append({"step": step, "loss": float(loss.detach()), "1_to_100": score})
                if score > best:
                    best, bad_evals = score, 0
                    best_state = copy.deepcopy((model.encoder.state_dict(), model.head.state_dict()))
                else:
                    bad_evals += 1
                    if bad_evals >= cfg.patience:
                        _restore(model, best_state)
                        break
        else:
            continue
        break
    if collisions:
        logger.warning("%d in-batch false-negative collisions (duplicate gold responses)", collisions)
    return model


def rank_by_similarity(sims: np.ndarray) -> list[int]:
    """Indices by descending similarity; ties keep ascending index order."""
    return sorted(range(len(sims)), key=lambda i: (-sims[i], i))


def rank_responses(
    encoder: Encoder,
    vocab: Vocab,
    history: Sequence[Utterance],
    pool: Sequence[Utterance],
    max_len: Optional[int] = None,
    pooling: Optional[str] = None,
) -> list[int]:
    """Pool indices by descending cosine similarity to the history; ties keep pool order."""
    if len(pool) != POOL_SIZE:
        logger.warning("ranking a pool of %d candidates; the official metric uses %d", len(pool), POOL_SIZE)
    encoder.eval()
    with torch.no_grad():
        reps = represent(encoder, vocab, [tuple(history)] + [(r,) for r in pool], max_len, pooling)
        sims = cosine_similarity(reps[:1], reps[1:]).double().numpy()
    return rank_by_similarity(sims)


def candidate_pools(
    examples: Sequence[RsExample], rng: np.random.Generator, size: int = POOL_SIZE
) -> list[list[Utterance]]:
    """Gold at index 0 followed by ``size - 1`` distinct-text responses from other examples."""
    responses = [ex.gold_response for ex in examples]
    return [[ex.gold_response, *sample_distractors(responses, i, rng, size - 1)] for i, ex in enumerate(examples)]


def evaluate_response_selection(
    model: FinetunedModel | Encoder,
    examples: Sequence[RsExample],
    rng: np.random.Generator,
    vocab: Optional[Vocab] = None,
    pools: Optional[list[list[Utterance]]] = None,
) -> MetricReport:
    if isinstance(model, FinetunedModel):
        encoder, vocab, max_len, pooling, cfg = model.encoder, model.vocab, model.max_len, model.cfg.pooling, model.cfg.to_json()
    else:
        encoder, max_len, pooling, cfg = model, None, None, None
    pools = pools or candidate_pools(examples, rng)
    # each distinct response text is encoded once; ranking follows rank_responses exactly
    utts = sorted({(u.role, u.text) for pool in pools for u in pool})
    index = {u: i for i, u in enumerate(utts)}
    encoder.eval()
    with torch.no_grad():
        hist = represent(encoder, vocab, [tuple(ex.history) for ex in examples], max_len, pooling)
        resp = represent(encoder, vocab, [(Utterance(*u),) for u in utts], max_len, pooling)
    rankings = []
    for h, pool in zip(hist, pools):
        cand = resp[[index[(u.role, u.text)] for u in pool]]
        sims = cosine_similarity(h.unsqueeze(0), cand).double().numpy()
        rankings.append(rank_by_similarity(sims))
    return ranking_report(rankings, 0, cfg)
