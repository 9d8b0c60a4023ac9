"""Future-knowledge distillation pre-training.

A student encodes the (masked) dialogue context; a frozen teacher encodes the
context together with a sampled window of the future. The student minimises
the summed per-layer distance to the teacher plus its MLM loss, and every
``sync_interval`` epochs the teacher is overwritten with the student.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from . import seeding
from .checkpoint import VOCAB, params_hash, save_checkpoint
from .config import PretrainConfig
from .corpus import CorpusError, Dialogue, SplitSample, make_sample, valid_split_turns
from .encoder import Encoder, LayerOutputs, copy_params, freeze, init_params
from .tokenizer import IGNORE, TokenizerError, Vocab, apply_mlm_mask, build_vocab, encode, stack

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "epoch", "L_dis", "L_mlm", "L")


class TrainingError(RuntimeError):
    pass


# --------------------------------------------------------------------- losses

def _pooled(x: LayerOutputs | Tensor) -> Tensor:
    return x.pooled if isinstance(x, LayerOutputs) else x


def _euclidean(diff: Tensor) -> Tensor:
    # d||x||/dx is taken as 0 at x = 0 (the loss minimum) instead of NaN
    sq = (diff * diff).sum(-1)
    zero = sq == 0
    return torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))


def distill_loss(
    student: LayerOutputs | Tensor, teacher: LayerOutputs | Tensor, k: int, normalize: bool = False
) -> Tensor:
    """Per-example sum over the top ``k`` layers of ``||h_S^l - h_T^l||_2``.

    Inputs are pooled states of shape ``(B, L, d)`` (or ``LayerOutputs``);
    returns shape ``(B,)``.
    """
    s, t = _pooled(student), _pooled(teacher)
    if s.shape[-1] != t.shape[-1]:
        raise ValueError(f"hidden size mismatch: {s.shape[-1]} vs {t.shape[-1]}")
    if not 1 <= k <= min(s.shape[-2], t.shape[-2]):
        raise ValueError(f"k={k} exceeds available layers ({s.shape[-2]}, {t.shape[-2]})")
    s, t = s[..., -k:, :], t[..., -k:, :]
    if normalize:
        s, t = F.normalize(s, dim=-1), F.normalize(t, dim=-1)
    return _euclidean(s - t).sum(-1)


def mlm_loss(logits: Tensor, labels: Tensor) -> Tensor:
    """Per-example summed negative log-likelihood of the original tokens at masked positions."""
    selected = labels != IGNORE
    if not bool(selected.any()):
        raise ValueError("mlm_loss needs at least one masked position")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, labels.clamp(min=0).unsqueeze(-1)).squeeze(-1)
    return -(picked * selected.to(logp.dtype)).sum(-1)


def total_loss(l_dis: Tensor, l_mlm: Tensor) -> Tensor:
    if not (bool(torch.isfinite(l_dis).all()) and bool(torch.isfinite(l_mlm).all())):
        raise FloatingPointError(f"non-finite loss component: L_dis={l_dis}, L_mlm={l_mlm}")
    return l_dis + l_mlm


# ---------------------------------------------------------------------- state

@dataclass
class LossRecord:
    step: int
    epoch: int
    l_dis: float
    l_mlm: float
    total: float


@dataclass
class TrainState:
    student: Encoder
    teacher: Encoder
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    vocab: Vocab
    epoch: int = 0
    step: int = 0
    history: list[LossRecord] = field(default_factory=list)
    skipped: int = 0
    sync_epochs: list[int] = field(default_factory=list)

    def epoch_means(self) -> dict[int, float]:
        sums: dict[int, list[float]] = {}
        for rec in self.history:
            sums.setdefault(rec.epoch, []).append(rec.total)
        return {m: float(np.mean(v)) for m, v in sorted(sums.items())}


def linear_schedule(total_steps: int, warmup_steps: int = 0) -> Callable[[int], float]:
    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        return max(0.0, (total_steps - step) / max(1, total_steps - warmup_steps))

    return factor


def new_state(student: Encoder, vocab: Vocab, cfg: PretrainConfig, total_steps: int) -> TrainState:
    """Teacher starts as an exact frozen copy of the student."""
    teacher = freeze(copy.deepcopy(student))
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.learning_rate)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, linear_schedule(total_steps, cfg.warmup_steps))
    return TrainState(student, teacher, optimizer, scheduler, vocab)


# ---------------------------------------------------------------------- steps

def teacher_utterances(sample: SplitSample, teacher_input: str) -> tuple:
    if teacher_input == "future_only":
        return sample.future_window
    return (*sample.context, *sample.future_window)


def _teacher_sequence(sample: SplitSample, vocab: Vocab, cfg: PretrainConfig):
    """Clean teacher input. The future window is kept whole; if it alone overflows
    ``max_len`` it is shortened from its end (it stays a prefix of the future)."""
    window = sample.future_window
    while True:
        clipped = replace(sample, future_window=window)
        try:
            return encode(teacher_utterances(clipped, cfg.teacher_input), vocab, cfg.max_len,
                          keep_last=len(window), pad=False)
        except TokenizerError:
            if len(window) == 1:
                return encode(teacher_utterances(clipped, cfg.teacher_input), vocab, cfg.max_len, pad=False)
            window = window[:-1]


def build_inputs(
    batch: Sequence[SplitSample], vocab: Vocab, cfg: PretrainConfig, mask_rng: np.random.Generator
) -> tuple[Optional[tuple[Tensor, Tensor, Tensor]], Optional[tuple[Tensor, Tensor]], int]:
    """Masked student inputs and clean teacher inputs; samples with no mask are dropped."""
    student_seqs, teacher_seqs, skipped = [], [], 0
    for sample in batch:
        ctx = encode(sample.context, vocab, cfg.max_len, pad=False)
        try:
            masked = apply_mlm_mask(ctx, vocab, cfg.mlm_ratio, mask_rng)
        except TokenizerError:
            masked = None
        if masked is None or not bool((masked.mlm_labels != IGNORE).any()):
            skipped += 1
            continue
        student_seqs.append(masked)
        teacher_seqs.append(_teacher_sequence(sample, vocab, cfg))
    if not student_seqs:
        return None, None, skipped
    s_ids, s_mask, s_labels = (torch.from_numpy(a) for a in stack(student_seqs))
    t_ids, t_mask, _ = (torch.from_numpy(a) for a in stack(teacher_seqs))
    return (s_ids, s_mask, s_labels), (t_ids, t_mask), skipped


def compute_losses(
    student: Encoder, teacher: Encoder, student_inputs, teacher_inputs, cfg: PretrainConfig,
    generator: Optional[torch.Generator] = None, train: bool = True,
) -> tuple[Tensor, Tensor]:
    """Per-example (L_dis, L_mlm). The teacher runs in eval mode outside the autograd graph."""
    s_ids, s_mask, s_labels = student_inputs
    t_ids, t_mask = teacher_inputs
    with torch.no_grad():
        t_out = teacher(t_ids, t_mask, train=False)
    s_out = student(s_ids, s_mask, train=train, generator=generator, with_logits=True)
    l_dis = distill_loss(s_out, t_out.pooled.detach(), cfg.top_k, cfg.normalize)
    l_mlm = mlm_loss(s_out.logits, s_labels)
    return l_dis, l_mlm


def _assert_finite_params(model: Encoder, where: str) -> None:
    for name, p in model.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise TrainingError(f"{where}: parameter {name} is non-finite")


def pretrain_step(
    state: TrainState, batch: Sequence[SplitSample], cfg: PretrainConfig, mask_rng: np.random.Generator
) -> TrainState:
    """One optimizer step on the student using L = L_dis + L_mlm (batch mean)."""
    if not batch:
        raise TrainingError("empty batch")
    s_in, t_in, skipped = build_inputs(batch, state.vocab, cfg, mask_rng)
    state.skipped += skipped
    if s_in is None:
        logger.debug("step %d: every sample lacked masked tokens; skipped", state.step)
        return state
    gen = seeding.torch_generator(cfg.seed, "dropout", state.step)
    l_dis, l_mlm = compute_losses(state.student, state.teacher, s_in, t_in, cfg, gen)
    per_example = total_loss(l_dis, l_mlm)
    loss = per_example.mean()
    if not bool(torch.isfinite(loss)):
        raise TrainingError(f"step {state.step}: loss is {loss.item()} (L_dis={l_dis.tolist()}, L_mlm={l_mlm.tolist()})")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if any(p.grad is not None for p in state.teacher.parameters()):
        raise TrainingError("teacher received gradients")
    state.optimizer.step()
    state.scheduler.step()
    _assert_finite_params(state.student, f"step {state.step}")
    state.history.append(LossRecord(
        state.step, state.epoch, float(l_dis.detach().mean()), float(l_mlm.detach().mean()), float(loss.detach()),
    ))
    state.step += 1
    return state


def sync_teacher(state: TrainState) -> TrainState:
    copy_params(state.student, state.teacher)
    return state


# ----------------------------------------------------------------------- loop

@dataclass
class PretrainResult:
    state: TrainState
    output_dir: Optional[Path]

    @property
    def student(self) -> Encoder:
        return self.state.student


EpochHook = Callable[[TrainState, int], None]


def run_pretraining(
    dialogues: Sequence[Dialogue],
    cfg: PretrainConfig,
    output_dir: str | Path | None = None,
    vocab: Vocab | None = None,
    init: Encoder | None = None,
    on_step: Callable[[TrainState], None] | None = None,
    on_epoch_end: EpochHook | None = None,
) -> PretrainResult:
    """Train for ``cfg.epochs`` epochs, syncing the teacher when ``epoch % sync_interval == 0``."""
    usable = [d for d in dialogues if valid_split_turns(d)]
    if not usable:
        raise CorpusError("corpus yields no valid split samples")
    vocab = vocab or build_vocab(usable, cfg.min_freq)
    enc_cfg = cfg.encoder_config(len(vocab))
    student = init if init is not None else init_params(enc_cfg, seeding.sub_seed(cfg.seed, "init"))
    steps_per_epoch = math.ceil(len(usable) / cfg.batch_size)
    state = new_state(student, vocab, cfg, cfg.epochs * steps_per_epoch)

    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    sample_rng = seeding.stream(cfg.seed, "sample")
    mask_rng = seeding.stream(cfg.seed, "mask")

    for m in range(1, cfg.epochs + 1):
        state.epoch = m
        order = sample_rng.permutation(len(usable))
        samples = [make_sample(usable[i], cfg.future_policy, sample_rng) for i in order]
        for start in range(0, len(samples), cfg.batch_size):
            pretrain_step(state, samples[start:start + cfg.batch_size], cfg, mask_rng)
            if on_step is not None:
                on_step(state)
        if m % cfg.sync_interval == 0:
            sync_teacher(state)
            state.sync_epochs.append(m)
        means = state.epoch_means()
        logger.info("epoch %d/%d  mean L=%.4f  skipped=%d", m, cfg.epochs, means.get(m, float("nan")), state.skipped)
        if out is not None and cfg.checkpoint_every and m % cfg.checkpoint_every == 0:
            save_encoder(out / "checkpoints" / f"epoch_{m:03d}", state.student, vocab, cfg, m)
        if on_epoch_end is not None:
            on_epoch_end(state, m)

    if out is not None:
        write_loss_csv(state.history, out / "loss.csv")
        save_encoder(out / "student", state.student, vocab, cfg, state.epoch, role="student")
        save_encoder(out / "teacher", state.teacher, vocab, cfg, state.epoch, role="teacher")
    return PretrainResult(state, out)


def save_encoder(
    directory: str | Path, model: Encoder, vocab: Vocab, cfg: PretrainConfig | None, epoch: int, role: str = "student"
) -> Path:
    directory = Path(directory)
    extra = {"role": role, "params_sha256": params_hash(model)}
    if cfg is not None:
        extra["pretrain_config"] = cfg.to_json()
    save_checkpoint(directory, model, model.cfg.to_json(), epoch, extra)
    vocab.save(directory / VOCAB)
    return directory


def write_loss_csv(history: Sequence[LossRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for r in history:
            writer.writerow([r.step, r.epoch, repr(r.l_dis), repr(r.l_mlm), repr(r.total)])


def read_loss_csv(path: str | Path) -> list[LossRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [LossRecord(int(r["step"]), int(r["epoch"]), float(r["L_dis"]), float(r["L_mlm"]), float(r["L"]))
            for r in rows]


def summary(state: TrainState) -> dict:
    return {
        "steps": state.step,
        "epochs": state.epoch,
        "skipped_samples": state.skipped,
        "sync_epochs": state.sync_epochs,
        "epoch_mean_loss": {str(k): v for k, v in state.epoch_means().items()},
        "student_sha256": params_hash(state.student),
        "teacher_sha256": params_hash(state.teacher),
    }


def dump_json(doc, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
