"""Online training loop, anytime evaluation and baseline learners."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import FrozenViT, ModelState, PROFILES, classify
from .datasets import DatasetIndex
from .metrics import a_auc, forgetting
from .mvp_core import (
    LossBreakdown,
    afs_scale,
    apply_mask,
    cvpt_loss,
    ignore_scores,
    marginal_benefit_scores,
    total_loss,
)
from .replay import ReplayBuffer, compose_batch, reservoir_update
from .scenario import StreamManifest, iterate_stream

logger = logging.getLogger(__name__)

METHODS = ("mvp", "mvp_r", "finetune_head", "linear_probe", "er")
REPLAY_METHODS = ("mvp_r", "er")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    method: str = "mvp"
    lr: float = 0.005
    batch_size: int = 32
    alpha: float = 0.5
    gamma: float = 2.0
    margin: float = 0.5
    pool_size: int = 10
    top_k: int = 1
    memory_size: int = 500
    # "augment": B streamed + up to B replayed; "split": B/2 streamed + up to B/2 replayed
    replay_mode: str = "augment"
    # None -> max(batch_size, stream length // 100)
    eval_period: int | None = None
    eval_batch_size: int = 256
    mask_at_eval: bool = True
    restrict_ce_to_seen: bool = False
    use_mask: bool = True
    use_cvpt: bool = True
    use_gsf: bool = True
    use_afs: bool = True
    backbone: str = "toy"
    backbone_overrides: dict = field(default_factory=dict)
    dtype: str = "float32"
    checkpoint_every: int = 0
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.lr < 0:
            raise ConfigError("learning rate must be >= 0")
        if self.eval_period is not None and self.eval_period < self.batch_size:
            raise ConfigError("eval_period must be >= batch_size")
        if self.replay_mode not in ("augment", "split"):
            raise ConfigError(f"unknown replay_mode {self.replay_mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if not self.seeds:
            raise ConfigError("seed list is empty")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Batch:
    """What a learner gets to see: inputs and labels, never the task index."""

    inputs: torch.Tensor
    labels: torch.Tensor


def make_batch(dataset: DatasetIndex, sample_ids: Sequence[int], dtype: torch.dtype) -> Batch:
    x, y = dataset.fetch_batch(sample_ids)
    if x.is_floating_point():
        x = x.to(dtype)
    return Batch(x, y)


def build_model(dataset: DatasetIndex, config: TrainConfig, seed: int) -> ModelState:
    overrides = dict(config.backbone_overrides)
    if config.backbone == "toy":
        sample, _ = dataset.fetch(dataset.train[0][0])
        overrides.setdefault("input_dim", int(sample.numel()))
    backbone = FrozenViT(PROFILES[config.backbone](**overrides))
    model = ModelState(backbone, dataset.num_classes, pool_size=config.pool_size, seed=seed)
    return model.to(config.torch_dtype)


def make_optimizer(model: ModelState, config: TrainConfig) -> torch.optim.Optimizer:
    if config.method in ("mvp", "mvp_r"):
        params = list(model.trainable().values())
    else:
        params = [model.head]
    return torch.optim.Adam(params, lr=config.lr)


def mvp_forward(
    model: ModelState,
    batch: Batch,
    config: TrainConfig,
    *,
    queries: torch.Tensor,
    selection: torch.Tensor,
    mb_scores: torch.Tensor | None = None,
    ign_scores: torch.Tensor | None = None,
    seen: torch.Tensor | None = None,
) -> LossBreakdown:
    """Loss for an already-selected batch.

    Score tensors may be passed in to hold them fixed (gradient checks);
    otherwise they are computed from the current state and detached.
    """
    x, y = batch.inputs, batch.labels
    pool, W = model.pool, model.head
    prompts, masks = pool.gather(selection)
    feats = model.backbone.forward_with_prompts(x, prompts if model.backbone.spec.prompting else None)
    if config.use_afs:
        if mb_scores is None:
            mb_scores = marginal_benefit_scores(feats.detach(), y, W.detach(), config.margin)
        h = afs_scale(feats, mb_scores)
    else:
        h = feats
    logits = classify(h, W)
    mask = masks if config.use_mask else None
    out = apply_mask(logits, mask) if mask is not None else logits
    if seen is not None and config.restrict_ce_to_seen:
        out = out.masked_fill(~seen, -1e9)
    if ign_scores is None:
        ign_scores = ignore_scores(h.detach(), y, W.detach(), None if mask is None else mask.detach())
    if config.use_cvpt:
        cvpt = cvpt_loss(pool.keys, queries, pool.counts)
    else:
        cvpt = torch.zeros((), dtype=W.dtype)
    alpha = config.alpha if config.use_gsf else 0.0
    return total_loss(out, y, ign_scores, cvpt, alpha=alpha, gamma=config.gamma, mb_scores=mb_scores)


def _check_finite(loss: LossBreakdown, batch: Batch) -> None:
    if not torch.isfinite(loss.total):
        dump = {"loss": {k: float(getattr(loss, k).detach()) for k in ("ce", "gsf", "cvpt", "total")},
                "inputs": batch.inputs.detach().cpu(), "labels": batch.labels.detach().cpu()}
        raise NonFiniteLossError(f"non-finite loss {dump['loss']}", dump)


def _freeze_unseen_columns(model: ModelState, seen: torch.Tensor | None) -> None:
    if seen is not None and model.head.grad is not None:
        model.head.grad[:, ~seen] = 0


def train_step(
    batch: Batch,
    model: ModelState,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    seen: torch.Tensor | None = None,
) -> LossBreakdown:
    """One MVP update: query, select (counts bumped first), loss, Adam step."""
    if batch.labels.numel() == 0:
        raise ValueError("empty batch")
    q = model.backbone.extract_query(batch.inputs)
    sel, _ = model.pool.select(q, train=True, top_k=config.top_k)
    loss = mvp_forward(model, batch, config, queries=q, selection=sel, seen=seen)
    _check_finite(loss, batch)
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    _freeze_unseen_columns(model, seen)
    optimizer.step()
    return loss


def baseline_step(
    batch: Batch,
    model: ModelState,
    optimizer: torch.optim.Optimizer,
    method: str,
    seen: torch.Tensor | None = None,
) -> LossBreakdown:
    """Plain CE on frozen query features; only the head moves."""
    if method not in ("finetune_head", "linear_probe", "er"):
        raise ConfigError(f"baseline_step does not handle method {method!r}")
    q = model.backbone.extract_query(batch.inputs)
    ce = F.cross_entropy(classify(q, model.head), batch.labels)
    zero = torch.zeros((), dtype=ce.dtype)
    loss = LossBreakdown(ce=ce, gsf=zero, cvpt=zero, total=ce)
    _check_finite(loss, batch)
    optimizer.zero_grad(set_to_none=True)
    ce.backward()
    _freeze_unseen_columns(model, seen)
    optimizer.step()
    return loss


@torch.no_grad()
def predict_logits(model: ModelState, x: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    q = model.backbone.extract_query(x)
    if config.method in ("mvp", "mvp_r"):
        sel, _ = model.pool.select(q, train=False, top_k=config.top_k)
        prompts, masks = model.pool.gather(sel)
        feats = model.backbone.forward_with_prompts(x, prompts if model.backbone.spec.prompting else None)
        logits = classify(feats, model.head)
        if config.mask_at_eval and config.use_mask:
            logits = apply_mask(logits, masks)
        return logits
    return classify(q, model.head)


@torch.no_grad()
def predict(
    model: ModelState,
    dataset: DatasetIndex,
    sample_ids: Sequence[int],
    config: TrainConfig,
    allowed_classes: Sequence[int] | None = None,
) -> np.ndarray:
    """Argmax predictions, optionally restricted to ``allowed_classes``."""
    allowed = None
    if allowed_classes is not None:
        allowed = torch.zeros(dataset.num_classes, dtype=torch.bool)
        allowed[list(allowed_classes)] = True
    preds = []
    for start in range(0, len(sample_ids), config.eval_batch_size):
        chunk = sample_ids[start : start + config.eval_batch_size]
        batch = make_batch(dataset, chunk, config.torch_dtype)
        logits = predict_logits(model, batch.inputs, config)
        if allowed is not None:
            logits = logits.masked_fill(~allowed, -math.inf)
        preds.append(logits.argmax(dim=1).cpu().numpy())
    return np.concatenate(preds) if preds else np.empty(0, dtype=np.int64)


def evaluate_per_class(
    model: ModelState,
    dataset: DatasetIndex,
    classes: Sequence[int],
    config: TrainConfig,
    restrict: bool = True,
) -> tuple[float, dict[int, float]]:
    classes = sorted(classes)
    if not classes:
        raise ValueError("no classes to evaluate")
    ids = dataset.test_ids(classes)
    preds = predict(model, dataset, ids, config, allowed_classes=classes if restrict else None)
    labels = dataset.labels[np.asarray(ids)]
    correct = preds == labels
    per_class = {c: float(correct[labels == c].mean()) for c in classes}
    return float(correct.mean()), per_class


def evaluate_exposed(
    model: ModelState, dataset: DatasetIndex, exposed_classes: Sequence[int], config: TrainConfig
) -> float:
    """Top-1 accuracy on test samples of the exposed classes, argmax over those classes only."""
    return evaluate_per_class(model, dataset, exposed_classes, config)[0]


@dataclass
class RunRecord:
    method: str
    seed: int
    eval_points: list[tuple[int, float]] = field(default_factory=list)
    per_class_best_acc: list[float] = field(default_factory=list)
    per_class_final_acc: list[float] = field(default_factory=list)
    final_full_test_acc: float | None = None
    loss_trace: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    backbone_hash_before: str = ""
    backbone_hash_after: str = ""
    total_selections: int = 0
    status: str = "running"

    @property
    def a_auc(self) -> float:
        return a_auc(self.eval_points)

    @property
    def a_last(self) -> float:
        from .metrics import a_last

        return a_last(self)

    @property
    def forgetting(self) -> float:
        return forgetting(self.per_class_best_acc, self.per_class_final_acc)

    def summary(self) -> dict:
        out = {"type": "summary", "method": self.method, "seed": self.seed, "status": self.status,
               "final_full_test_acc": self.final_full_test_acc,
               "backbone_hash_before": self.backbone_hash_before,
               "backbone_hash_after": self.backbone_hash_after,
               "total_selections": self.total_selections,
               "per_class_best_acc": _nan_to_none(self.per_class_best_acc),
               "per_class_final_acc": _nan_to_none(self.per_class_final_acc),
               "config": self.config}
        if self.status == "completed":
            out.update(a_auc=self.a_auc, a_last=self.a_last, forgetting=self.forgetting)
        return out

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w") as fh:
            for x, acc in self.eval_points:
                fh.write(json.dumps({"type": "eval", "samples_seen": x, "accuracy": acc}) + "\n")
            for i, rec in enumerate(self.loss_trace):
                fh.write(json.dumps({"type": "loss", "step": i, **rec}) + "\n")
            fh.write(json.dumps(self.summary()) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        evals, losses, summary = [], [], None
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "eval":
                evals.append((rec["samples_seen"], rec["accuracy"]))
            elif kind == "loss":
                rec.pop("step")
                losses.append(rec)
            elif kind == "summary":
                summary = rec
        if summary is None:
            raise ValueError(f"{path}: no summary record")
        return cls(
            method=summary["method"], seed=summary["seed"], eval_points=evals,
            per_class_best_acc=_none_to_nan(summary["per_class_best_acc"]),
            per_class_final_acc=_none_to_nan(summary["per_class_final_acc"]),
            final_full_test_acc=summary["final_full_test_acc"], loss_trace=losses,
            config=summary["config"], backbone_hash_before=summary["backbone_hash_before"],
            backbone_hash_after=summary["backbone_hash_after"],
            total_selections=summary["total_selections"], status=summary["status"],
        )


def _nan_to_none(xs):
    return [None if (isinstance(x, float) and math.isnan(x)) else x for x in xs]


def _none_to_nan(xs):
    return [math.nan if x is None else x for x in xs]


def default_eval_period(num_samples: int, batch_size: int) -> int:
    return max(batch_size, num_samples // 100)


def run_online(
    manifest: StreamManifest,
    dataset: DatasetIndex,
    config: TrainConfig,
    seed: int,
    output_dir: str | Path | None = None,
    model: ModelState | None = None,
) -> RunRecord:
    """Stream the manifest once, training and evaluating as samples arrive.

    Anytime evaluations happen at the first batch boundary at or after each
    multiple of ``eval_period`` and once more at the end of the stream if that
    point is not already on the grid.  The final full-test evaluation uses
    every class in the argmax.
    """
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if model is None:
        model = build_model(dataset, config, seed)
    out_dir = Path(output_dir) if output_dir is not None else None
    dtype = config.torch_dtype
    n_total = len(manifest)
    eval_period = config.eval_period or default_eval_period(n_total, config.batch_size)
    replay = config.method in REPLAY_METHODS
    stream_bs = config.batch_size
    if replay and config.replay_mode == "split":
        stream_bs = max(1, config.batch_size // 2)
    buffer = ReplayBuffer(config.memory_size if replay else 0)

    record = RunRecord(method=config.method, seed=seed, config=asdict(config),
                       backbone_hash_before=model.backbone_hash())
    optimizer = make_optimizer(model, config)
    seen = torch.zeros(dataset.num_classes, dtype=torch.bool)
    best = np.full(dataset.num_classes, np.nan)
    samples_seen = 0
    next_eval = eval_period
    step = 0

    def anytime_eval() -> None:
        exposed = torch.nonzero(seen).flatten().tolist()
        acc, per_class = evaluate_per_class(model, dataset, exposed, config)
        record.eval_points.append((samples_seen, acc))
        for c, a in per_class.items():
            best[c] = a if np.isnan(best[c]) else max(best[c], a)

    try:
        for entries in iterate_stream(manifest, stream_bs):
            stream_items = [(e.sample_id, e.class_id) for e in entries]
            for _, c in stream_items:
                seen[c] = True
            items = compose_batch(stream_items, buffer, rng) if replay else stream_items
            batch = make_batch(dataset, [s for s, _ in items], dtype)
            if config.method in ("mvp", "mvp_r"):
                loss = train_step(batch, model, optimizer, config, seen=seen)
            else:
                loss = baseline_step(batch, model, optimizer, config.method, seen=seen)
            record.loss_trace.append(loss.as_dict())
            if replay:
                for item in stream_items:
                    reservoir_update(buffer, item, rng)
            samples_seen += len(entries)
            step += 1
            if samples_seen >= next_eval:
                anytime_eval()
                next_eval = (samples_seen // eval_period + 1) * eval_period
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                model.save(out_dir / f"checkpoint_step{step:06d}.pt", extra={"seed": seed, "step": step})
        if not record.eval_points or record.eval_points[-1][0] != samples_seen:
            anytime_eval()

        full_acc, final_pc = evaluate_per_class(model, dataset, range(dataset.num_classes), config, restrict=False)
        final = np.full(dataset.num_classes, np.nan)
        for c, a in final_pc.items():
            final[c] = a
            if not np.isnan(best[c]):
                best[c] = max(best[c], a)
        record.final_full_test_acc = full_acc
        record.per_class_best_acc = best.tolist()
        record.per_class_final_acc = final.tolist()
        record.status = "completed"
    except NonFiniteLossError as err:
        record.status = "failed"
        if out_dir is not None:
            torch.save(err.dump, out_dir / f"nonfinite_batch_seed{seed}.pt")
        raise
    finally:
        record.backbone_hash_after = model.backbone_hash()
        record.total_selections = int(model.pool.counts.sum())
        if out_dir is not None:
            model.save(out_dir / f"checkpoint_seed{seed}.pt", extra={"seed": seed, "step": step})
    return record
