"""Adam training with leave-one-video-out folds, and the evaluation protocol."""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, coerce_fields, format_config, parse_config
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import DatasetBundle, ground_truth_labels, oracle_summary
from .evalmetric import EvalReport, evaluate_summary, f1_score
from .model import QFVSModel, segment_video
from .scoring import CLAMP_EPS, SUMMARY_RATIO, ScoringConfig, bce_loss, select_summary, summary_length


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_decay: float = 0.8
    epochs: int = 20
    batch_size: int = 5
    seed: int = 0
    clamp_eps: float = CLAMP_EPS
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_segments: int = 20
    kts_penalty: float = 1.0
    summary_ratio: float = SUMMARY_RATIO
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise T.ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise T.ConfigurationError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1 or self.epochs < 1:
            raise T.ConfigurationError("batch_size and epochs must be >= 1")

    def lr_at(self, epoch):
        return self.lr * self.lr_decay ** epoch

    @classmethod
    def test_profile(cls, **overrides):
        """Desk-scale settings: small network, larger step size."""
        base = dict(lr=1e-3, backbone=BackboneConfig.test_profile(), scoring=ScoringConfig.test_profile())
        base.update(overrides)
        return cls(**base)

    def to_flat(self):
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                flat[f.name] = value
        return flat

    def to_text(self):
        return format_config(self.to_flat())

    @classmethod
    def from_flat(cls, flat, base=None):
        """Build a config from ``key = value`` pairs layered over ``base``."""
        base = base or cls()
        top, nested = {}, {"backbone": {}, "scoring": {}}
        for key, value in flat.items():
            if "." in key:
                group, sub = key.split(".", 1)
                if group not in nested:
                    raise KeyError(f"unknown config group {group!r}")
                nested[group][sub] = value
            else:
                top[key] = value
        top = coerce_fields(cls, top)
        bb = dataclasses.asdict(base.backbone)
        bb.update(coerce_fields(BackboneConfig, nested["backbone"]))
        sc = dataclasses.asdict(base.scoring)
        sc.update(coerce_fields(ScoringConfig, nested["scoring"]))
        merged = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)}
        merged.update(top)
        merged["backbone"] = BackboneConfig(**bb)
        merged["scoring"] = ScoringConfig(**sc)
        return cls(**merged)

    @classmethod
    def from_text(cls, text, base=None):
        return cls.from_flat(parse_config(text), base)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(named_params, state: AdamState, lr):
    """Bias-corrected Adam update applied in place to ``(name, Tensor)`` pairs."""
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is None:
            raise T.ContractError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in named_params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class LogRecord:
    fold: str
    epoch: int
    mean_loss: float
    lr: float

    def line(self):
        return f"fold={self.fold} epoch={self.epoch} mean_loss={self.mean_loss!r} lr={self.lr!r}"

    @classmethod
    def parse(cls, line):
        kv = dict(part.split("=", 1) for part in line.split())
        return cls(kv["fold"], int(kv["epoch"]), float(kv["mean_loss"]), float(kv["lr"]))


@dataclass
class FoldResult:
    held_out: str
    model: QFVSModel
    log: list
    trained_on: set


@dataclass
class Sample:
    video_id: str
    query_index: int


def segment_bundle(bundle: DatasetBundle, cfg: TrainConfig):
    return {
        v.video_id: segment_video(v, cfg.backbone.T, cfg.max_segments, cfg.kts_penalty) for v in bundle.videos
    }


def build_model(cfg: TrainConfig, fold_index=0):
    return QFVSModel(cfg.backbone, cfg.scoring, seed=cfg.seed, stream=fold_index)


def train_fold(bundle, held_out, cfg: TrainConfig, fold_index=0, segmented=None, on_epoch=None):
    segmented = segmented or segment_bundle(bundle, cfg)
    model = build_model(cfg, fold_index)
    rng = T.Rng(cfg.seed, 1, fold_index)
    labels = {}
    samples = []
    for video in bundle.videos:
        if video.video_id == held_out:
            continue
        for qi, q in enumerate(bundle.queries.get(video.video_id, [])):
            samples.append(Sample(video.video_id, qi))
            labels[video.video_id, qi] = ground_truth_labels(video, q)
    if not samples:
        raise T.ContractError(f"fold {held_out}: no training samples")

    params = list(model.named_parameters())
    state = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    trained_on = set()
    log = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.child(epoch).permutation(len(samples))
        dropout_rng = rng.child(epoch, 1)
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            model.zero_grad()
            for sample in batch:
                if sample.video_id == held_out:
                    raise T.ContractError(f"held-out video {held_out} reached the training loop")
                trained_on.add(sample.video_id)
                q = bundle.queries[sample.video_id][sample.query_index]
                scores = model(segmented[sample.video_id], q.h_q, training=True, rng=dropout_rng)
                loss = bce_loss(scores, labels[sample.video_id, sample.query_index], cfg.clamp_eps)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"fold {held_out}, epoch {epoch}: non-finite loss on "
                        f"{sample.video_id} query {q.concepts}"
                    )
                losses.append(value)
                T.backward(T.mul(loss, 1.0 / len(batch)))
            adam_step(params, state, lr)
        record = LogRecord(held_out, epoch, float(np.mean(losses)), lr)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return FoldResult(held_out, model, log, trained_on)


def checkpoint_path(out_dir, held_out):
    return os.path.join(out_dir, f"fold_{held_out}.ckpt")


def save_model(path, model: QFVSModel, cfg: TrainConfig, held_out=None):
    meta = {"config": cfg.to_text(), "held_out": held_out}
    save_checkpoint(path, model.state_dict(), meta)


def load_model(path):
    """Return ``(model, cfg, metadata)`` from a checkpoint written by :func:`save_model`."""
    state, meta = load_checkpoint(path)
    cfg = TrainConfig.from_text(meta["config"])
    model = QFVSModel(cfg.backbone, cfg.scoring)
    model.load_state_dict(state)
    return model, cfg, meta


def train(bundle: DatasetBundle, cfg: TrainConfig, out_dir=None, on_epoch=None, skip_existing=False):
    """Train one model per held-out video. Writes checkpoints and a log when ``out_dir`` is set."""
    if len(bundle.videos) < 2:
        raise T.ContractError("leave-one-video-out training needs at least 2 videos")
    segmented = segment_bundle(bundle, cfg)
    results = []
    log_lines = []
    for fold_index, (held_out, _) in enumerate(bundle.folds()):
        if out_dir is not None and skip_existing and os.path.exists(checkpoint_path(out_dir, held_out)):
            continue
        result = train_fold(bundle, held_out, cfg, fold_index, segmented, on_epoch)
        results.append(result)
        log_lines += [r.line() for r in result.log]
        if out_dir is not None:
            save_model(checkpoint_path(out_dir, held_out), result.model, cfg, held_out)
    if out_dir is not None:
        with open(os.path.join(out_dir, "config.txt"), "w") as fh:
            fh.write(cfg.to_text())
        with open(os.path.join(out_dir, "train_log.txt"), "a" if skip_existing else "w") as fh:
            fh.writelines(line + "\n" for line in log_lines)
    return results


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

def ranking_quality(scores, labels):
    """Fraction of (relevant, irrelevant) pairs ordered correctly; ties count half.

    Returns None when either class is empty.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if pos.size == 0 or neg.size == 0:
        return None
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


def budget_bound(n_shots, n_oracle, ratio=SUMMARY_RATIO):
    """P/R/F1 of a perfect scorer under the summary budget.

    A perfect scorer fills its k-shot budget with relevant shots, each matching
    itself at IoU 1, so the matched total is min(k, |oracle|).
    """
    if n_oracle == 0:
        return 0.0, 0.0, 0.0
    k = summary_length(n_shots, ratio)
    hit = min(k, n_oracle)
    p, r = hit / k, hit / n_oracle
    return p, r, f1_score(p, r)


@dataclass
class QueryResult:
    video_id: str
    concepts: tuple
    scenario: str
    report: EvalReport
    ranking: float
    summary: np.ndarray


@dataclass
class FoldReport:
    held_out: str
    queries: list

    def _scored(self):
        return [q for q in self.queries if not q.report.flags]

    def mean(self, key):
        vals = [getattr(q.report, key) for q in self._scored()]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def precision(self):
        return self.mean("precision")

    @property
    def recall(self):
        return self.mean("recall")

    @property
    def f1(self):
        return self.mean("f1")

    @property
    def ranking(self):
        vals = [q.ranking for q in self.queries if q.ranking is not None]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class ExperimentReport:
    folds: list

    def average(self, key):
        return float(np.mean([getattr(f, key) for f in self.folds]))

    def table(self):
        """Per-video Pre/Rec/F1 rows plus AVG, in percent."""
        lines = [f"{'':<10} {'Pre':>7} {'Rec':>7} {'F1':>7}"]
        for f in self.folds:
            lines.append(f"{f.held_out:<10} {100 * f.precision:7.2f} {100 * f.recall:7.2f} {100 * f.f1:7.2f}")
        lines.append(
            f"{'AVG':<10} {100 * self.average('precision'):7.2f} "
            f"{100 * self.average('recall'):7.2f} {100 * self.average('f1'):7.2f}"
        )
        return "\n".join(lines)

    def to_text(self):
        lines = ["# experiment report", "# precision/recall/f1 are fractions; means skip flagged queries"]
        for f in self.folds:
            lines.append(f"[fold {f.held_out}]")
            for q in f.queries:
                lines.append(f"query = {q.concepts[0]},{q.concepts[1]}")
                lines.append(f"scenario = {q.scenario}")
                lines.append(f"ranking = {q.ranking!r}")
                lines.append(f"summary = {','.join(str(int(i)) for i in q.summary)}")
                lines += q.report.to_lines()
            lines.append(f"fold_precision = {f.precision!r}")
            lines.append(f"fold_recall = {f.recall!r}")
            lines.append(f"fold_f1 = {f.f1!r}")
            lines.append(f"fold_ranking = {f.ranking!r}")
        lines.append("[average]")
        for key in ("precision", "recall", "f1", "ranking"):
            lines.append(f"{key} = {self.average(key)!r}")
        lines.append("[table]")
        lines += self.table().splitlines()
        return "\n".join(lines) + "\n"


def model_scorer(model: QFVSModel, segmented):
    def score(video, query):
        return model(segmented[video.video_id], query.h_q, training=False).numpy().copy()

    return score


def evaluate_fold(bundle, held_out, scorer, ratio=SUMMARY_RATIO):
    video = bundle.video(held_out)
    results = []
    for q in bundle.queries.get(held_out, []):
        scores = np.asarray(scorer(video, q), dtype=float)
        labels = ground_truth_labels(video, q)
        summary = select_summary(scores, ratio)
        report = evaluate_summary(oracle_summary(video, q), summary.indices, video.tags)
        results.append(
            QueryResult(held_out, q.concepts, q.scenario, report, ranking_quality(scores, labels), summary.indices)
        )
    return FoldReport(held_out, results)


def run_experiment(bundle, cfg: TrainConfig, models=None, scorer_factory=None):
    """Evaluate every fold's held-out video.

    ``models`` maps held-out id to a trained model; models are trained inline
    when neither ``models`` nor ``scorer_factory`` (held_out -> scorer) is given.
    """
    segmented = None
    if scorer_factory is None:
        segmented = segment_bundle(bundle, cfg)
        if models is None:
            models = {r.held_out: r.model for r in train(bundle, cfg)}
    folds = []
    for held_out, _ in bundle.folds():
        scorer = scorer_factory(held_out) if scorer_factory else model_scorer(models[held_out], segmented)
        folds.append(evaluate_fold(bundle, held_out, scorer, cfg.summary_ratio))
    return ExperimentReport(folds)
