"""Training loop: batching, AdamW, multi-phase schedules, ablation harness.

A schedule is an ordered list of phases; each phase trains `epochs` epochs
with its own loss (hinge ranking, online contrastive, or both) either at the
full dimension only or composed across every nested dimension. The flagship
schedule fine-tunes with both losses at the full dimension first, then
continues with the nested composite. Optimizer state is reset at each phase
boundary, and every bit of the run is determined by (data, config, seed).
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace

import numpy as np

from .data import RelevanceRecord, RELEVANT_ABOVE
from .encoder import (
    DEFAULT_BUCKETS,
    DEFAULT_DIMS,
    DEFAULT_FEATURE_DIM,
    EncoderModel,
    backward,
    encode,
)
from .errors import DataError, NumericalError
from .losses import (
    MrlConfig,
    PairBatch,
    TripletBatch,
    mnrl_hinge,
    mrl_compose,
    multitask_step_loss,
    ocl,
)
from .metrics import DEFAULT_CORPUS_CAP, DEFAULT_KS, MetricsReport, delta_report, sequential_evaluate
from .nested import DimSet

SCHEDULES = ("mnrl", "ocl", "mnrl+ocl", "mrl-first")

# Per-query negative cap; bounds the P*N hinge term count per step.
MAX_NEGATIVES_PER_QUERY = 8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 5e-5
    margin: float = 0.75
    margin_c: float = 0.5
    lambda_ocl: float = 1.0
    dims: DimSet = DEFAULT_DIMS
    weights: tuple[float, ...] | None = None  # None = uniform 1.0
    seed: int = 0
    schedule: str = "mnrl+ocl"
    bucket_count: int = DEFAULT_BUCKETS
    feature_dim: int = DEFAULT_FEATURE_DIM
    corpus_cap: int = DEFAULT_CORPUS_CAP

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def mrl_config(self) -> MrlConfig:
        if self.weights is None:
            return MrlConfig.uniform(self.dims)
        return MrlConfig(self.dims, tuple(self.weights))


@dataclass(frozen=True)
class Phase:
    """One stage of a schedule: which loss, and whether it is nested."""

    name: str
    task: str  # "mnrl" | "ocl" | "multitask"
    nested: bool


def schedule_phases(schedule: str) -> tuple[Phase, ...]:
    """The ordered phases of each named schedule.

    The first three fine-tune with an IR loss at the full dimension, then
    continue with the nested composite of the same loss; "mrl-first" trains
    the nested ranking composite first and then both plain losses, the order
    the ablation study found to underperform.
    """
    if schedule == "mnrl":
        return (Phase("mnrl", "mnrl", False), Phase("near2", "mnrl", True))
    if schedule == "ocl":
        return (Phase("ocl", "ocl", False), Phase("near2", "ocl", True))
    if schedule == "mnrl+ocl":
        return (Phase("mnrl+ocl", "multitask", False), Phase("near2", "multitask", True))
    if schedule == "mrl-first":
        return (Phase("mrl", "mnrl", True), Phase("mnrl+ocl", "multitask", False))
    raise ValueError(f"unknown schedule {schedule!r}")


# --- batching -------------------------------------------------------------------


@dataclass
class TripletTexts:
    queries: list[str]
    positives: list[list[str]]
    negatives: list[list[str]]


@dataclass
class PairTexts:
    lefts: list[str] = field(default_factory=list)
    rights: list[str] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)


@dataclass
class StepBatch:
    triplets: TripletTexts
    pairs: PairTexts


def build_batches(
    records: list[RelevanceRecord], batch_size: int, seed: int
) -> list[StepBatch]:
    """Group records into per-step text batches, seed-deterministically.

    Positives are titles with grade > 3, negatives grade < 3; grade-3 rows
    never enter a triplet. Queries lacking either side are excluded from the
    ranking batches, but their centrality-labeled rows still feed the pair
    batches (spread round-robin). Negatives are capped per query per step.
    """
    by_query: dict[str, dict] = {}
    for r in records:
        q = by_query.setdefault(r.qid, {"query": r.query, "pos": [], "neg": [], "pairs": []})
        if r.grade > RELEVANT_ABOVE:
            q["pos"].append(r.title)
        elif r.grade < RELEVANT_ABOVE:
            q["neg"].append(r.title)
        if r.central is not None:
            q["pairs"].append((r.title, int(r.central)))

    rng = random.Random(seed)
    usable = [qid for qid, q in by_query.items() if q["pos"] and q["neg"]]
    if not usable:
        raise DataError("zero usable queries: none has both a positive and a negative")
    rng.shuffle(usable)

    batches: list[StepBatch] = []
    for start in range(0, len(usable), batch_size):
        chunk = usable[start : start + batch_size]
        triplets = TripletTexts(queries=[], positives=[], negatives=[])
        pairs = PairTexts()
        for qid in chunk:
            q = by_query[qid]
            negs = q["neg"]
            if len(negs) > MAX_NEGATIVES_PER_QUERY:
                negs = rng.sample(negs, MAX_NEGATIVES_PER_QUERY)
            triplets.queries.append(q["query"])
            triplets.positives.append(list(q["pos"]))
            triplets.negatives.append(list(negs))
            for title, label in q["pairs"]:
                pairs.lefts.append(q["query"])
                pairs.rights.append(title)
                pairs.labels.append(label)
        batches.append(StepBatch(triplets=triplets, pairs=pairs))

    # queries unusable for ranking still train OCL through their labeled pairs
    usable_set = set(usable)
    orphans = [qid for qid in by_query if qid not in usable_set and by_query[qid]["pairs"]]
    for i, qid in enumerate(orphans):
        q = by_query[qid]
        target = batches[i % len(batches)].pairs
        for title, label in q["pairs"]:
            target.lefts.append(q["query"])
            target.rights.append(title)
            target.labels.append(label)
    return batches


# --- AdamW ----------------------------------------------------------------------


@dataclass(frozen=True)
class AdamHyper:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class OptimizerState:
    step: int
    first_moment: dict[str, np.ndarray]
    second_moment: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(
            step=0,
            first_moment={k: np.zeros_like(v) for k, v in params.items()},
            second_moment={k: np.zeros_like(v) for k, v in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    hyper: AdamHyper,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update, in place, with bias correction.

    Fixed order per parameter: decoupled weight decay computed from the
    pre-step value first, then the moment update. Non-finite gradients abort
    the step before anything is touched.
    """
    for name, g in grads.items():
        bad = np.count_nonzero(~np.isfinite(g))
        if bad:
            raise NumericalError(f"{bad} non-finite gradient entries in {name!r}; step aborted")
    state.step += 1
    t = state.step
    lr, b1, b2 = hyper.learning_rate, hyper.beta1, hyper.beta2
    for name, p in params.items():
        g = grads[name]
        if hyper.weight_decay:
            p -= lr * hyper.weight_decay * p
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return params, state


# --- history --------------------------------------------------------------------


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)

    def record_step(self, phase, epoch, step, loss, per_dim, warnings):
        self.steps.append(
            {
                "kind": "step",
                "phase": phase,
                "epoch": epoch,
                "step": step,
                "loss": loss,
                "per_dim": {str(m): v for m, v in per_dim.items()},
                "warnings": list(warnings),
            }
        )

    def record_validation(self, phase, epoch, report: MetricsReport):
        for m in report.dims:
            for k in report.ks:
                cell = report.cell(m, k)
                self.validation.append(
                    {
                        "kind": "validation",
                        "phase": phase,
                        "epoch": epoch,
                        "m": m,
                        "k": k,
                        "precision": cell.precision,
                        "recall": cell.recall,
                        "ndcg": cell.ndcg,
                        "mrr": cell.mrr,
                    }
                )

    def epoch_mean_loss(self, phase: str, epoch: int) -> float:
        losses = [s["loss"] for s in self.steps if s["phase"] == phase and s["epoch"] == epoch]
        if not losses:
            raise ValueError(f"no steps recorded for phase {phase!r} epoch {epoch}")
        return sum(losses) / len(losses)

    def to_jsonl(self) -> str:
        rows = self.steps + self.validation
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


# --- training loop ---------------------------------------------------------------


def _phase_mrl_config(config: TrainConfig, phase: Phase) -> MrlConfig:
    if phase.nested:
        return config.mrl_config()
    return MrlConfig(DimSet((config.dims.full,)), (1.0,))


def _epoch_seed(seed: int, phase_index: int, epoch: int) -> int:
    # distinct, deterministic shuffle stream per (phase, epoch)
    return seed + 1_000_003 * (phase_index + 1) + epoch


def _encode_cached(model, cache, text):
    emb = cache.get(text)
    if emb is None:
        emb = encode(model, text)
        cache[text] = emb
    return emb


def _step_loss(model, batch: StepBatch, phase: Phase, mrl_cfg: MrlConfig, config: TrainConfig):
    """Loss output plus the flattened (texts, upstream-gradient) pairs for backward."""
    cache: dict[str, object] = {}
    texts: list[str] = []
    upstream: list[np.ndarray] = []

    triplet_batch = None
    pair_batch = None
    if phase.task in ("mnrl", "multitask"):
        t = batch.triplets
        triplet_batch = TripletBatch.from_embeddings(
            [_encode_cached(model, cache, q) for q in t.queries],
            [[_encode_cached(model, cache, p) for p in group] for group in t.positives],
            [[_encode_cached(model, cache, n) for n in group] for group in t.negatives],
        )
    if phase.task in ("ocl", "multitask") and batch.pairs.labels:
        p = batch.pairs
        pair_batch = PairBatch.from_embeddings(
            [_encode_cached(model, cache, s) for s in p.lefts],
            [_encode_cached(model, cache, s) for s in p.rights],
            p.labels,
        )

    if phase.task == "mnrl":
        out = mrl_compose(lambda b, m: mnrl_hinge(b, config.margin, m), triplet_batch, mrl_cfg)
    elif phase.task == "ocl":
        if pair_batch is None:
            return None, [], []
        out = mrl_compose(lambda b, m: ocl(b, config.margin_c, m), pair_batch, mrl_cfg)
    else:
        out = multitask_step_loss(
            triplet_batch, pair_batch, mrl_cfg,
            config.margin, config.margin_c, config.lambda_ocl,
        )

    if not np.isfinite(out.value):
        raise NumericalError(f"non-finite loss value {out.value!r}")

    if triplet_batch is not None:
        g = out.gradients
        texts.extend(batch.triplets.queries)
        upstream.extend(g["queries"])
        for group_texts, group_grads in zip(batch.triplets.positives, g["positives"]):
            texts.extend(group_texts)
            upstream.extend(group_grads)
        for group_texts, group_grads in zip(batch.triplets.negatives, g["negatives"]):
            texts.extend(group_texts)
            upstream.extend(group_grads)
    if pair_batch is not None:
        g = out.gradients
        texts.extend(batch.pairs.lefts)
        upstream.extend(g["lefts"])
        texts.extend(batch.pairs.rights)
        upstream.extend(g["rights"])
    return out, texts, upstream


def train(
    model: EncoderModel,
    records: list[RelevanceRecord],
    config: TrainConfig,
    valid_records: list[RelevanceRecord] | None = None,
) -> tuple[EncoderModel, TrainHistory]:
    """Run the configured schedule; returns the trained model and its history.

    The sequential evaluator runs after every epoch when validation records
    are provided. With epochs=0 the model is returned untouched.
    """
    history = TrainHistory()
    hyper = AdamHyper(learning_rate=config.learning_rate)
    global_step = 0
    for phase_index, phase in enumerate(schedule_phases(config.schedule)):
        state = OptimizerState.zeros(model.parameters())
        mrl_cfg = _phase_mrl_config(config, phase)
        for epoch in range(1, config.epochs + 1):
            batches = build_batches(
                records, config.batch_size, _epoch_seed(config.seed, phase_index, epoch)
            )
            for batch in batches:
                out, texts, upstream = _step_loss(model, batch, phase, mrl_cfg, config)
                if out is None:
                    continue
                grads = backward(model, texts, upstream)
                adamw_step(model.parameters(), grads, state, hyper)
                global_step += 1
                history.record_step(
                    phase.name, epoch, global_step, out.value,
                    out.per_dim, out.warnings,
                )
            if valid_records:
                report = sequential_evaluate(
                    model, valid_records, config.dims,
                    ks=DEFAULT_KS, corpus_cap=config.corpus_cap, seed=config.seed,
                )
                history.record_validation(phase.name, epoch, report)
    return model, history


# --- ablation --------------------------------------------------------------------


@dataclass
class AblationReport:
    """Per-schedule metrics and their deltas against the untrained baseline."""

    schedules: tuple[str, ...]
    dims: tuple[int, ...]
    baseline: MetricsReport
    reports: dict[str, MetricsReport]
    deltas: dict[str, dict]  # schedule -> {m: {"ndcg@5": frac|None, "mrr@10": frac|None}}

    def to_dict(self) -> dict:
        return {
            "schedules": list(self.schedules),
            "dims": list(self.dims),
            "baseline": self.baseline.to_dict(),
            "reports": {s: r.to_dict() for s, r in self.reports.items()},
            "deltas": {
                s: {str(m): cells for m, cells in per_dim.items()}
                for s, per_dim in self.deltas.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        from .metrics import format_delta

        header = ["schedule"]
        for m in self.dims:
            header.extend([f"ndcg@5_dim{m}", f"mrr@10_dim{m}"])
        lines = [",".join(header)]
        for s in self.schedules:
            row = [s]
            for m in self.dims:
                row.append(format_delta(self.deltas[s][m]["ndcg@5"]))
                row.append(format_delta(self.deltas[s][m]["mrr@10"]))
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"


def run_ablation(
    train_records: list[RelevanceRecord],
    eval_records: list[RelevanceRecord],
    config: TrainConfig,
    schedules: tuple[str, ...] = SCHEDULES,
) -> AblationReport:
    """Train one model per schedule from one shared initialization seed.

    Every model is evaluated with the sequential evaluator; deltas follow the
    percentage-increase-over-baseline convention against the untrained model.
    """
    for s in schedules:
        if s not in SCHEDULES:
            raise ValueError(f"unknown schedule {s!r}")

    def fresh_model() -> EncoderModel:
        return EncoderModel.create(
            bucket_count=config.bucket_count,
            feature_dim=config.feature_dim,
            dims=config.dims,
            seed=config.seed,
        )

    ks = tuple(sorted(set(DEFAULT_KS) | {5, 10}))
    baseline_report = sequential_evaluate(
        fresh_model(), eval_records, config.dims, ks=ks,
        corpus_cap=config.corpus_cap, seed=config.seed,
    )
    reports: dict[str, MetricsReport] = {}
    deltas: dict[str, dict] = {}
    for schedule in schedules:
        model, _ = train(fresh_model(), train_records, replace(config, schedule=schedule))
        report = sequential_evaluate(
            model, eval_records, config.dims, ks=ks,
            corpus_cap=config.corpus_cap, seed=config.seed,
        )
        reports[schedule] = report
        d = delta_report(report, baseline_report)
        deltas[schedule] = {
            m: {
                "ndcg@5": d.deltas[(m, 5)]["ndcg"],
                "mrr@10": d.deltas[(m, 10)]["mrr"],
            }
            for m in config.dims
        }
    return AblationReport(
        schedules=tuple(schedules),
        dims=tuple(config.dims),
        baseline=baseline_report,
        reports=reports,
        deltas=deltas,
    )
