"""Adam training loop, evaluation and the multi-seed experiment driver."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import metrics as M
from . import model as nn
from . import tensor as T
from .data import DataError, LabeledRecord, SplitResult, SynonymLexicon, augment, stratified_split
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 30
    seed: int = 0
    max_len: int = 64
    augment: bool = False
    p_replace: float = 0.1
    eval_every_epoch: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{"batch_size": 200, "learning_rate": 1e-6, "epochs": 35, "max_len": 256, **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Mapping) -> "AdamState":
        items = params.tensors.items() if isinstance(params, nn.ModelParams) else params.items()
        m = {k: np.zeros_like(p.data) for k, p in items}
        return cls(m, {k: np.zeros_like(a) for k, a in m.items()})


def adam_step(params: Mapping, state: AdamState, lr: float, grads: Optional[Mapping] = None) -> None:
    """One bias-corrected Adam update applied to every parameter.

    Gradients default to each tensor's ``grad`` (missing = zero).  All grads
    are checked before anything is updated.
    """
    items = list(params.tensors.items() if isinstance(params, nn.ModelParams) else params.items())
    gs = {}
    for name, p in items:
        g = grads[name] if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
        gs[name] = g
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in items:
        g = gs[name]
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainResult:
    loss_trace: list
    val_accuracy: list = field(default_factory=list)
    steps: int = 0


@dataclass
class RunSummary:
    seed: int
    loss_trace: list
    validation: Optional[M.MetricReport]
    test: Optional[M.MetricReport]
    wall_clock: float
    val_accuracy: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "loss_trace": self.loss_trace,
            "val_accuracy": self.val_accuracy,
            "validation": None if self.validation is None else self.validation.to_dict(),
            "test": None if self.test is None else self.test.to_dict(),
            "wall_clock": self.wall_clock,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        val = d.get("validation")
        test = d.get("test")
        return cls(d["seed"], d["loss_trace"],
                   None if val is None else M.MetricReport.from_dict(val),
                   None if test is None else M.MetricReport.from_dict(test),
                   d.get("wall_clock", 0.0), d.get("val_accuracy", []))


def _encode(records: Sequence[LabeledRecord], vocab: Vocabulary, max_len: int):
    ids = vocab.encode_batch([r.text for r in records], max_len)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return ids, labels


def train(params: nn.ModelParams, records: Sequence[LabeledRecord], vocab: Vocabulary,
          config: TrainConfig, *, val_records: Optional[Sequence[LabeledRecord]] = None,
          lexicon: Optional[SynonymLexicon] = None,
          on_batch: Optional[Callable[[int, int, np.ndarray], None]] = None) -> TrainResult:
    """Mini-batch Adam on the mean NLL; mutates ``params`` in place.

    Each epoch reshuffles with a generator seeded from ``config.seed`` and,
    when augmentation is on, re-samples synonym replacements.  The last partial
    batch is kept.  ``on_batch(epoch, batch_index, record_indices)`` is called
    before every step.
    """
    if not records:
        raise DataError("training set is empty")
    if params.config.max_len < config.max_len:
        raise ValueError(f"model max_len {params.config.max_len} < training max_len {config.max_len}")
    rng = np.random.default_rng([config.seed, 1])
    drop_rng = np.random.default_rng([config.seed, 2]) if params.config.dropout_rate > 0 else None
    use_aug = config.augment and lexicon is not None and config.p_replace > 0
    ids, labels = _encode(records, vocab, config.max_len)
    if val_records and config.eval_every_epoch:
        val_ids, val_labels = _encode(val_records, vocab, config.max_len)
    state = AdamState.create(params)
    result = TrainResult([])
    n = len(records)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        if use_aug:
            aug_seeds = rng.integers(0, 2 ** 63 - 1, size=n)
            ids = vocab.encode_batch(
                [augment(r, lexicon, config.p_replace, int(s)).text for r, s in zip(records, aug_seeds)],
                config.max_len)
        per_record = np.zeros(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if on_batch is not None:
                on_batch(epoch, b, idx)
            params.zero_grad()
            logits = nn.forward(ids[idx], params, rng=drop_rng)
            loss = nn.bce_loss(logits, labels[idx])
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            with T.no_grad():
                per_record[idx] = -T.log_softmax(logits, axis=1).data[np.arange(len(idx)), labels[idx]]
            T.backward(loss)
            try:
                adam_step(params, state, config.learning_rate)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}, batch {b}") from None
            result.steps += 1
        result.loss_trace.append(float(per_record.mean()))
        msg = f"epoch {epoch + 1}/{config.epochs} loss {result.loss_trace[-1]:.6f}"
        if val_records and config.eval_every_epoch:
            pred = nn.predict_label(val_ids, params)
            result.val_accuracy.append(float((pred == val_labels).mean()))
            msg += f" val_acc {result.val_accuracy[-1]:.4f}"
        log.info(msg)
    params.zero_grad()
    return result


def evaluate(params: nn.ModelParams, records: Sequence[LabeledRecord], vocab: Vocabulary,
             max_len: int, batch_size: int = 256) -> M.MetricReport:
    if not records:
        raise DataError("cannot evaluate on an empty record list")
    ids, labels = _encode(records, vocab, max_len)
    probs = nn.predict_proba(ids, params, batch_size)
    pred = nn.predict_label(ids, params, batch_size)
    report = M.derive(M.confusion(pred, labels))
    try:
        report.auc = M.roc_auc(probs, labels)
    except M.UndefinedMetricError:
        report.auc = 0.0
        report.degenerate = report.degenerate + ("auc",)
    return report


def run_single(split: SplitResult, vocab: Vocabulary, model_config: nn.ModelConfig,
               train_config: TrainConfig, seed: int, out_dir=None,
               lexicon: Optional[SynonymLexicon] = None) -> RunSummary:
    """Init, train, then evaluate on validation and (once) on test."""
    started = time.perf_counter()
    model_config = dataclasses.replace(model_config, max_len=train_config.max_len,
                                       vocab_size=vocab.size)
    train_config = dataclasses.replace(train_config, seed=seed)
    params = nn.init_params(model_config, seed)
    result = train(params, split.train, vocab, train_config,
                   val_records=split.validation, lexicon=lexicon)
    val = evaluate(params, split.validation, vocab, train_config.max_len) if split.validation else None
    test = evaluate(params, split.test, vocab, train_config.max_len) if split.test else None
    summary = RunSummary(seed, result.loss_trace, val, test, time.perf_counter() - started,
                         result.val_accuracy)
    if out_dir is not None:
        run_dir = Path(out_dir) / f"run-{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        nn.save_checkpoint(run_dir / "checkpoint.bin", params, seed=seed, epoch=train_config.epochs,
                           metrics={"validation": val and val.to_dict(), "test": test and test.to_dict()})
        (run_dir / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n",
                                              encoding="utf-8")
    return summary


def _run_job(args):
    split, vocab, model_config, train_config, seed, out_dir, lexicon, resplit = args
    try:
        if resplit:
            pooled = [*split.train, *split.validation, *split.test]
            split = stratified_split(pooled, seed=seed)
        return run_single(split, vocab, model_config, train_config, seed, out_dir, lexicon)
    except Exception as exc:  # noqa: BLE001 - recorded as a failed run
        return exc


@dataclass
class ExperimentResult:
    summaries: list
    failures: list
    validation: Optional[dict]
    test: Optional[dict]

    def to_dict(self) -> dict:
        """Deterministic content only (no wall-clock)."""
        def agg(a):
            if a is None:
                return None
            return {k: {"mean": v[0], "std": v[1]} if isinstance(v, tuple) else v for k, v in a.items()}
        return {
            "seeds": [s.seed for s in self.summaries],
            "failures": self.failures,
            "validation": agg(self.validation),
            "test": agg(self.test),
            "runs": [{"seed": s.seed,
                      "validation": s.validation and s.validation.to_dict(),
                      "test": s.test and s.test.to_dict()} for s in self.summaries],
        }


def _aggregate(reports: list) -> Optional[dict]:
    reports = [r for r in reports if r is not None]
    if len(reports) >= 2:
        return M.aggregate_mean_std(reports)
    if len(reports) == 1:
        return M.report_cells(reports[0])
    return None


def multi_seed_run(split: SplitResult, vocab: Vocabulary, model_config: nn.ModelConfig,
                   train_config: TrainConfig, n_runs: int = 5, base_seed: Optional[int] = None,
                   out_dir=None, jobs: int = 1,
                   lexicon: Optional[SynonymLexicon] = None,
                   resplit: bool = False) -> ExperimentResult:
    """Train ``n_runs`` models with seeds base..base+n-1 and aggregate mean/std.

    By default every run shares ``split``; ``resplit`` pools it and re-draws an
    8:1:1 split with each run's seed.  A failed run is recorded in
    ``failures`` and excluded from the aggregate.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    base = train_config.seed if base_seed is None else base_seed
    seeds = [base + i for i in range(n_runs)]
    jobs_args = [(split, vocab, model_config, train_config, s, out_dir, lexicon, resplit) for s in seeds]
    if jobs > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_job, jobs_args))
    else:
        outcomes = [_run_job(a) for a in jobs_args]
    summaries, failures = [], []
    for seed, out in zip(seeds, outcomes):
        if isinstance(out, Exception):
            log.error("run with seed %d failed: %s", seed, out)
            failures.append({"seed": seed, "error": f"{type(out).__name__}: {out}"})
        else:
            summaries.append(out)
    return ExperimentResult(summaries, failures,
                            _aggregate([s.validation for s in summaries]),
                            _aggregate([s.test for s in summaries]))
