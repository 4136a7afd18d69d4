"""Optimization loop, method switching, metrics, and run persistence.

Methods:

    agg_mm    concatenation fusion trained on the multimodal loss only
    mt_mml    multi-task: unimodal + multimodal prediction losses
    unis_mmc  mt_mml plus the unimodality-supervised contrastive term
              (ablation flags use_semi / use_neg select its pieces)
    unsup_mmc multimodal loss plus the unsupervised cross-modal baseline
    sup_mmc   multimodal loss plus the supervised cross-modal baseline

Batches are shuffled micro-batches whose gradients accumulate up to the
effective batch size before each Adam step; each micro-loss is scaled by
its share of the accumulation group so mean-based losses reproduce the
large-batch update exactly. The learning rate is reduced by a fixed
factor after `patience` validation epochs without improvement, and the
best checkpoint is chosen by validation multimodal accuracy.
"""

from __future__ import annotations

import dataclasses
import functools
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses, model
from .container import atomic_write_text
from .errors import ConfigurationError, ShapeError, TrainingDiverged

METHODS = ("unis_mmc", "mt_mml", "agg_mm", "unsup_mmc", "sup_mmc")


@dataclass
class TrainConfig:
    method: str
    seed: int = 0
    temperature: float = 0.07
    contrastive_weight: float = 0.1
    use_semi: bool = True
    use_neg: bool = True
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    micro_batch_size: int = 32
    effective_batch_size: int = 128
    max_epochs: int = 30
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    include_unimodal_in_baselines: bool = False
    # Epochs with the contrastive weight held at zero. Pair categorization
    # is driven by the unimodal predictions, which carry no signal while
    # encoders train from random init; until they do, the contrastive term
    # actively anti-aligns the modalities. Default 0 keeps the plain
    # composition; set a few epochs when training encoders from scratch.
    contrastive_warmup_epochs: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        if self.contrastive_weight < 0:
            raise ConfigurationError(f"contrastive weight must be >= 0, got {self.contrastive_weight}")
        if self.micro_batch_size < 1:
            raise ConfigurationError(f"micro batch size must be >= 1, got {self.micro_batch_size}")
        if (
            self.effective_batch_size < self.micro_batch_size
            or self.effective_batch_size % self.micro_batch_size != 0
        ):
            raise ConfigurationError(
                f"effective batch {self.effective_batch_size} must be a positive multiple "
                f"of micro batch {self.micro_batch_size}"
            )
        if self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.plateau_patience < 1:
            raise ConfigurationError(f"plateau patience must be >= 1, got {self.plateau_patience}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigurationError(f"plateau factor must lie in (0, 1), got {self.plateau_factor}")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate must be > 0 and weight decay >= 0")
        if self.contrastive_warmup_epochs < 0:
            raise ConfigurationError(
                f"contrastive warmup must be >= 0 epochs, got {self.contrastive_warmup_epochs}"
            )


@dataclass
class AdamHyper:
    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamMoments:
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, moments, hyper):
    """One Adam update with bias correction and decoupled weight decay.

    `params` is (name, array) pairs updated in place; `grads` is aligned
    (None means a zero gradient). Returns the updated moments.
    """
    moments.step += 1
    correction1 = 1.0 - hyper.beta1 ** moments.step
    correction2 = 1.0 - hyper.beta2 ** moments.step
    for (name, values), grad in zip(params, grads):
        if grad is None:
            grad = np.zeros_like(values)
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name}")
        first = moments.first.setdefault(name, np.zeros_like(values))
        second = moments.second.setdefault(name, np.zeros_like(values))
        first *= hyper.beta1
        first += (1.0 - hyper.beta1) * grad
        second *= hyper.beta2
        second += (1.0 - hyper.beta2) * grad * grad
        if hyper.weight_decay:
            values *= 1.0 - hyper.learning_rate * hyper.weight_decay
        values -= hyper.learning_rate * (first / correction1) / (
            np.sqrt(second / correction2) + hyper.epsilon
        )
    return moments


class PlateauSchedule:
    """Multiply the rate by `factor` after `patience` epochs without improvement."""

    def __init__(self, learning_rate, patience, factor):
        self.learning_rate = learning_rate
        self.patience = patience
        self.factor = factor
        self._best = -np.inf
        self._bad_epochs = 0

    def update(self, metric):
        if metric > self._best:
            self._best = metric
            self._bad_epochs = 0
        else:
            self._bad_epochs += 1
            if self._bad_epochs >= self.patience:
                self.learning_rate *= self.factor
                self._bad_epochs = 0
        return self.learning_rate


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    loss_total: float
    loss_unimodal: float
    loss_multimodal: float
    loss_contrastive: float
    accuracy_multimodal: float
    accuracy_unimodal: tuple
    both_correct: float
    both_wrong: float
    exclusive: float
    mean_cos_positive: float
    mean_cos_semi_positive: float
    mean_cos_negative: float


@dataclass
class FinalRecord:
    best_epoch: int
    accuracy_multimodal: float
    accuracy_unimodal: tuple
    both_correct: float
    both_wrong: float
    exclusive: float
    mean_cos_positive: float
    mean_cos_semi_positive: float
    mean_cos_negative: float


@dataclass
class RunMetrics:
    method: str
    seed: int
    num_modalities: int
    epochs: list = field(default_factory=list)
    final: FinalRecord | None = None


@dataclass
class EvalReport:
    unimodal_predictions: tuple
    fused_predictions: np.ndarray
    unimodal_accuracy: tuple
    multimodal_accuracy: float
    both_correct: float
    both_wrong: float
    exclusive: float
    mean_cos_positive: float
    mean_cos_semi_positive: float
    mean_cos_negative: float
    pair_diagnostics: list = field(default_factory=list)


def evaluate(state, batch):
    """Argmax predictions per modality and for fusion, plus consistency stats.

    Argmax ties break toward the lowest class index. Consistency
    proportions are averaged over all unordered modality pairs (for two
    modalities that is the single pair of Figure-5-style plots).
    """
    reps = model.encode(state, batch)
    rep_values = [r.values for r in reps]
    uni_preds = tuple(
        np.argmax(model.predict_unimodal(state, reps[m], m).values, axis=1)
        for m in range(len(reps))
    )
    _, fused_logits = model.fuse_and_predict(state, reps)
    fused_preds = np.argmax(fused_logits.values, axis=1)

    labels = batch.labels
    uni_acc = tuple(float(np.mean(p == labels)) for p in uni_preds)
    multi_acc = float(np.mean(fused_preds == labels))

    pairs = list(itertools.combinations(range(len(reps)), 2))
    both_correct = both_wrong = exclusive = 0.0
    diagnostics = []
    cos_totals = {"positive": [0.0, 0], "semi": [0.0, 0], "negative": [0.0, 0]}
    for a, b in pairs:
        sets = losses.categorize_pairs(labels, uni_preds[a], uni_preds[b])
        n_pos, n_semi, n_neg = sets.counts
        both_correct += n_pos / sets.batch_size
        both_wrong += n_neg / sets.batch_size
        exclusive += n_semi / sets.batch_size
        diag = losses.pair_diagnostics(sets, rep_values[a], rep_values[b], a, b)
        diagnostics.append(diag)
        for key, mean, count in (
            ("positive", diag.mean_cos_positive, n_pos),
            ("semi", diag.mean_cos_semi_positive, n_semi),
            ("negative", diag.mean_cos_negative, n_neg),
        ):
            if count:
                cos_totals[key][0] += mean * count
                cos_totals[key][1] += count

    def pooled(key):
        total, count = cos_totals[key]
        return total / count if count else float("nan")

    return EvalReport(
        unimodal_predictions=uni_preds,
        fused_predictions=fused_preds,
        unimodal_accuracy=uni_acc,
        multimodal_accuracy=multi_acc,
        both_correct=both_correct / len(pairs),
        both_wrong=both_wrong / len(pairs),
        exclusive=exclusive / len(pairs),
        mean_cos_positive=pooled("positive"),
        mean_cos_semi_positive=pooled("semi"),
        mean_cos_negative=pooled("negative"),
        pair_diagnostics=diagnostics,
    )


def _trainable_parameters(state, config):
    """agg_mm and the plain contrastive baselines never update the unimodal heads."""
    uses_unimodal_heads = config.method in ("unis_mmc", "mt_mml") or (
        config.method in ("unsup_mmc", "sup_mmc") and config.include_unimodal_in_baselines
    )
    params = state.named_parameters()
    if uses_unimodal_heads:
        return params
    return [(name, t) for name, t in params if not name.startswith("unimodal")]


def _compose_batch_loss(state, config, batch):
    """Method-dependent loss bundle for one micro-batch.

    Every method composes unimodal + multimodal + weight * contrastive;
    terms a method does not use are constant zeros, which contribute
    nothing to either the value or the gradients.
    """
    reps = model.encode(state, batch)
    _, fused_logits = model.fuse_and_predict(state, reps)
    l_multi = losses.multimodal_loss(batch.labels, fused_logits)
    num_modalities = len(reps)
    pairs = list(itertools.combinations(range(num_modalities), 2))

    needs_unimodal = config.method in ("unis_mmc", "mt_mml") or (
        config.method in ("unsup_mmc", "sup_mmc") and config.include_unimodal_in_baselines
    )
    l_uni = ad.Tensor(0.0)
    uni_logits = None
    if needs_unimodal:
        uni_logits = [model.predict_unimodal(state, reps[m], m) for m in range(num_modalities)]
        l_uni = losses.unimodal_loss(batch.labels, uni_logits)

    l_con = ad.Tensor(0.0)
    weight = config.contrastive_weight if config.method not in ("agg_mm", "mt_mml") else 0.0
    diagnostics = []
    if config.method == "unis_mmc":
        preds = [np.argmax(logits.values, axis=1) for logits in uni_logits]
        pair_sets = {}
        for a, b in pairs:
            sets = losses.categorize_pairs(batch.labels, preds[a], preds[b])
            pair_sets[(a, b)] = sets
            diagnostics.append(losses.pair_diagnostics(sets, reps[a].values, reps[b].values, a, b))
        if config.contrastive_weight > 0:
            l_con = losses.total_mmc_loss(
                reps, pair_sets, config.temperature, config.use_semi, config.use_neg
            )
    elif config.method in ("unsup_mmc", "sup_mmc") and config.contrastive_weight > 0:
        mode = "unsupervised" if config.method == "unsup_mmc" else "supervised"
        terms = [
            losses.baseline_contrastive(reps[a], reps[b], batch.labels, mode, config.temperature)
            for a, b in pairs
        ]
        l_con = functools.reduce(ad.add, terms)

    return losses.build_loss_bundle(l_uni, l_multi, l_con, weight, diagnostics)


def train(config, dataset, state, metrics_path=None):
    """Run the optimization; returns (best model state, run metrics).

    On divergence the partial metrics are written (when a path is given)
    and attached to the raised TrainingDiverged.
    """
    if dataset.spec.num_modalities != state.spec.num_modalities:
        raise ShapeError(
            f"dataset has {dataset.spec.num_modalities} modalities, "
            f"model expects {state.spec.num_modalities}"
        )
    rng = np.random.default_rng(config.seed)
    trainable = _trainable_parameters(state, config)
    moments = AdamMoments()
    scheduler = PlateauSchedule(config.learning_rate, config.plateau_patience, config.plateau_factor)
    metrics = RunMetrics(config.method, config.seed, state.spec.num_modalities)
    train_batch = dataset.train.batch
    best_acc = -np.inf
    best_state = state.clone()
    best_epoch = 0

    try:
        for epoch in range(1, config.max_epochs + 1):
            epoch_config = config
            if epoch <= config.contrastive_warmup_epochs:
                epoch_config = dataclasses.replace(config, contrastive_warmup_epochs=0,
                                                   contrastive_weight=0.0)
            epoch_lr = scheduler.learning_rate
            hyper = AdamHyper(epoch_lr, config.weight_decay)
            sums = {"total": 0.0, "unimodal": 0.0, "multimodal": 0.0, "contrastive": 0.0}
            seen = 0
            order = rng.permutation(train_batch.size)
            for start in range(0, train_batch.size, config.effective_batch_size):
                group = order[start:start + config.effective_batch_size]
                for name, tensor in trainable:
                    tensor.grad = None
                for micro_start in range(0, len(group), config.micro_batch_size):
                    micro = group[micro_start:micro_start + config.micro_batch_size]
                    batch = train_batch.take(micro)
                    bundle = _compose_batch_loss(state, epoch_config, batch)
                    components = bundle.component_values()
                    if not np.isfinite(components["total"]):
                        raise TrainingDiverged(
                            f"non-finite loss in epoch {epoch} (method {config.method})"
                        )
                    ad.backward(ad.scale(bundle.total, len(micro) / len(group)))
                    for key in sums:
                        sums[key] += components[key] * len(micro)
                    seen += len(micro)
                adam_step(
                    [(name, t.values) for name, t in trainable],
                    [t.grad for _, t in trainable],
                    moments,
                    hyper,
                )

            report = evaluate(state, dataset.valid.batch)
            metrics.epochs.append(
                EpochRecord(
                    epoch=epoch,
                    learning_rate=epoch_lr,
                    loss_total=sums["total"] / seen,
                    loss_unimodal=sums["unimodal"] / seen,
                    loss_multimodal=sums["multimodal"] / seen,
                    loss_contrastive=sums["contrastive"] / seen,
                    accuracy_multimodal=report.multimodal_accuracy,
                    accuracy_unimodal=report.unimodal_accuracy,
                    both_correct=report.both_correct,
                    both_wrong=report.both_wrong,
                    exclusive=report.exclusive,
                    mean_cos_positive=report.mean_cos_positive,
                    mean_cos_semi_positive=report.mean_cos_semi_positive,
                    mean_cos_negative=report.mean_cos_negative,
                )
            )
            if report.multimodal_accuracy > best_acc:
                best_acc = report.multimodal_accuracy
                best_state = state.clone()
                best_epoch = epoch
            scheduler.update(report.multimodal_accuracy)
    except TrainingDiverged as diverged:
        diverged.metrics = metrics
        if metrics_path is not None:
            write_metrics(metrics, metrics_path)
        raise

    test_report = evaluate(best_state, dataset.test.batch)
    metrics.final = FinalRecord(
        best_epoch=best_epoch,
        accuracy_multimodal=test_report.multimodal_accuracy,
        accuracy_unimodal=test_report.unimodal_accuracy,
        both_correct=test_report.both_correct,
        both_wrong=test_report.both_wrong,
        exclusive=test_report.exclusive,
        mean_cos_positive=test_report.mean_cos_positive,
        mean_cos_semi_positive=test_report.mean_cos_semi_positive,
        mean_cos_negative=test_report.mean_cos_negative,
    )
    if metrics_path is not None:
        write_metrics(metrics, metrics_path)
    return best_state, metrics


def _metrics_columns(num_modalities):
    return (
        ["record", "method", "seed", "epoch", "learning_rate", "loss_total", "loss_unimodal",
         "loss_multimodal", "loss_contrastive", "accuracy_multimodal"]
        + [f"accuracy_unimodal_{m}" for m in range(num_modalities)]
        + ["both_correct", "both_wrong", "exclusive",
           "mean_cos_positive", "mean_cos_semi_positive", "mean_cos_negative"]
    )


def write_metrics(metrics, path):
    """Flat CSV, one row per epoch plus one flagged final summary row."""
    lines = [",".join(_metrics_columns(metrics.num_modalities))]
    for rec in metrics.epochs:
        lines.append(
            ",".join(
                ["epoch", metrics.method, str(metrics.seed), str(rec.epoch), repr(rec.learning_rate),
                 repr(rec.loss_total), repr(rec.loss_unimodal), repr(rec.loss_multimodal),
                 repr(rec.loss_contrastive), repr(rec.accuracy_multimodal)]
                + [repr(a) for a in rec.accuracy_unimodal]
                + [repr(rec.both_correct), repr(rec.both_wrong), repr(rec.exclusive),
                   repr(rec.mean_cos_positive), repr(rec.mean_cos_semi_positive),
                   repr(rec.mean_cos_negative)]
            )
        )
    if metrics.final is not None:
        rec = metrics.final
        lines.append(
            ",".join(
                ["final", metrics.method, str(metrics.seed), str(rec.best_epoch), "nan",
                 "nan", "nan", "nan", "nan", repr(rec.accuracy_multimodal)]
                + [repr(a) for a in rec.accuracy_unimodal]
                + [repr(rec.both_correct), repr(rec.both_wrong), repr(rec.exclusive),
                   repr(rec.mean_cos_positive), repr(rec.mean_cos_semi_positive),
                   repr(rec.mean_cos_negative)]
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_metrics(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines:
        raise ConfigurationError(f"{path}: empty metrics file")
    header = lines[0].split(",")
    uni_cols = [c for c in header if c.startswith("accuracy_unimodal_")]
    num_modalities = len(uni_cols)
    expected = _metrics_columns(num_modalities)
    if header != expected:
        raise ConfigurationError(f"{path}: unexpected metrics header")
    metrics = None
    for line in lines[1:]:
        cells = line.split(",")
        rowd = dict(zip(header, cells))
        if metrics is None:
            metrics = RunMetrics(rowd["method"], int(rowd["seed"]), num_modalities)
        uni = tuple(float(rowd[c]) for c in uni_cols)
        common = dict(
            accuracy_multimodal=float(rowd["accuracy_multimodal"]),
            accuracy_unimodal=uni,
            both_correct=float(rowd["both_correct"]),
            both_wrong=float(rowd["both_wrong"]),
            exclusive=float(rowd["exclusive"]),
            mean_cos_positive=float(rowd["mean_cos_positive"]),
            mean_cos_semi_positive=float(rowd["mean_cos_semi_positive"]),
            mean_cos_negative=float(rowd["mean_cos_negative"]),
        )
        if rowd["record"] == "epoch":
            metrics.epochs.append(
                EpochRecord(
                    epoch=int(rowd["epoch"]),
                    learning_rate=float(rowd["learning_rate"]),
                    loss_total=float(rowd["loss_total"]),
                    loss_unimodal=float(rowd["loss_unimodal"]),
                    loss_multimodal=float(rowd["loss_multimodal"]),
                    loss_contrastive=float(rowd["loss_contrastive"]),
                    **common,
                )
            )
        elif rowd["record"] == "final":
            metrics.final = FinalRecord(best_epoch=int(rowd["epoch"]), **common)
        else:
            raise ConfigurationError(f"{path}: unknown record kind {rowd['record']!r}")
    if metrics is None:
        raise ConfigurationError(f"{path}: metrics file has no records")
    return metrics


def export_embeddings(state, batch, path):
    """Per-sample representations for external projection tools.

    One row per (sample, block): sample id, block name (modality<m> or
    fused), label, then the vector as space-separated float64 reprs.
    """
    reps = model.encode(state, batch)
    fused, _ = model.fuse_and_predict(state, reps)
    blocks = [(f"modality{m}", reps[m].values) for m in range(len(reps))] + [("fused", fused.values)]
    lines = ["sample_id,block,label,values"]
    for name, matrix in blocks:
        for i in range(batch.size):
            vector = " ".join(repr(float(v)) for v in matrix[i])
            lines.append(f"{batch.sample_ids[i]},{name},{batch.labels[i]},{vector}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_embeddings(path):
    """Parse an embeddings file back into {block: (ids, labels, matrix)}."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    if not lines or lines[0] != "sample_id,block,label,values":
        raise ConfigurationError(f"{path}: not an embeddings file")
    grouped = {}
    for line in lines[1:]:
        sid, block, label, values = line.split(",")
        grouped.setdefault(block, []).append(
            (int(sid), int(label), np.array([float(v) for v in values.split(" ")]))
        )
    out = {}
    for block, rows in grouped.items():
        out[block] = (
            np.array([r[0] for r in rows], dtype=np.int64),
            np.array([r[1] for r in rows], dtype=np.int32),
            np.vstack([r[2] for r in rows]),
        )
    return out


def summarize_runs(metric_files):
    """Mean/std of final test multimodal accuracy per method across seeds."""
    by_method = {}
    for path in metric_files:
        metrics = read_metrics(path)
        if metrics.final is None:
            raise ConfigurationError(f"{path}: run has no final record")
        by_method.setdefault(metrics.method, []).append(metrics.final.accuracy_multimodal)
    summary = {}
    for method, accs in by_method.items():
        arr = np.asarray(accs)
        summary[method] = {
            "runs": len(accs),
            "mean": float(arr.mean()),
            "std": float(arr.std()),
            "min": float(arr.min()),
            "max": float(arr.max()),
        }
    return summary
