"""Training objectives and the unimodal-prediction-driven pair categorization.

For one modality pair, each batch index is sorted by its two unimodal
predictions into exactly one of three sets:

    both correct          -> positive
    exactly one correct   -> semi-positive (annotated with the correct side)
    both wrong            -> negative

The contrastive term is a single batch-level log of a ratio: summed
exponentials of the per-sample cosine similarities over positive and
semi-positive indices, divided by the sum over the whole batch. For a
semi-positive sample the correct side's representation row enters the
cosine through a stop-gradient barrier, everywhere it appears, so only
the wrong side is pulled toward it. Negative samples appear in the
denominator only, which pushes their similarity down.

Cross-entropy terms are means over the batch, so magnitudes do not depend
on batch size and the contrastive weight keeps one meaning everywhere.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DataError, ShapeError

BASELINE_MODES = ("unsupervised", "supervised")


@dataclass(frozen=True)
class PairSets:
    """Partition of batch indices {0..n-1} for one modality pair (a, b).

    semi_positive holds (index, correct_side) with correct_side 0 for
    modality a and 1 for modality b.
    """

    positive: tuple[int, ...]
    semi_positive: tuple[tuple[int, int], ...]
    negative: tuple[int, ...]
    batch_size: int

    def __post_init__(self):
        semi_indices = [i for i, _ in self.semi_positive]
        combined = sorted([*self.positive, *semi_indices, *self.negative])
        if combined != list(range(self.batch_size)):
            raise ConfigurationError("pair sets must partition the batch indices exactly")
        if any(side not in (0, 1) for _, side in self.semi_positive):
            raise ConfigurationError("semi-positive annotation must name side 0 or 1")

    @property
    def counts(self):
        return len(self.positive), len(self.semi_positive), len(self.negative)


@dataclass
class PairDiagnostics:
    """Per-pair batch statistics; cosine means are nan for empty categories."""

    modality_a: int
    modality_b: int
    n_positive: int
    n_semi_positive: int
    n_negative: int
    mean_cos_positive: float
    mean_cos_semi_positive: float
    mean_cos_negative: float
    empty_numerator: bool = False


@dataclass
class LossBundle:
    """All loss components of one batch; total = unimodal + multimodal + weight * contrastive."""

    unimodal: ad.Tensor
    multimodal: ad.Tensor
    contrastive: ad.Tensor
    total: ad.Tensor
    pair_diagnostics: list

    def component_values(self):
        return {
            "total": self.total.item(),
            "unimodal": self.unimodal.item(),
            "multimodal": self.multimodal.item(),
            "contrastive": self.contrastive.item(),
        }


def build_loss_bundle(l_uni, l_multi, l_mmc, weight, pair_diagnostics=()):
    """Assemble the bundle; methods without a term pass a constant zero."""
    total = total_objective(l_uni, l_multi, l_mmc, weight)
    return LossBundle(
        unimodal=l_uni,
        multimodal=l_multi,
        contrastive=l_mmc,
        total=total,
        pair_diagnostics=list(pair_diagnostics),
    )


def categorize_pairs(labels, preds_a, preds_b):
    """Sort batch indices by the two unimodal predictions' correctness.

    Consumes integer predictions only; no gradient path exists through it.
    """
    labels = np.asarray(labels)
    preds_a = np.asarray(preds_a)
    preds_b = np.asarray(preds_b)
    if not labels.shape == preds_a.shape == preds_b.shape or labels.ndim != 1:
        raise ShapeError(
            f"labels/predictions must be equal-length vectors, got "
            f"{labels.shape}, {preds_a.shape}, {preds_b.shape}"
        )
    correct_a = preds_a == labels
    correct_b = preds_b == labels
    positive = tuple(np.flatnonzero(correct_a & correct_b).tolist())
    negative = tuple(np.flatnonzero(~correct_a & ~correct_b).tolist())
    semi = tuple(
        (int(i), 0 if correct_a[i] else 1) for i in np.flatnonzero(correct_a ^ correct_b)
    )
    return PairSets(positive, semi, negative, batch_size=labels.shape[0])


def _check_logits(labels, logits, what):
    if logits.values.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"{what}: logits shape {logits.shape} does not align with {labels.shape[0]} labels"
        )
    num_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DataError(f"{what}: labels must lie in [0, {num_classes})")


def _mean_cross_entropy(labels, logits):
    n, num_classes = logits.shape
    one_hot = np.zeros((n, num_classes))
    one_hot[np.arange(n), labels] = 1.0
    picked = ad.sum(ad.mul(ad.log_softmax(logits), ad.Tensor(one_hot)))
    return ad.scale(picked, -1.0 / n)


def unimodal_loss(labels, unimodal_logits):
    """Sum over modalities of the mean cross-entropy of each unimodal head."""
    labels = np.asarray(labels)
    if not unimodal_logits:
        raise ConfigurationError("need logits for at least one modality")
    terms = []
    for m, logits in enumerate(unimodal_logits):
        _check_logits(labels, logits, f"unimodal modality {m}")
        terms.append(_mean_cross_entropy(labels, logits))
    return functools.reduce(ad.add, terms)


def multimodal_loss(labels, fused_logits):
    labels = np.asarray(labels)
    _check_logits(labels, fused_logits, "multimodal")
    return _mean_cross_entropy(labels, fused_logits)


def _sum_terms(terms):
    return functools.reduce(ad.add, terms)


def pairwise_mmc_loss(rep_a, rep_b, pair_sets, temperature, use_semi=True, use_neg=True):
    """Contrastive term for one modality pair (batch-level log-ratio form).

    use_semi=False drops the semi-positive indices from the numerator and
    their stop-gradient treatment (they stay in the denominator);
    use_neg=False removes the negative indices from the denominator.
    Returns a constant zero when the numerator index set is empty.
    """
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if rep_a.values.ndim != 2 or rep_a.shape != rep_b.shape:
        raise ShapeError(
            f"representations must be equal-shape matrices, got {rep_a.shape} and {rep_b.shape}"
        )
    if pair_sets.batch_size != rep_a.shape[0]:
        raise ShapeError(
            f"pair sets cover {pair_sets.batch_size} rows, representations have {rep_a.shape[0]}"
        )

    semi_side = dict(pair_sets.semi_positive)
    numerator_idx = sorted(pair_sets.positive) + (sorted(semi_side) if use_semi else [])
    numerator_idx.sort()
    denominator_idx = sorted([*pair_sets.positive, *semi_side])
    if use_neg:
        denominator_idx = sorted([*denominator_idx, *pair_sets.negative])

    if not numerator_idx:
        return ad.Tensor(0.0)

    exp_sim = {}
    for i in denominator_idx:
        row_a = ad.row(rep_a, i)
        row_b = ad.row(rep_b, i)
        if use_semi and i in semi_side:
            if semi_side[i] == 0:
                row_a = ad.detach(row_a)
            else:
                row_b = ad.detach(row_b)
        cos = ad.cosine_similarity(row_a, row_b, index=i)
        exp_sim[i] = ad.exp(ad.scale(cos, 1.0 / temperature))

    numerator = _sum_terms([exp_sim[i] for i in numerator_idx])
    denominator = _sum_terms([exp_sim[i] for i in denominator_idx])
    return ad.add(ad.log(denominator), ad.scale(ad.log(numerator), -1.0))


def total_mmc_loss(representations, pair_sets, temperature, use_semi=True, use_neg=True):
    """Sum of the pairwise contrastive terms over all unordered modality pairs.

    `pair_sets` maps (i, j) with i < j to the pair's PairSets.
    """
    num_modalities = len(representations)
    if num_modalities < 2:
        raise ConfigurationError(f"contrastive term needs >= 2 modalities, got {num_modalities}")
    expected = {(i, j) for i in range(num_modalities) for j in range(i + 1, num_modalities)}
    if set(pair_sets) != expected:
        raise ConfigurationError(f"pair sets keys {sorted(pair_sets)} != expected {sorted(expected)}")
    terms = [
        pairwise_mmc_loss(
            representations[i], representations[j], pair_sets[(i, j)], temperature, use_semi, use_neg
        )
        for (i, j) in sorted(expected)
    ]
    return _sum_terms(terms)


def total_objective(l_uni, l_multi, l_mmc, weight):
    """Total training objective: unimodal + multimodal + weight * contrastive."""
    if weight < 0:
        raise ConfigurationError(f"contrastive weight must be >= 0, got {weight}")
    return ad.add(ad.add(l_uni, l_multi), ad.scale(l_mmc, weight))


def baseline_contrastive(rep_a, rep_b, labels, mode, temperature):
    """Figure-3-style cross-modal baselines.

    unsupervised: symmetric InfoNCE where the positive for anchor row i of
    one modality is row i of the other modality and every other row is a
    negative, averaged over both directions.

    supervised: positives are all cross-modal rows sharing the anchor's
    label (same-index pairs always included), scored as the mean log-ratio
    over positives, averaged over both directions.
    """
    if mode not in BASELINE_MODES:
        raise ConfigurationError(f"mode must be one of {BASELINE_MODES}, got {mode!r}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if rep_a.values.ndim != 2 or rep_a.shape != rep_b.shape:
        raise ShapeError(
            f"representations must be equal-shape matrices, got {rep_a.shape} and {rep_b.shape}"
        )
    labels = np.asarray(labels)
    n = rep_a.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not align with {n} rows")
    if mode == "unsupervised" and n < 2:
        raise ConfigurationError("unsupervised baseline needs a batch of >= 2 (no negatives otherwise)")

    rows_a = [ad.row(rep_a, i) for i in range(n)]
    rows_b = [ad.row(rep_b, i) for i in range(n)]
    # sim[i][j]: scaled cosine of a-row i against b-row j; reused by both
    # directions since cosine is symmetric in value and gradient.
    sim = [
        [
            ad.scale(ad.cosine_similarity(rows_a[i], rows_b[j], index=(i, j)), 1.0 / temperature)
            for j in range(n)
        ]
        for i in range(n)
    ]
    exp_sim = [[ad.exp(s) for s in row_sim] for row_sim in sim]

    if mode == "unsupervised":
        positives = [[i] for i in range(n)]
    else:
        same_object = rep_a is rep_b
        positives = []
        for i in range(n):
            pos = [j for j in range(n) if labels[j] == labels[i] and not (same_object and j == i)]
            positives.append(pos or [i])

    def direction_loss(get_sim, get_exp):
        anchor_terms = []
        for i in range(n):
            log_denominator = ad.log(_sum_terms([get_exp(i, j) for j in range(n)]))
            ratio_terms = [
                ad.add(log_denominator, ad.scale(get_sim(i, p), -1.0)) for p in positives[i]
            ]
            anchor_terms.append(ad.scale(_sum_terms(ratio_terms), 1.0 / len(positives[i])))
        return ad.scale(_sum_terms(anchor_terms), 1.0 / n)

    a_to_b = direction_loss(lambda i, j: sim[i][j], lambda i, j: exp_sim[i][j])
    b_to_a = direction_loss(lambda i, j: sim[j][i], lambda i, j: exp_sim[j][i])
    return ad.scale(ad.add(a_to_b, b_to_a), 0.5)


def pair_diagnostics(pair_sets, rep_a_values, rep_b_values, modality_a, modality_b):
    """Gradient-free per-category cosine means for metrics and logging."""
    dots = (rep_a_values * rep_b_values).sum(axis=1)
    norms = np.linalg.norm(rep_a_values, axis=1) * np.linalg.norm(rep_b_values, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(norms > 0, dots / norms, np.nan)

    def mean_over(indices):
        return float(np.mean(cos[list(indices)])) if indices else float("nan")

    semi_indices = tuple(i for i, _ in pair_sets.semi_positive)
    return PairDiagnostics(
        modality_a=modality_a,
        modality_b=modality_b,
        n_positive=len(pair_sets.positive),
        n_semi_positive=len(semi_indices),
        n_negative=len(pair_sets.negative),
        mean_cos_positive=mean_over(pair_sets.positive),
        mean_cos_semi_positive=mean_over(semi_indices),
        mean_cos_negative=mean_over(pair_sets.negative),
        empty_numerator=(len(pair_sets.positive) + len(semi_indices)) == 0,
    )
