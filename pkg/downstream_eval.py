"""
Linear probes, their losses and evaluation metrics.

Probes are single linear layers trained on frozen embeddings: per-epoch
sleep staging, per-second SDB segmentation, Cox survival on subject
embeddings, MAE regression and binary classification. Metrics follow the
usual definitions (accuracy, macro-F1, Cohen's kappa, Harrell's C-index).
"""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import welch
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

import numerics_core as nc
from errors import ConfigError, DataError, ShapeError
from nn_layers import Linear, Module
from numerics_core import NDValue
from record_store import SDB_CLASSES, STAGE_CODES, STAGES, ModalityKind
from signal_pipeline import EPOCH_SAMPLES, TARGET_RATE, StandardRecord

logger = logging.getLogger(__name__)

WAKE_MARGIN_EPOCHS = 60
FEW_SHOT_SIZES = (1, 5, 10, 20, 30, 50, 90)

TASK_OUTPUTS = {'stage5': len(STAGES), 'sdb3': len(SDB_CLASSES), 'survival': 1, 'regression': 1, 'binary': 2}
CLASSIFICATION_TASKS = ('stage5', 'sdb3', 'binary')

POWER_BANDS = {
    'delta': (0.5, 4.0),
    'theta': (4.0, 8.0),
    'alpha': (8.0, 12.0),
    'sigma': (12.0, 15.0),
    'beta': (15.0, 30.0),
    'high': (30.0, 45.0),
}


@dataclass
class ProbeConfig:
    steps: int = 300
    batch_size: int = 4096
    weight_decay: float = 1e-4
    lr_min: float = 1e-8
    weighted: bool = True
    learning_rates: Dict[str, float] = field(default_factory=lambda: {
        'stage5': 1e-2, 'sdb3': 4e-4, 'survival': 1e-2, 'regression': 1e-2, 'binary': 1e-2})

    def validate(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("probe steps and batch size must be positive")
        missing = [t for t in TASK_OUTPUTS if t not in self.learning_rates]
        if missing:
            raise ConfigError(f"probe learning rates missing for tasks {missing}")


# -------------------------------------------------------------- class weights

def _class_counts(counts: Sequence[float]) -> Tuple[np.ndarray, bool]:
    counts = np.asarray(counts, dtype=np.float64)
    zero = bool(np.any(counts <= 0))
    if zero:
        logger.warning(f"Zero-count classes in {counts.tolist()}; floored at 1")
    return np.maximum(counts, 1.0), zero


def stage_class_weights(counts: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """w_k = log_5(N / N_k); returns (weights, zero-count flag)"""
    floored, zero = _class_counts(counts)
    return np.log(floored.sum() / floored) / math.log(5.0), zero


def sdb_class_weights(counts: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """w_k = N / N_k; returns (weights, zero-count flag)"""
    floored, zero = _class_counts(counts)
    return floored.sum() / floored, zero


def weighted_cross_entropy(logits: NDValue, labels: np.ndarray, weights: Optional[np.ndarray] = None) -> NDValue:
    """
    Class-weighted cross-entropy, sum_i w_{y_i} * -log p(y_i) / sum_i w_{y_i}.

    Args:
        logits: [N, K] unnormalized scores
        labels: [N] class codes
        weights: [K] per-class weights; None weighs every class 1

    Returns:
        Scalar loss
    """
    labels = np.asarray(labels, dtype=int)
    if logits.shape[0] != len(labels):
        raise ShapeError('weighted_cross_entropy', logits.shape, labels.shape, 'one label per row')
    log_prob = nc.log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]
    w = np.ones(len(labels)) if weights is None else np.asarray(weights, dtype=np.float64)[labels]
    return -nc.reduce_sum(log_prob * w) * (1.0 / w.sum())


# ------------------------------------------------------------ wake truncation

@dataclass
class WakeWindow:
    start: int
    end: int
    all_wake: bool = False


def wake_truncate(hypnogram: Sequence) -> WakeWindow:
    """
    Keep at most 30 minutes of Wake before the first and after the last non-Wake epoch.

    Args:
        hypnogram: stage names or codes, one per epoch

    Returns:
        WakeWindow with a half-open [start, end) epoch range; an all-Wake
        night keeps every epoch and sets ``all_wake``
    """
    codes = np.array([STAGE_CODES[s] if isinstance(s, str) else int(s) for s in hypnogram], dtype=int)
    sleep = np.flatnonzero(codes != STAGE_CODES['W'])
    if sleep.size == 0:
        logger.warning(f"All {len(codes)} epochs are Wake; keeping the whole record")
        return WakeWindow(0, len(codes), all_wake=True)
    return WakeWindow(max(0, int(sleep[0]) - WAKE_MARGIN_EPOCHS),
                      min(len(codes), int(sleep[-1]) + WAKE_MARGIN_EPOCHS + 1))


# ------------------------------------------------------------------- survival

@dataclass
class SurvivalBatch:
    risks: NDValue
    times: np.ndarray
    events: np.ndarray

    @property
    def risk_sets(self) -> np.ndarray:
        """R[i, k] = time_k >= time_i; tied times share the full risk set"""
        return self.times[None, :] >= self.times[:, None]

    @property
    def n_events(self) -> int:
        return int(self.events.sum())


def cox_ph_loss(batch: SurvivalBatch) -> NDValue:
    """
    Negative log partial likelihood, averaged over events (Breslow ties).

    Args:
        batch: risks [N], times [N] and event indicators [N]

    Returns:
        Scalar loss

    Raises:
        DataError: the batch holds no events
    """
    risks = nc.as_value(batch.risks).reshape(-1)
    events = np.asarray(batch.events, dtype=np.float64)
    if batch.n_events == 0:
        raise DataError("no events in batch")
    shift = float(risks.data.max())
    scaled = nc.exp(risks - shift)
    log_risk_set = nc.log(nc.matmul(batch.risk_sets.astype(np.float64), scaled.reshape(-1, 1)).reshape(-1)) + shift
    return -nc.reduce_sum((risks - log_risk_set) * events) * (1.0 / batch.n_events)


def c_index(risks: Sequence[float], times: Sequence[float], events: Sequence[int]) -> float:
    """
    Harrell's C: pairs (i, j) with an event at i and time_j > time_i; risk ties count 0.5.

    Args:
        risks: predicted risk, higher means earlier event
        times: observed or censoring times
        events: 1 for an observed event, 0 for censored

    Returns:
        Fraction of concordant comparable pairs in [0, 1]
    """
    risks = np.asarray(risks, dtype=np.float64).ravel()
    times = np.asarray(times, dtype=np.float64).ravel()
    events = np.asarray(events).ravel().astype(bool)
    comparable = events[:, None] & (times[None, :] > times[:, None])
    n_pairs = int(comparable.sum())
    if n_pairs == 0:
        raise DataError("c_index needs at least one comparable pair")
    diff = risks[:, None] - risks[None, :]
    score = (diff > 0).astype(float) + 0.5 * (diff == 0)
    return float(score[comparable].sum() / n_pairs)


# -------------------------------------------------------------------- metrics

@dataclass
class ClassificationReport:
    accuracy: float
    macro_f1: float
    kappa: float
    per_class: List[Dict] = field(default_factory=list)
    kappa_undefined: bool = False

    def as_dict(self) -> Dict:
        return asdict(self)


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> np.ndarray:
    """
    Counts over a fixed label set, so absent classes keep their row and column.

    Args:
        y_true: true class codes in [0, n_classes)
        y_pred: predicted class codes, same length
        n_classes: size of the label set

    Returns:
        [n_classes, n_classes] int64 counts, rows true and columns predicted
    """
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if len(y_true) != len(y_pred):
        raise ShapeError('confusion_matrix', y_true.shape, y_pred.shape, 'one prediction per label')
    outside = [c for c in np.union1d(y_true, y_pred) if not 0 <= c < n_classes]
    if outside:
        raise DataError(f"class codes {outside} fall outside [0, {n_classes})")
    return sk_confusion_matrix(y_true, y_pred, labels=np.arange(n_classes)).astype(np.int64)


def classification_metrics(confusion: np.ndarray, class_names: Optional[Sequence[str]] = None) -> ClassificationReport:
    """
    Accuracy, macro-F1 over every class and Cohen's kappa from a confusion matrix.

    Args:
        confusion: [K, K] counts, rows true and columns predicted
        class_names: K labels for the per-class rows

    Returns:
        ClassificationReport; kappa is 0 with ``kappa_undefined`` set when
        chance agreement is 1
    """
    confusion = np.asarray(confusion, dtype=np.float64)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ShapeError('classification_metrics', confusion.shape, (confusion.shape[0],) * 2, 'square matrix')
    if np.any(confusion < 0) or confusion.sum() == 0:
        raise DataError("confusion matrix must be non-negative with at least one sample")
    total = confusion.sum()
    tp = np.diag(confusion)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)

    p_o = tp.sum() / total
    p_e = float((support * predicted).sum() / total ** 2)
    undefined = math.isclose(p_e, 1.0)
    if undefined:
        logger.warning("Chance agreement is 1; kappa reported as 0")
    kappa = 0.0 if undefined else float((p_o - p_e) / (1.0 - p_e))

    names = list(class_names) if class_names is not None else [str(k) for k in range(len(tp))]
    per_class = [{'class': names[k], 'precision': float(precision[k]), 'recall': float(recall[k]),
                  'f1': float(f1[k]), 'support': int(support[k])} for k in range(len(tp))]
    return ClassificationReport(float(p_o), float(f1.mean()), kappa, per_class, undefined)


# --------------------------------------------------------------------- probes

class ProbeHead(Module):
    """Linear head over standardized frozen features"""

    def __init__(self, in_dim: int, task: str, rng: np.random.Generator):
        if task not in TASK_OUTPUTS:
            raise ConfigError(f"Unknown probe task {task}; expected one of {list(TASK_OUTPUTS)}")
        self.task = task
        self.linear = Linear(in_dim, TASK_OUTPUTS[task], rng, zero_init=True)
        self.feature_mean = np.zeros(in_dim)
        self.feature_std = np.ones(in_dim)
        self.target_center = 0.0
        self.target_scale = 1.0

    def forward(self, features: np.ndarray) -> NDValue:
        z = (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std
        return self.linear(NDValue(z))

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Class indices, risk scores or regression values depending on the task"""
        with nc.no_grad():
            out = self.forward(features).data
        if self.task in CLASSIFICATION_TASKS:
            return out.argmax(axis=-1)
        if self.task == 'regression':
            return out[:, 0] * self.target_scale + self.target_center
        return out[:, 0]


@dataclass
class ProbeResult:
    head: ProbeHead
    losses: List[float]
    class_weights: Optional[np.ndarray] = None
    zero_count_classes: bool = False


def _task_loss(head: ProbeHead, features: np.ndarray, targets: np.ndarray, events: Optional[np.ndarray],
               weights: Optional[np.ndarray]) -> NDValue:
    out = head(features)
    if head.task in CLASSIFICATION_TASKS:
        return weighted_cross_entropy(out, targets, weights)
    if head.task == 'survival':
        return cox_ph_loss(SurvivalBatch(out, targets, events))
    return nc.reduce_mean(nc.abs_(out.reshape(-1) - targets))


def probe_train(embeddings: np.ndarray, labels: Sequence, task: str, cfg: Optional[ProbeConfig] = None,
                rng: Optional[np.random.Generator] = None, events: Optional[Sequence[int]] = None) -> ProbeResult:
    """
    Fit a linear probe with AdamW and a cosine schedule.

    Args:
        embeddings: [N, D] frozen features
        labels: class codes, regression targets or survival times
        task: one of stage5, sdb3, survival, regression, binary
        events: event indicators, survival only

    Returns:
        ProbeResult with the head, per-step losses and the class weights used
    """
    cfg = cfg or ProbeConfig()
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    features = np.asarray(embeddings, dtype=np.float64)
    targets = np.asarray(labels, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError('probe_train', features.shape, (-1, -1), 'expects [N, D] embeddings')
    if len(targets) != len(features):
        raise DataError(f"{len(targets)} labels for {len(features)} embeddings")
    if task == 'survival':
        if events is None or len(events) != len(features):
            raise DataError("survival probe needs one event indicator per embedding")
        events = np.asarray(events, dtype=np.float64)

    head = ProbeHead(features.shape[1], task, rng)
    head.feature_mean = features.mean(axis=0)
    head.feature_std = np.maximum(features.std(axis=0), 1e-8)

    weights, zero_flag = None, False
    if task in CLASSIFICATION_TASKS:
        targets = targets.astype(int)
        if len(np.unique(targets)) < 2:
            raise DataError(f"degenerate labels for {task}: a single class {int(targets[0])} present")
        counts = np.bincount(targets, minlength=TASK_OUTPUTS[task])
        if cfg.weighted and task == 'stage5':
            weights, zero_flag = stage_class_weights(counts)
        elif cfg.weighted and task == 'sdb3':
            weights, zero_flag = sdb_class_weights(counts)
    elif task == 'regression':
        head.target_center = float(np.median(targets))
        head.target_scale = float(max(targets.std(), 1e-8))
        targets = (targets - head.target_center) / head.target_scale

    optimizer = nc.AdamW(head.named_parameters(), lr=cfg.learning_rates[task], weight_decay=cfg.weight_decay)
    full_batch = task == 'survival' or len(features) <= cfg.batch_size
    losses = []
    for step in range(cfg.steps):
        if full_batch:
            index = slice(None)
        else:
            index = rng.choice(len(features), cfg.batch_size, replace=False)
        optimizer.zero_grad()
        loss = _task_loss(head, features[index], targets[index], None if events is None else events[index], weights)
        loss.backward()
        optimizer.step(nc.cosine_lr(step, cfg.steps, cfg.learning_rates[task], cfg.lr_min))
        losses.append(loss.item())
    logger.debug(f"{task} probe: loss {losses[0]:.4f} -> {losses[-1]:.4f} over {cfg.steps} steps")
    return ProbeResult(head, losses, weights, zero_flag)


def evaluate_probe(head: ProbeHead, embeddings: np.ndarray, labels: Sequence,
                   events: Optional[Sequence[int]] = None) -> Dict:
    """
    Task-appropriate metrics on held-out embeddings.

    Args:
        head: trained probe
        embeddings: [N, D] features
        labels: class codes, survival times or regression targets
        events: event indicators, survival only

    Returns:
        ``report``, ``confusion`` and ``class_names`` for classification
        tasks, ``c_index`` for survival, ``mae`` for regression
    """
    predictions = head.predict(embeddings)
    labels = np.asarray(labels)
    if len(labels) != len(predictions):
        raise DataError(f"{len(labels)} labels for {len(predictions)} embeddings")
    if head.task in CLASSIFICATION_TASKS:
        names = {'stage5': STAGES, 'sdb3': SDB_CLASSES}.get(head.task, ('0', '1'))
        confusion = confusion_matrix(labels.astype(int), predictions, TASK_OUTPUTS[head.task])
        return {'report': classification_metrics(confusion, names), 'confusion': confusion, 'class_names': list(names)}
    if head.task == 'survival':
        return {'c_index': c_index(predictions, labels, events)}
    return {'mae': float(np.mean(np.abs(predictions - labels.astype(float))))}


def metrics_record(task: str, split: str, result: Dict, config_hash: str = '') -> Dict:
    """Flat metrics JSON with every key present; metrics that do not apply are null"""
    report = result.get('report')
    return {
        'task': task,
        'split': split,
        'accuracy': report.accuracy if report else None,
        'macro_f1': report.macro_f1 if report else None,
        'kappa': report.kappa if report else None,
        'c_index': result.get('c_index'),
        'mae': result.get('mae'),
        'per_class': report.per_class if report else [],
        'config_hash': config_hash,
    }


def confusion_frame(confusion: np.ndarray, class_names: Sequence[str]) -> pd.DataFrame:
    return pd.DataFrame(confusion, index=pd.Index(class_names, name='true'), columns=list(class_names))


# -------------------------------------------------------- bandpower reference

def bandpower_features(record: StandardRecord) -> np.ndarray:
    """
    Per-epoch log Welch band powers of every high-frequency channel except ECG.

    Args:
        record: standardized record at 100 Hz

    Returns:
        [E, channels * bands] features
    """
    blocks = []
    for kind, x in record.signals.items():
        if kind.frequency_class != 'high' or kind == ModalityKind.ECG:
            continue
        epochs = x[:, :record.n_epochs * EPOCH_SAMPLES].reshape(x.shape[0], record.n_epochs, EPOCH_SAMPLES)
        freqs, power = welch(epochs, fs=TARGET_RATE, nperseg=256, axis=-1)
        for lo, hi in POWER_BANDS.values():
            band = (freqs >= lo) & (freqs < hi)
            blocks.append(np.log(power[..., band].mean(axis=-1) + 1e-12).T)
    if not blocks:
        raise DataError(f"Record {record.record_id} has no channels for band power features")
    return np.concatenate(blocks, axis=1)


# ------------------------------------------------------------------ few-shot

def few_shot_curve(subjects: Sequence[Tuple[np.ndarray, np.ndarray]], test_features: np.ndarray,
                   test_labels: np.ndarray, cfg: Optional[ProbeConfig] = None,
                   rng: Optional[np.random.Generator] = None,
                   sizes: Sequence[int] = FEW_SHOT_SIZES) -> pd.DataFrame:
    """
    Stage probe accuracy and macro-F1 against the number of training subjects.

    Sizes above the available subject count are capped and deduplicated;
    subsets whose labels hold a single class are skipped.

    Args:
        subjects: (features [E, D], stages [E]) per training subject
        test_features: [N, D] held-out features
        test_labels: [N] held-out stage codes
        sizes: numbers of training subjects to try

    Returns:
        DataFrame with n_subjects, accuracy and macro_f1 columns
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if not subjects:
        raise DataError("few-shot curve needs at least one training subject")
    order = rng.permutation(len(subjects))
    rows = []
    for n in sorted({min(n, len(subjects)) for n in sizes}):
        chosen = [subjects[i] for i in order[:n]]
        features = np.concatenate([f for f, _ in chosen])
        labels = np.concatenate([y for _, y in chosen])
        if len(np.unique(labels)) < 2:
            logger.warning(f"Few-shot subset of {n} subjects has a single stage; skipped")
            continue
        result = probe_train(features, labels, 'stage5', cfg, rng)
        report = evaluate_probe(result.head, test_features, test_labels)['report']
        rows.append({'n_subjects': n, 'accuracy': report.accuracy, 'macro_f1': report.macro_f1})
    return pd.DataFrame(rows, columns=['n_subjects', 'accuracy', 'macro_f1'])
