"""
Night-scale encoder over per-epoch embeddings.

A bidirectional stack of selective state-space blocks reads the whole
night. Forward and backward states are read out at the end of every
90-minute interval and trained with a demographic-guided contrastive
loss, whose soft targets favour subjects of similar age, BMI and sex.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import numerics_core as nc
from errors import ConfigError, DataError, ShapeError
from nn_layers import Linear, Module, RMSNorm
from numerics_core import NDValue, Parameter
from record_store import DemographicProfile

logger = logging.getLogger(__name__)


@dataclass
class MacroConfig:
    d_model: int = 512
    depth: int = 2
    state_dim: int = 16
    interval_epochs: int = 180
    max_epochs: int = 1080
    rho: float = 0.1
    upsilon: float = 0.5
    lambda_sex: float = 1.0
    use_age: bool = True
    use_bmi: bool = True
    use_sex: bool = True
    tie_directions: bool = False
    batch_size: int = 8

    @classmethod
    def desk(cls) -> 'MacroConfig':
        return cls(d_model=128, depth=1, state_dim=8)

    def validate(self):
        if self.interval_epochs <= 0:
            raise ConfigError(f"interval_epochs must be positive, got {self.interval_epochs}")
        if self.rho <= 0 or self.upsilon <= 0:
            raise ConfigError(f"temperatures must be positive, got rho={self.rho}, upsilon={self.upsilon}")
        if self.batch_size < 2:
            raise ConfigError("DGCL needs at least two subjects per batch")


class SelectiveSSM(Module):
    """
    Diagonal selective state-space layer.

    A = -exp(A_log) keeps every discretized decay exp(delta * A) in (0, 1);
    delta, B and C are projections of the input, delta through a softplus.
    """

    def __init__(self, dim: int, state_dim: int, rng: np.random.Generator):
        self.A_log = Parameter(np.tile(np.log(np.arange(1, state_dim + 1, dtype=float)), (dim, 1)),
                               no_decay=True)
        self.D = Parameter(np.ones(dim), no_decay=True)
        self.delta_proj = Linear(dim, dim, rng)
        step = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), dim))
        self.delta_proj.bias.data = np.log(np.expm1(step))
        self.B_proj = Linear(dim, state_dim, rng)
        self.C_proj = Linear(dim, state_dim, rng)
        self.gate = Linear(dim, dim, rng)

    def forward(self, x: NDValue, direction: str = 'forward') -> NDValue:
        return ssm_scan(x, self, direction)


def ssm_scan(sequence: NDValue, params: SelectiveSSM, direction: str = 'forward') -> NDValue:
    """
    y_t = silu(gate(x_t)) * (C_t . h_t + D * x_t) with h_t = exp(delta_t A) h_{t-1} + delta_t B_t x_t.

    The backward direction reverses the sequence, scans and reverses back.
    """
    if direction not in ('forward', 'backward'):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction}")
    x = nc.as_value(sequence)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError('ssm_scan', x.shape, (-1, params.D.shape[0]), 'expects a non-empty [L, d] sequence')
    if direction == 'backward':
        x = nc.flip(x, 0)
    delta = nc.softplus(params.delta_proj(x))                      # [L, d]
    A = -nc.exp(params.A_log)                                      # [d, N]
    B = params.B_proj(x)                                           # [L, N]
    C = params.C_proj(x)                                           # [L, N]
    d_expand = delta.reshape(delta.shape[0], delta.shape[1], 1)
    decay = nc.exp(d_expand * A)                                   # [L, d, N]
    drive = d_expand * B.reshape(B.shape[0], 1, B.shape[1]) * x.reshape(x.shape[0], x.shape[1], 1)
    states = nc.linear_recurrence(decay, drive)
    y = nc.reduce_sum(states * C.reshape(C.shape[0], 1, C.shape[1]), axis=-1) + params.D * x
    y = y * nc.silu(params.gate(x))
    return nc.flip(y, 0) if direction == 'backward' else y


class MacroBlock(Module):
    """post_norm(x + ssm(pre_norm(x)))"""

    def __init__(self, dim: int, state_dim: int, rng: np.random.Generator):
        self.pre_norm = RMSNorm(dim)
        self.ssm = SelectiveSSM(dim, state_dim, rng)
        self.post_norm = RMSNorm(dim)

    def forward(self, x: NDValue, direction: str = 'forward') -> NDValue:
        return self.post_norm(x + self.ssm(self.pre_norm(x), direction))


@dataclass
class IntervalEndpoints:
    forward: NDValue    # [n_intervals, d]
    backward: NDValue   # [n_intervals, d]
    forward_index: np.ndarray
    backward_index: np.ndarray

    @property
    def n_intervals(self) -> int:
        return len(self.forward_index)


@dataclass
class MacroOutput:
    forward_states: NDValue
    backward_states: NDValue
    contextual: NDValue  # [L, 2 * d_model]
    endpoints: IntervalEndpoints


def interval_indices(length: int, interval: int) -> Tuple[np.ndarray, np.ndarray]:
    """Forward and backward readout positions; the last partial interval ends at the sequence edge"""
    count = math.ceil(length / interval)
    forward = np.array([min((c + 1) * interval, length) - 1 for c in range(count)])
    backward = np.array([max(length - (c + 1) * interval, 0) for c in range(count)])
    return forward, backward


class MacroEncoder(Module):

    def __init__(self, cfg: MacroConfig, input_dim: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.in_proj = Linear(input_dim, cfg.d_model, rng)
        self.forward_blocks = [MacroBlock(cfg.d_model, cfg.state_dim, rng) for _ in range(cfg.depth)]
        if cfg.tie_directions:
            self.backward_blocks = self.forward_blocks
        else:
            self.backward_blocks = [MacroBlock(cfg.d_model, cfg.state_dim, rng) for _ in range(cfg.depth)]

    def forward(self, sequence: np.ndarray) -> MacroOutput:
        sequence = np.asarray(sequence, dtype=np.float64)
        if sequence.ndim != 2 or sequence.shape[0] == 0:
            raise DataError(f"macro encoder needs a non-empty [L, d] sequence, got shape {sequence.shape}")
        if sequence.shape[0] > self.cfg.max_epochs:
            logger.debug(f"Keeping the first {self.cfg.max_epochs} of {sequence.shape[0]} epochs")
            sequence = sequence[:self.cfg.max_epochs]
        x = self.in_proj(NDValue(sequence))
        fwd = x
        for block in self.forward_blocks:
            fwd = block(fwd, 'forward')
        bwd = x
        for block in self.backward_blocks:
            bwd = block(bwd, 'backward')
        f_index, b_index = interval_indices(sequence.shape[0], self.cfg.interval_epochs)
        endpoints = IntervalEndpoints(fwd[f_index], bwd[b_index], f_index, b_index)
        return MacroOutput(fwd, bwd, nc.concat([fwd, bwd], axis=1), endpoints)


# ------------------------------------------------------------------------ DGCL

def demographic_distance(a: DemographicProfile, b: DemographicProfile, lambda_sex: float = 1.0,
                         use_age: bool = True, use_bmi: bool = True, use_sex: bool = True) -> float:
    """Mean absolute z-difference of age and BMI plus a sex-mismatch penalty"""
    d = (use_age * abs(a.z_age - b.z_age) + use_bmi * abs(a.z_bmi - b.z_bmi)) / 2.0
    return d + lambda_sex * float(use_sex and a.sex != b.sex)


def distance_matrix(profiles: Sequence[DemographicProfile], cfg: MacroConfig) -> np.ndarray:
    k = len(profiles)
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            d[i, j] = demographic_distance(profiles[i], profiles[j], cfg.lambda_sex,
                                           cfg.use_age, cfg.use_bmi, cfg.use_sex)
    return d


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def dgcl_weights(anchor: int, profiles: Sequence[DemographicProfile], upsilon: float,
                 cfg: Optional[MacroConfig] = None) -> np.ndarray:
    """softmax_j(-d(anchor, j) / upsilon) over every subject in the batch, self included"""
    cfg = cfg or MacroConfig()
    if len(profiles) < 2:
        raise DataError("DGCL weights need at least two subjects")
    distances = np.array([demographic_distance(profiles[anchor], p, cfg.lambda_sex,
                                               cfg.use_age, cfg.use_bmi, cfg.use_sex) for p in profiles])
    return _row_softmax(-distances / upsilon)


def dgcl_loss(endpoints: Sequence[IntervalEndpoints], profiles: Sequence[DemographicProfile],
              rho: float, upsilon: float, cfg: Optional[MacroConfig] = None) -> Tuple[NDValue, int]:
    """
    Soft-target contrastive loss over interval endpoints.

    For every interval and direction, subjects covering that interval form
    the candidate set; the log-softmax over cosine similarities / rho
    (self included) is weighted by demographic soft targets and summed
    over ordered pairs i != j. Soft targets are normalized over the whole
    batch, self included.

    Returns:
        (loss, number of skipped interval/direction slots with fewer than two subjects)
    """
    cfg = cfg or MacroConfig()
    if len(endpoints) != len(profiles):
        raise ShapeError('dgcl_loss', (len(endpoints),), (len(profiles),), 'one profile per subject')
    if len(endpoints) < 2:
        raise DataError("DGCL needs at least two subjects")
    weights_all = _row_softmax(-distance_matrix(profiles, cfg) / upsilon)
    n_intervals = max(e.n_intervals for e in endpoints)
    terms, skipped = [], 0
    for direction in ('forward', 'backward'):
        for c in range(n_intervals):
            present = [i for i, e in enumerate(endpoints) if e.n_intervals > c]
            if len(present) < 2:
                skipped += 1
                continue
            z = nc.l2_normalize(nc.stack([getattr(endpoints[i], direction)[c] for i in present]))
            log_prob = nc.log_softmax(nc.matmul(z, nc.transpose(z)) * (1.0 / rho), axis=1)
            off_diagonal = weights_all[np.ix_(present, present)] * (1.0 - np.eye(len(present)))
            terms.append(-nc.reduce_sum(log_prob * off_diagonal))
    if skipped:
        logger.info(f"DGCL skipped {skipped} interval slots with fewer than two subjects")
    if not terms:
        return NDValue(0.0), skipped
    return nc.reduce_sum(nc.stack(terms)), skipped


def subject_embed(endpoints: IntervalEndpoints) -> np.ndarray:
    """Mean forward endpoint concatenated with mean backward endpoint"""
    if endpoints.n_intervals < 1:
        raise DataError("subject embedding needs at least one interval")
    return np.concatenate([endpoints.forward.data.mean(axis=0), endpoints.backward.data.mean(axis=0)])


def macro_batch_loss(encoder: MacroEncoder, sequences: Sequence[np.ndarray],
                     profiles: Sequence[DemographicProfile]) -> Tuple[NDValue, int]:
    cfg = encoder.cfg
    endpoints = [encoder.forward(seq).endpoints for seq in sequences]
    return dgcl_loss(endpoints, profiles, cfg.rho, cfg.upsilon, cfg)


# -------------------------------------------------------------------- batching

def stratified_batches(manifest: pd.DataFrame, batch_size: int, rng: np.random.Generator,
                       n_buckets: Optional[int] = None) -> List[List[str]]:
    """
    Length-bucketed, demographically balanced batches of record ids.

    Subjects are ranked by duration within each sex and cut into length
    buckets. Inside a bucket each sex's queue interleaves age terciles and
    the two queues alternate, so contiguous chunks of ``batch_size`` are
    balanced in sex and age. Every subject appears exactly once, and a
    one-subject remainder joins a neighbouring batch so no batch is a singleton.
    """
    if len(manifest) < batch_size:
        raise DataError(f"cohort of {len(manifest)} is smaller than the batch size {batch_size}")
    frame = manifest[['record_id', 'sex', 'age', 'duration']].reset_index(drop=True).copy()
    if n_buckets is None:
        n_buckets = max(1, len(frame) // (2 * batch_size))
    age_cuts = np.quantile(frame['age'].to_numpy(), [1 / 3, 2 / 3])
    frame['age_tercile'] = np.searchsorted(age_cuts, frame['age'].to_numpy(), side='right')
    frame['bucket'] = 0
    for sex, group in frame.groupby('sex', sort=True):
        ranks = group['duration'].rank(method='first').to_numpy() - 1
        frame.loc[group.index, 'bucket'] = (ranks * n_buckets // len(group)).astype(int)

    batches: List[List[str]] = []
    for bucket in range(n_buckets):
        members = frame[frame['bucket'] == bucket]
        queues = []
        for sex in sorted(members['sex'].unique()):
            by_tercile = []
            for tercile in range(3):
                ids = members[(members['sex'] == sex) & (members['age_tercile'] == tercile)]['record_id'].tolist()
                by_tercile.append([ids[i] for i in rng.permutation(len(ids))])
            queue = []
            while any(by_tercile):
                for tercile_ids in by_tercile:
                    if tercile_ids:
                        queue.append(tercile_ids.pop(0))
            queues.append(queue)
        ordered = []
        while any(queues):
            for queue in queues:
                if queue:
                    ordered.append(queue.pop(0))
        batches.extend(ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size))

    merged: List[List[str]] = []
    for batch in batches:
        if len(batch) == 1 and merged:
            logger.debug(f"Merging single-subject remainder {batch} into the previous batch")
            merged[-1] = merged[-1] + batch
        else:
            merged.append(batch)
    if len(merged) > 1 and len(merged[0]) == 1:
        single = merged.pop(0)
        merged[0] = single + merged[0]
    return [merged[i] for i in rng.permutation(len(merged))]


def group_cosine_gap(embeddings: np.ndarray, groups: Sequence) -> float:
    """Mean within-group minus mean between-group cosine similarity"""
    z = np.asarray(embeddings, dtype=np.float64)
    z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    similarity = z @ z.T
    labels = np.asarray([str(g) for g in groups])
    same = labels[:, None] == labels[None, :]
    off_diagonal = ~np.eye(len(labels), dtype=bool)
    within = similarity[same & off_diagonal]
    between = similarity[~same]
    if within.size == 0 or between.size == 0:
        raise DataError("group_cosine_gap needs at least two groups and one group with two members")
    return float(within.mean() - between.mean())
