"""
Epoch-scale encoder: private per-modality streams, a shared mixture-of-experts
stage, cross-attention fusion and a masked-patch decoder.

Training combines masked reconstruction of smoothed patches, a cross-modal
contrastive term over 30-s timeslots and a KoLeo spread regularizer. At
inference the encoder turns a standardized record into one embedding per
30-s epoch and one per second.
"""
import contextlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import numerics_core as nc
from errors import ConfigError, DataError, NumericsError, ShapeError
from nn_layers import (ConvNormGELU, Conv1d, CrossAttentionBlock, Linear, Module, MoETransformerBlock,
                       RMSNorm, TransformerBlock)
from numerics_core import NDValue, Parameter
from record_store import ModalityKind
from signal_pipeline import PATCH_LEN, PATCHES_PER_EPOCH, StandardRecord, concat_patches, patchify, smooth_target

logger = logging.getLogger(__name__)

HIGH_PERIOD = 10
LOW_PERIOD = 8
LOW_RUN = 4


@dataclass
class MicroConfig:
    modalities: List[str] = field(default_factory=lambda: ['EEG', 'EOG', 'RESP'])
    channels_per_modality: int = 1
    patch_len: int = PATCH_LEN
    conv_dims: List[int] = field(default_factory=lambda: [32, 64, 128])
    conv_kernels: List[int] = field(default_factory=lambda: [10, 5, 1])
    conv_strides: List[int] = field(default_factory=lambda: [10, 5, 1])
    lower_dim: int = 128
    lower_depth: int = 2
    heads: int = 8
    merge_dim: int = 384
    merge_kernel: int = 10
    merge_stride: int = 5
    merge_expansion: int = 2
    higher_depth: int = 2
    shared_depth: int = 4
    num_experts: int = 4
    top_k: int = 2
    fusion_depth: int = 4
    up_dim: int = 128
    decoder_dim: int = 64
    decoder_depth: int = 1
    decoder_heads: int = 4
    mask_ratio: float = 0.5
    temperature: float = 0.07
    cl_weight: float = 0.1
    koleo_weight: float = 0.01
    # ablation switches; the contrastive loss is defined on shared embeddings
    use_shared: bool = True
    use_contrastive: bool = True
    use_koleo: bool = True
    window_epochs: int = 2
    timeslot_patches: int = PATCHES_PER_EPOCH

    @classmethod
    def reference(cls) -> 'MicroConfig':
        return cls()

    @classmethod
    def desk(cls) -> 'MicroConfig':
        """Every width divided by 4, depths halved"""
        return cls(conv_dims=[8, 16, 32], lower_dim=32, lower_depth=1, heads=4, merge_dim=96,
                   higher_depth=1, shared_depth=2, fusion_depth=2, up_dim=32, decoder_dim=16,
                   decoder_heads=2)

    @classmethod
    def tiny(cls, modalities: Optional[List[str]] = None) -> 'MicroConfig':
        """Widths divided by 8 and depth 1 everywhere; used by gradient checks"""
        return cls(modalities=modalities or ['EEG', 'RESP'], conv_dims=[4, 8, 16], lower_dim=16,
                   lower_depth=1, heads=2, merge_dim=48, higher_depth=1, shared_depth=1, fusion_depth=1,
                   up_dim=16, decoder_dim=8, decoder_heads=2)

    @property
    def kinds(self) -> List[ModalityKind]:
        return [ModalityKind(m) for m in self.modalities]

    @property
    def grid_period(self) -> int:
        if any(kind.frequency_class == 'low' for kind in self.kinds):
            return HIGH_PERIOD * LOW_PERIOD // math.gcd(HIGH_PERIOD, LOW_PERIOD)
        return HIGH_PERIOD

    @property
    def window_patches(self) -> int:
        return self.window_epochs * PATCHES_PER_EPOCH

    def validate(self):
        if len(self.modalities) != len(set(self.modalities)):
            raise ConfigError(f"Duplicate modalities in {self.modalities}")
        for name in self.modalities:
            if name not in ModalityKind.__members__:
                raise ConfigError(f"Unknown modality {name}")
        if self.conv_dims[-1] != self.lower_dim:
            raise ConfigError(f"last conv dim {self.conv_dims[-1]} must equal lower_dim {self.lower_dim}")
        if not (len(self.conv_dims) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ConfigError("conv_dims, conv_kernels and conv_strides must have equal length")
        if HIGH_PERIOD % self.merge_stride or self.merge_kernel % HIGH_PERIOD:
            raise ConfigError(f"merge stride {self.merge_stride} must divide the mask period {HIGH_PERIOD} "
                              f"and the merge kernel {self.merge_kernel} must be a multiple of it")
        if self.timeslot_patches % self.merge_stride:
            raise ConfigError("timeslot length must be a multiple of the merge stride")
        for dim, heads in ((self.lower_dim, self.heads), (self.merge_dim, self.heads),
                           (self.decoder_dim, self.decoder_heads)):
            if dim % heads:
                raise ConfigError(f"{heads} heads do not divide dim {dim}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"activated experts {self.top_k} must be in [1, {self.num_experts}]")
        if self.mask_ratio != 0.5:
            raise ConfigError("the periodic mask grid realizes a mask ratio of exactly 0.5")
        if self.use_contrastive and not self.use_shared:
            raise ConfigError("the contrastive loss needs the shared encoder; set use_contrastive to false")
        if self.window_patches % self.grid_period:
            raise ConfigError(f"window of {self.window_patches} patches is not a multiple of "
                              f"the mask grid period {self.grid_period}")


# ----------------------------------------------------------------------- masks

@dataclass
class MaskPlan:
    """Masked patch positions per modality for one sample"""
    masks: Dict[ModalityKind, np.ndarray]
    offset: int
    period: int
    run_lengths: Dict[ModalityKind, int]

    @property
    def n_patches(self) -> int:
        return len(next(iter(self.masks.values())))

    def masked_fraction(self, kind: ModalityKind) -> float:
        return float(self.masks[kind].mean())


def build_mask_plan(n_patches: int, kinds: Sequence[ModalityKind], rng: np.random.Generator,
                    cfg: MicroConfig) -> MaskPlan:
    """
    Periodic masks sharing one grid offset across modalities.

    High-frequency modalities mask a random half of the slots in every
    10-patch period; low-frequency modalities mask 4-patch runs every 8
    patches. ``n_patches`` is trimmed to a multiple of the grid period.

    The grid offset is drawn below the merge stride. The 10-patch period is
    a whole number of merge strides and the merge kernel a whole number of
    periods, so every merge window covers full periods and sees exactly half
    of each high-frequency modality masked, whatever the offset.
    ``MicroConfig.validate`` rejects strides and kernels that break this.

    Args:
        n_patches: patches in the window before trimming
        kinds: modalities to mask
        rng: source of the offset and the slot choice
        cfg: supplies the merge stride

    Returns:
        MaskPlan with one boolean mask per modality
    """
    kinds = list(kinds)
    has_low = any(k.frequency_class == 'low' for k in kinds)
    period = HIGH_PERIOD * LOW_PERIOD // math.gcd(HIGH_PERIOD, LOW_PERIOD) if has_low else HIGH_PERIOD
    if n_patches < period:
        raise DataError(f"{n_patches} patches is shorter than one mask grid period ({period})")
    n = (n_patches // period) * period
    offset = int(rng.integers(cfg.merge_stride))
    positions = np.arange(n) - offset
    masks, runs = {}, {}
    for kind in kinds:
        if kind.frequency_class == 'low':
            masks[kind] = (positions % LOW_PERIOD) < LOW_RUN
            runs[kind] = LOW_RUN
        else:
            slots = np.zeros(HIGH_PERIOD, dtype=bool)
            slots[rng.choice(HIGH_PERIOD, size=HIGH_PERIOD // 2, replace=False)] = True
            masks[kind] = slots[positions % HIGH_PERIOD]
            runs[kind] = 1
    return MaskPlan(masks, offset, period, runs)


def stack_masks(plans: Sequence[MaskPlan]) -> Dict[ModalityKind, np.ndarray]:
    """Per modality, a [B, P] boolean array from per-sample plans"""
    return {kind: np.stack([plan.masks[kind] for plan in plans]) for kind in plans[0].masks}


def merged_length(n_patches: int, cfg: MicroConfig) -> int:
    return (n_patches - cfg.merge_kernel) // cfg.merge_stride + 1


def upsample_matrix(n_patches: int, cfg: MicroConfig) -> np.ndarray:
    """[P, L'] averaging weights from merged tokens back to patches"""
    n_tokens = merged_length(n_patches, cfg)
    cover = np.zeros((n_patches, n_tokens))
    for j in range(n_tokens):
        start = j * cfg.merge_stride
        cover[start:start + cfg.merge_kernel, j] = 1.0
    counts = cover.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError('upsample', (n_patches,), (n_tokens,), 'some patches are not covered by a merge window')
    return cover / counts


def timeslot_matrix(n_tokens: int, cfg: MicroConfig) -> np.ndarray:
    """[S, L'] mean-pooling weights by receptive-field center"""
    centers = np.arange(n_tokens) * cfg.merge_stride + cfg.merge_kernel / 2.0
    n_patches = (n_tokens - 1) * cfg.merge_stride + cfg.merge_kernel
    n_slots = n_patches // cfg.timeslot_patches
    membership = np.floor(centers / cfg.timeslot_patches).astype(int)
    pool = np.zeros((n_slots, n_tokens))
    for slot in range(n_slots):
        members = membership == slot
        if not members.any():
            raise DataError(f"timeslot {slot} contains no merged tokens")
        pool[slot, members] = 1.0 / members.sum()
    return pool


def pool_timeslot(tokens: NDValue, cfg: MicroConfig) -> NDValue:
    """[B, L', D] -> [B, S, D], averaging tokens whose centers fall in each 30-s slot"""
    return nc.matmul(timeslot_matrix(tokens.shape[1], cfg), tokens)


# ---------------------------------------------------------------------- layers

class PatchEmbedding(Module):
    """Conv-Norm-GELU stack mapping each 50-sample patch to one token"""

    def __init__(self, channels: int, cfg: MicroConfig, rng: np.random.Generator):
        dims = [channels] + list(cfg.conv_dims)
        self.layers = [ConvNormGELU(dims[i], dims[i + 1], k, s, rng)
                       for i, (k, s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides))]
        length = cfg.patch_len
        for k, s in zip(cfg.conv_kernels, cfg.conv_strides):
            length = (length - k) // s + 1
            if length < 1:
                raise ConfigError(f"conv stack reduces a {cfg.patch_len}-sample patch below one step")

    def forward(self, patches: np.ndarray) -> NDValue:
        b, c, p, length = patches.shape
        x = NDValue(patches.transpose(0, 2, 1, 3).reshape(b * p, c, length))
        for layer in self.layers:
            x = layer(x)
        return x.mean(axis=2).reshape(b, p, -1)


class PatchMerge(Module):
    """Expansion conv, strided depthwise conv, norm, pointwise, GELU, pointwise"""

    def __init__(self, cfg: MicroConfig, rng: np.random.Generator):
        hidden = cfg.lower_dim * cfg.merge_expansion
        self.expand = Conv1d(cfg.lower_dim, hidden, 1, rng)
        self.depthwise = Conv1d(hidden, hidden, cfg.merge_kernel, rng, stride=cfg.merge_stride, groups=hidden)
        self.norm = RMSNorm(hidden)
        self.pointwise_in = Linear(hidden, cfg.merge_dim, rng)
        self.pointwise_out = Linear(cfg.merge_dim, cfg.merge_dim, rng)

    def forward(self, x: NDValue) -> NDValue:
        h = self.depthwise(self.expand(nc.swapaxes(x, 1, 2)))
        h = self.norm(nc.swapaxes(h, 1, 2))
        return self.pointwise_out(nc.gelu(self.pointwise_in(h)))


class PrivateEncoder(Module):

    def __init__(self, cfg: MicroConfig, rng: np.random.Generator):
        self.embed = PatchEmbedding(cfg.channels_per_modality, cfg, rng)
        self.mask_token = Parameter(rng.normal(0.0, 0.02, cfg.lower_dim))
        self.lower = [TransformerBlock(cfg.lower_dim, cfg.heads, rng) for _ in range(cfg.lower_depth)]
        self.merge = PatchMerge(cfg, rng)
        self.higher = [TransformerBlock(cfg.merge_dim, cfg.heads, rng) for _ in range(cfg.higher_depth)]


@dataclass
class MicroBatchOutput:
    private: Dict[ModalityKind, NDValue]       # [B, L', D]
    shared: Dict[ModalityKind, NDValue]        # [B, L', D]
    fused: Dict[ModalityKind, NDValue]         # [B, L', D]
    upsampled: Dict[ModalityKind, NDValue]     # [B, P, up_dim]
    recon: Dict[ModalityKind, NDValue]         # [B, C, K, 50]
    masked_index: Dict[ModalityKind, np.ndarray]  # [B, K]
    pooled_shared: Dict[ModalityKind, NDValue]  # [B, S, D]
    pooled_private: Dict[ModalityKind, NDValue]
    routing: List[np.ndarray] = field(default_factory=list)


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except NumericsError as e:
        raise NumericsError(f"micro encoder stage '{name}': {e}") from e


class MicroEncoder(Module):

    def __init__(self, cfg: MicroConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        names = cfg.modalities
        self.private = {m: PrivateEncoder(cfg, rng) for m in names}
        self.modality_embedding, self.shared_blocks, self.fusion = {}, [], []
        if cfg.use_shared:
            self.modality_embedding = {m: Parameter(rng.normal(0.0, 0.02, cfg.merge_dim)) for m in names}
            self.shared_blocks = [MoETransformerBlock(cfg.merge_dim, cfg.heads, rng, cfg.num_experts, cfg.top_k)
                                  for _ in range(cfg.shared_depth)]
            self.fusion = [CrossAttentionBlock(cfg.merge_dim, cfg.heads, rng) for _ in range(cfg.fusion_depth)]
        self.upsample = Linear(cfg.merge_dim, cfg.up_dim, rng)
        self.decoder_in = Linear(cfg.up_dim, cfg.decoder_dim, rng)
        self.decoder_embedding = {m: Parameter(rng.normal(0.0, 0.02, cfg.decoder_dim)) for m in names}
        self.decoder_blocks = [TransformerBlock(cfg.decoder_dim, cfg.decoder_heads, rng)
                               for _ in range(cfg.decoder_depth)]
        self.decoder_out = {m: Linear(cfg.decoder_dim, cfg.channels_per_modality * cfg.patch_len, rng)
                            for m in names}

    def forward(self, patches: Dict[ModalityKind, np.ndarray],
                masks: Optional[Dict[ModalityKind, np.ndarray]] = None) -> MicroBatchOutput:
        """
        Args:
            patches: per modality [B, C, P, 50]; the dict order is irrelevant
            masks: per modality [B, P] booleans (True = masked); None disables masking

        Returns:
            MicroBatchOutput; ``recon`` is empty when masking is disabled
        """
        cfg = self.cfg
        kinds = [kind for kind in cfg.kinds if kind in patches]
        if len(kinds) != len(cfg.kinds):
            raise DataError(f"batch is missing modalities: expected {cfg.modalities}, got "
                            f"{sorted(k.value for k in patches)}")
        b, c, p, length = patches[kinds[0]].shape
        if c != cfg.channels_per_modality or length != cfg.patch_len:
            raise ShapeError('micro_forward', (b, c, p, length),
                             (b, cfg.channels_per_modality, p, cfg.patch_len))
        positions = np.arange(p)

        private, merged = {}, {}
        for kind in kinds:
            encoder = self.private[kind.value]
            with _stage(f'{kind.value} patch embedding'):
                tokens = encoder.embed(patches[kind])
            key_mask = None
            if masks is not None:
                m = masks[kind][:, :, None].astype(float)
                tokens = tokens * (1.0 - m) + encoder.mask_token * m
                key_mask = ~masks[kind]
            with _stage(f'{kind.value} private lower'):
                for block in encoder.lower:
                    tokens = block(tokens, key_mask=key_mask, positions=positions)
            with _stage(f'{kind.value} merge'):
                merged[kind] = encoder.merge(tokens)
            with _stage(f'{kind.value} private higher'):
                h = merged[kind]
                merged_positions = np.arange(h.shape[1])
                for block in encoder.higher:
                    h = block(h, positions=merged_positions)
                private[kind] = h

        # without the shared encoder the private tokens stand in for the shared ones and fusion is skipped
        shared, routing = dict(private), []
        if cfg.use_shared:
            n_tokens = merged[kinds[0]].shape[1]
            with _stage('shared experts'):
                x = nc.concat([merged[k] + self.modality_embedding[k.value] for k in kinds], axis=1)
                shared_positions = np.tile(np.arange(n_tokens), len(kinds))
                for block in self.shared_blocks:
                    x = block(x, positions=shared_positions)
                    routing.append(block.moe.last_routing)
                shared = {k: x[:, i * n_tokens:(i + 1) * n_tokens, :] for i, k in enumerate(kinds)}

        fused = {}
        with _stage('fusion'):
            for kind in kinds:
                h = private[kind]
                for block in self.fusion:
                    h = block(h, context=shared[kind])
                fused[kind] = h

        up = upsample_matrix(p, cfg)
        upsampled, recon, masked_index = {}, {}, {}
        with _stage('decoder'):
            for kind in kinds:
                upsampled[kind] = nc.matmul(up, self.upsample(fused[kind]))
                if masks is None:
                    continue
                counts = masks[kind].sum(axis=1)
                if np.any(counts != counts[0]):
                    raise DataError(f"{kind.value}: masked patch counts differ across the batch")
                index = np.stack([np.flatnonzero(row) for row in masks[kind]]) if counts[0] else \
                    np.zeros((b, 0), dtype=int)
                masked_index[kind] = index
                if index.shape[1] == 0:
                    recon[kind] = NDValue(np.zeros((b, c, 0, length)))
                    continue
                h = self.decoder_in(upsampled[kind]) + self.decoder_embedding[kind.value]
                for block in self.decoder_blocks:
                    h = block(h, positions=positions)
                h = h[np.arange(b)[:, None], index]
                out = self.decoder_out[kind.value](h)
                recon[kind] = nc.transpose(out.reshape(b, index.shape[1], c, length), (0, 2, 1, 3))

        with _stage('timeslot pooling'):
            pooled_shared = {k: pool_timeslot(shared[k], cfg) for k in kinds}
            pooled_private = {k: pool_timeslot(private[k], cfg) for k in kinds}
        return MicroBatchOutput(private, shared, fused, upsampled, recon, masked_index,
                                pooled_shared, pooled_private, routing)

    def loss(self, patches: Dict[ModalityKind, np.ndarray],
             masks: Dict[ModalityKind, np.ndarray]) -> Tuple[NDValue, Dict[str, float]]:
        """Total pretraining loss and its float components"""
        out = self.forward(patches, masks)
        recon = recon_loss(patches, out.recon, out.masked_index)
        flat_shared = {k: _flatten_slots(v) for k, v in out.pooled_shared.items()}
        flat_private = {k: _flatten_slots(v) for k, v in out.pooled_private.items()}
        cl = contrastive_loss(flat_shared, flat_private, self.cfg.temperature) \
            if self.cfg.use_contrastive else NDValue(0.0)
        koleo = nc.reduce_mean(nc.stack([koleo_loss(v) for v in flat_shared.values()])) \
            if self.cfg.use_koleo else NDValue(0.0)
        total = micro_total_loss(recon, cl, koleo, self.cfg)
        return total, {'total': total.item(), 'recon': recon.item(), 'cl': cl.item(), 'koleo': koleo.item()}


def _flatten_slots(pooled: NDValue) -> NDValue:
    b, s, d = pooled.shape
    return pooled.reshape(b * s, d)


# ---------------------------------------------------------------------- losses

def recon_loss(patches: Dict[ModalityKind, np.ndarray], recon: Dict[ModalityKind, NDValue],
               masked_index: Dict[ModalityKind, np.ndarray]) -> NDValue:
    """
    MSE between the 11-point smoothed target and the reconstruction over
    masked patches, averaged over modalities.
    """
    per_modality = []
    for kind, prediction in recon.items():
        index = masked_index[kind]
        if index.shape[1] == 0:
            continue
        x = patches[kind]
        b, c, p, length = x.shape
        if prediction.shape != (b, c, index.shape[1], length):
            raise ShapeError('recon_loss', prediction.shape, (b, c, index.shape[1], length))
        target = smooth_target(concat_patches(x)).reshape(b, c, p, length)
        target = target[np.arange(b)[:, None, None], np.arange(c)[None, :, None], index[:, None, :]]
        diff = prediction - target
        per_modality.append(nc.reduce_mean(diff * diff))
    if not per_modality:
        logger.warning("recon_loss called with no masked patches; returning 0")
        return NDValue(0.0)
    return nc.reduce_mean(nc.stack(per_modality))


def contrastive_loss(shared: Dict[ModalityKind, NDValue], private: Dict[ModalityKind, NDValue],
                     temperature: float) -> NDValue:
    """
    Cross-modal InfoNCE over N timeslots.

    For modality i and slot t the positive is the normalized mean of the
    other modalities' normalized shared embeddings at t; negatives are the
    same target at every other slot plus the anchor's own private
    embedding. All inner products are cosine similarities over temperature.

    Args:
        shared: per modality [N, D] pooled shared embeddings
        private: per modality [N, D] pooled private embeddings
    """
    kinds = list(shared)
    if len(kinds) < 2:
        raise DataError("contrastive loss needs at least two modalities")
    n = shared[kinds[0]].shape[0]
    if n < 2:
        raise DataError("contrastive loss needs at least two timeslots")
    normed = {k: nc.l2_normalize(shared[k]) for k in kinds}
    losses = []
    for kind in kinds:
        others = nc.reduce_mean(nc.stack([normed[k] for k in kinds if k != kind]), axis=0)
        target = nc.l2_normalize(others)
        anchor = normed[kind]
        logits = nc.matmul(anchor, nc.transpose(target)) * (1.0 / temperature)
        private_logit = nc.reduce_sum(anchor * nc.l2_normalize(private[kind]), axis=-1, keepdims=True) \
            * (1.0 / temperature)
        denominator = nc.logsumexp(nc.concat([logits, private_logit], axis=1), axis=1)
        positive = logits[np.arange(n), np.arange(n)]
        losses.append(nc.reduce_mean(denominator - positive))
    return nc.reduce_mean(nc.stack(losses))


def koleo_loss(z: NDValue) -> NDValue:
    """-(1/n) sum log of nearest-neighbour distances between normalized embeddings"""
    z = nc.as_value(z)
    n = z.shape[0]
    if n < 2:
        raise DataError("KoLeo needs at least two embeddings")
    normed = nc.l2_normalize(z)
    points = normed.data
    sq = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    np.fill_diagonal(sq, np.inf)
    neighbour = np.argmin(sq, axis=1)
    if np.min(sq) < 1e-16:
        logger.warning("KoLeo: duplicate embeddings, nearest-neighbour distance floored at 1e-8")
    delta = normed - normed[neighbour]
    distance = nc.sqrt(nc.maximum(nc.reduce_sum(delta * delta, axis=-1), 1e-16))
    return -nc.reduce_mean(nc.log(distance))


def micro_total_loss(recon, cl, koleo, cfg: Optional[MicroConfig] = None):
    """Reconstruction plus the weighted regularizers that are switched on"""
    cfg = cfg or MicroConfig()
    total = recon
    if cfg.use_contrastive:
        total = total + cl * cfg.cl_weight
    if cfg.use_koleo:
        total = total + koleo * cfg.koleo_weight
    return total


# ------------------------------------------------------------------- inference

@dataclass
class RecordEmbedding:
    record_id: str
    epochs: np.ndarray   # [E, M * merge_dim]
    seconds: np.ndarray  # [E * 30, M * up_dim]


def encode_record(record: StandardRecord, encoder: MicroEncoder, batch_windows: int = 8) -> RecordEmbedding:
    """Unmasked pass over a whole record in windows of ``window_epochs`` epochs"""
    cfg = encoder.cfg
    grid = patchify(record)
    missing = [k for k in cfg.kinds if k not in grid]
    if missing:
        raise DataError(f"Record {record.record_id} lacks modalities {[k.value for k in missing]}")
    n_epochs = record.n_epochs
    span = min(cfg.window_epochs, n_epochs)
    starts = list(range(0, n_epochs - span + 1, span))
    if starts[-1] + span < n_epochs:
        starts.append(n_epochs - span)

    epoch_rows = np.zeros((n_epochs, len(cfg.kinds) * cfg.merge_dim))
    second_rows = np.zeros((n_epochs * 30, len(cfg.kinds) * cfg.up_dim))
    window = span * PATCHES_PER_EPOCH
    with nc.no_grad():
        for i in range(0, len(starts), batch_windows):
            chunk = starts[i:i + batch_windows]
            batch = {k: np.stack([grid[k][:, s * PATCHES_PER_EPOCH:s * PATCHES_PER_EPOCH + window]
                                  for s in chunk]) for k in cfg.kinds}
            out = encoder.forward(batch)
            pooled = np.concatenate([pool_timeslot(out.fused[k], cfg).data for k in cfg.kinds], axis=-1)
            seconds = np.concatenate([_per_second(out.upsampled[k].data) for k in cfg.kinds], axis=-1)
            for row, start in enumerate(chunk):
                epoch_rows[start:start + span] = pooled[row]
                second_rows[start * 30:(start + span) * 30] = seconds[row]
    return RecordEmbedding(record.record_id, epoch_rows, second_rows)


def _per_second(upsampled: np.ndarray) -> np.ndarray:
    b, p, d = upsampled.shape
    return upsampled.reshape(b, p // 2, 2, d).mean(axis=2)


def epoch_embed(record: StandardRecord, encoder: MicroEncoder) -> np.ndarray:
    """One embedding per 30-s epoch: fused tokens pooled per epoch, concatenated over modalities"""
    return encode_record(record, encoder).epochs


def sample_windows(grids: Sequence[Dict[ModalityKind, np.ndarray]], n_windows: int, cfg: MicroConfig,
                   rng: np.random.Generator) -> Dict[ModalityKind, np.ndarray]:
    """Random ``window_epochs``-long training windows, aligned to epoch boundaries"""
    window = cfg.window_patches
    batch = {k: [] for k in cfg.kinds}
    for _ in range(n_windows):
        grid = grids[int(rng.integers(len(grids)))]
        n_epochs = grid[cfg.kinds[0]].shape[1] // PATCHES_PER_EPOCH
        start = int(rng.integers(n_epochs - cfg.window_epochs + 1)) * PATCHES_PER_EPOCH
        for k in cfg.kinds:
            batch[k].append(grid[k][:, start:start + window])
    return {k: np.stack(v) for k, v in batch.items()}
