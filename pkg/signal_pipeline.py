"""
Turn raw multi-rate recordings into the model's input representation.

Each modality is resampled to 100 Hz, filtered with zero-phase Butterworth
sections, trimmed to whole 30-s epochs and z-scored per channel over the
full night. ``patchify`` then cuts every channel into 500-ms patches.
"""
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import butter, iirnotch, resample_poly, sosfiltfilt, tf2sos

from errors import DataError
from record_store import (EPOCH_SECONDS, DemographicProfile, ModalityKind, RawRecord,
                          SurvivalLabel)

logger = logging.getLogger(__name__)

TARGET_RATE = 100.0
EPOCH_SAMPLES = 3000
PATCH_LEN = 50
PATCHES_PER_EPOCH = EPOCH_SAMPLES // PATCH_LEN
SMOOTH_WINDOW = 11
NOTCH_HZ = 60.0
STD_FLOOR = 1e-8


@dataclass
class PipelineConfig:
    filter_order: int = 4
    notch_q: float = 30.0
    filter_at_native_rate: bool = False


@dataclass
class StandardRecord:
    record_id: str
    signals: Dict[ModalityKind, np.ndarray]  # [C, T] at 100 Hz
    channels: Dict[ModalityKind, List[str]]
    n_epochs: int
    trimmed_seconds: float = 0.0
    constant_channels: List[str] = field(default_factory=list)
    profile: Optional[DemographicProfile] = None
    stages: Optional[np.ndarray] = None
    sdb: Optional[np.ndarray] = None
    survival: Optional[SurvivalLabel] = None
    ahi: Optional[float] = None

    @property
    def n_samples(self) -> int:
        return self.n_epochs * EPOCH_SAMPLES


def resample(signal: np.ndarray, from_hz: float, to_hz: float = TARGET_RATE) -> np.ndarray:
    """
    Resample along the last axis.

    Integer decimation uses a polyphase anti-aliasing filter, integer
    upsampling uses linear interpolation and any other ratio goes through
    the rational polyphase resampler. Output length is round(n * to / from).

    Args:
        signal: samples along the last axis
        from_hz: native rate
        to_hz: target rate

    Returns:
        Resampled float64 array

    Raises:
        DataError: if the signal is empty or a rate is not positive
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[-1] == 0:
        raise DataError("Cannot resample an empty signal")
    if from_hz <= 0 or to_hz <= 0:
        raise DataError(f"Sampling rates must be positive, got {from_hz} -> {to_hz}")
    n = signal.shape[-1]
    n_out = int(round(n * to_hz / from_hz))
    if from_hz == to_hz:
        return signal.copy()

    ratio = Fraction(to_hz / from_hz).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    if down == 1:
        t_in = np.arange(n) / from_hz
        t_out = np.arange(n_out) / to_hz
        flat = signal.reshape(-1, n)
        out = np.stack([np.interp(t_out, t_in, row) for row in flat]).reshape(signal.shape[:-1] + (n_out,))
    else:
        out = resample_poly(signal, up, down, axis=-1, padtype='line')
    return _fit_length(out, n_out)


def _fit_length(signal: np.ndarray, n_out: int) -> np.ndarray:
    n = signal.shape[-1]
    if n >= n_out:
        return signal[..., :n_out]
    pad = [(0, 0)] * (signal.ndim - 1) + [(0, n_out - n)]
    return np.pad(signal, pad, mode='edge')


def filter_design(kind: ModalityKind, fs: float, order: int = 4,
                  notch_q: float = 30.0) -> List[np.ndarray]:
    """
    Second-order-section cascades for one modality at rate ``fs``.

    Args:
        kind: modality whose passband applies
        fs: sampling rate the filters run at
        order: Butterworth order
        notch_q: quality factor of the mains notch

    Returns:
        SOS arrays in the order they are applied; empty when the modality
        passes through
    """
    nyquist = fs / 2.0
    stages = []
    if kind in (ModalityKind.EEG, ModalityKind.EOG):
        stages.append(butter(order, [0.3, min(40.0, 0.95 * nyquist)], btype='bandpass', fs=fs, output='sos'))
    elif kind == ModalityKind.ECG:
        if 60.0 < nyquist:
            stages.append(butter(order, [0.3, 60.0], btype='bandpass', fs=fs, output='sos'))
        else:
            stages.append(butter(order, 0.3, btype='highpass', fs=fs, output='sos'))
    elif kind == ModalityKind.EMG:
        stages.append(butter(order, 10.0, btype='highpass', fs=fs, output='sos'))
    elif kind == ModalityKind.RESP:
        if 15.0 < nyquist:
            stages.append(butter(order, 15.0, btype='lowpass', fs=fs, output='sos'))
    if kind.frequency_class == 'high' and NOTCH_HZ < nyquist:
        b, a = iirnotch(NOTCH_HZ, notch_q, fs=fs)
        stages.append(tf2sos(b, a))
    return stages


def filter_bank(signal: np.ndarray, modality: ModalityKind, fs: float = TARGET_RATE,
                order: int = 4, notch_q: float = 30.0) -> np.ndarray:
    """Zero-phase filtering along the last axis; SPO2 passes through"""
    out = np.asarray(signal, dtype=np.float64)
    n = out.shape[-1]
    for sos in filter_design(modality, fs, order, notch_q):
        padlen = min(3 * (2 * len(sos) + 1), n - 1)
        out = sosfiltfilt(sos, out, axis=-1, padlen=max(padlen, 0))
    return out.copy() if out is signal else out


def zscore(signal: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-row z-score; rows with std below the floor become zeros and are flagged.

    Returns:
        (normalized [C, T] array, boolean flag per row)
    """
    signal = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    mean = signal.mean(axis=-1, keepdims=True)
    std = signal.std(axis=-1, keepdims=True)
    constant = std[:, 0] < STD_FLOOR
    out = (signal - mean) / np.maximum(std, STD_FLOOR)
    out[constant] = 0.0
    return out, constant


def standardize(record: RawRecord, cfg: Optional[PipelineConfig] = None) -> StandardRecord:
    """
    Resample, filter, trim to whole epochs and z-score every channel.

    Args:
        record: raw record with signals at native rates
        cfg: filtering options; defaults to ``PipelineConfig()``

    Returns:
        StandardRecord on the common grid with labels trimmed to match

    Raises:
        DataError: if the record is invalid or shorter than one epoch
    """
    cfg = cfg or PipelineConfig()
    record.validate()
    resampled = {}
    for kind, signals in record.signals.items():
        x = signals.samples
        if cfg.filter_at_native_rate:
            x = filter_bank(x, kind, signals.rate, cfg.filter_order, cfg.notch_q)
            x = resample(x, signals.rate)
        else:
            x = filter_bank(resample(x, signals.rate), kind, TARGET_RATE, cfg.filter_order, cfg.notch_q)
        resampled[kind] = x

    total = min(x.shape[-1] for x in resampled.values())
    n_epochs = total // EPOCH_SAMPLES
    if n_epochs == 0:
        raise DataError(f"Record {record.record_id} is shorter than one {EPOCH_SECONDS}-s epoch")
    keep = n_epochs * EPOCH_SAMPLES

    out, constant_channels = {}, []
    for kind, x in resampled.items():
        z, constant = zscore(x[:, :keep])
        out[kind] = z
        for name, flag in zip(record.signals[kind].channels, constant):
            if flag:
                constant_channels.append(f"{kind.value}/{name}")
    if constant_channels:
        logger.warning(f"Record {record.record_id}: constant channels {constant_channels} set to zero")

    return StandardRecord(
        record_id=record.record_id,
        signals=out,
        channels={kind: list(s.channels) for kind, s in record.signals.items()},
        n_epochs=n_epochs,
        trimmed_seconds=record.duration - n_epochs * EPOCH_SECONDS,
        constant_channels=constant_channels,
        profile=record.profile,
        stages=None if record.stages is None else np.asarray(record.stages)[:n_epochs],
        sdb=None if record.sdb is None else np.asarray(record.sdb)[:n_epochs * EPOCH_SECONDS],
        survival=record.survival,
        ahi=record.ahi,
    )


def patchify(record: StandardRecord) -> Dict[ModalityKind, np.ndarray]:
    """Per modality, [C, P, 50] non-overlapping patches with P = T / 50"""
    return {kind: x.reshape(x.shape[0], -1, PATCH_LEN) for kind, x in record.signals.items()}


def concat_patches(patches: np.ndarray) -> np.ndarray:
    """Inverse of patchify for one modality: [..., P, 50] -> [..., P * 50]"""
    return patches.reshape(patches.shape[:-2] + (-1,))


def smooth_target(signal: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """
    Centered moving average along the last axis.

    Edge samples average over the part of the window inside the signal.
    Signals shorter than the window collapse to their mean.
    """
    signal = np.asarray(signal, dtype=np.float64)
    n = signal.shape[-1]
    if n < window:
        return np.broadcast_to(signal.mean(axis=-1, keepdims=True), signal.shape).copy()
    half = window // 2
    pad = [(0, 0)] * (signal.ndim - 1) + [(half, half)]
    sums = np.lib.stride_tricks.sliding_window_view(np.pad(signal, pad), window, axis=-1).sum(axis=-1)
    counts = np.lib.stride_tricks.sliding_window_view(np.pad(np.ones(n), (half, half)), window).sum(axis=-1)
    return sums / counts
