"""
Synthetic PSG cohort generator.

Each subject gets a demographic profile, a Markov hypnogram whose N3 and
REM propensities depend on age, BMI and sex per night-third, multi-modal
waveforms built from stage-keyed band-limited noise, sleep-disordered
breathing events and an exponential survival label. Records are written
in the record_store directory format next to a cohort manifest.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.signal import butter, sosfiltfilt
from scipy.stats import truncnorm
from tqdm import tqdm

from errors import ConfigError
from record_store import (AGE_RANGE, BMI_RANGE, EPOCH_SECONDS, MANIFEST_COLUMNS, SEXES, STAGES,
                          CohortStats, DemographicProfile, ModalityKind, ModalitySignals, RawRecord,
                          SurvivalLabel, write_manifest, write_record)

logger = logging.getLogger(__name__)

BASE_MATRIX = [
    [0.80, 0.15, 0.04, 0.00, 0.01],
    [0.08, 0.55, 0.32, 0.00, 0.05],
    [0.02, 0.03, 0.85, 0.06, 0.04],
    [0.01, 0.01, 0.08, 0.90, 0.00],
    [0.03, 0.03, 0.04, 0.00, 0.90],
]

BANDS = {
    'slow': (0.3, 2.0),
    'delta': (0.5, 4.0),
    'theta': (4.0, 8.0),
    'alpha': (8.0, 12.0),
    'sigma': (12.0, 15.0),
    'beta': (15.0, 30.0),
    'emg': (20.0, 45.0),
}

# stage -> band -> amplitude
DEFAULT_TEMPLATES = {
    'EEG': {
        'W': {'alpha': 2.0, 'beta': 1.0},
        'N1': {'theta': 1.5, 'alpha': 0.5},
        'N2': {'sigma': 1.5, 'theta': 0.8, 'delta': 0.8},
        'N3': {'delta': 4.0},
        'REM': {'theta': 1.0, 'beta': 1.2},
    },
    'EOG': {
        'W': {'slow': 1.0, 'beta': 0.3},
        'N1': {'slow': 1.5},
        'N2': {'delta': 0.3},
        'N3': {'delta': 1.0},
        'REM': {'slow': 2.5},
    },
    'EMG': {
        'W': {'emg': 1.5},
        'N1': {'emg': 0.8},
        'N2': {'emg': 0.5},
        'N3': {'emg': 0.4},
        'REM': {'emg': 0.15},
    },
}

HEART_RATE_BPM = {'W': 70.0, 'N1': 65.0, 'N2': 60.0, 'N3': 56.0, 'REM': 68.0}
BREATHS_PER_MIN = {'W': 16.0, 'N1': 15.0, 'N2': 14.0, 'N3': 13.0, 'REM': 17.0}

CHANNEL_NAMES = {
    ModalityKind.EEG: 'C3',
    ModalityKind.EOG: 'LOC',
    ModalityKind.EMG: 'chin',
    ModalityKind.ECG: 'ECG',
    ModalityKind.RESP: 'airflow',
    ModalityKind.SPO2: 'SpO2',
}

SPLITS = ('pretrain', 'probe_train', 'test')
N_CELLS = 18


@dataclass
class GeneratorConfig:
    """Cohort size, demographics and every generator knob"""
    n_pretrain: int = 64
    n_probe_train: int = 32
    n_test: int = 32
    min_epochs: int = 240
    max_epochs: int = 480
    stratified: bool = True
    age_mean: float = 55.0
    age_std: float = 15.0
    bmi_mean: float = 28.0
    bmi_std: float = 5.0
    modalities: List[str] = field(default_factory=lambda: [k.value for k in ModalityKind])
    high_rate: float = 200.0
    resp_rate: float = 25.0
    spo2_rate: float = 1.0
    noise_amp: float = 0.5
    base_matrix: List[List[float]] = field(default_factory=lambda: [list(r) for r in BASE_MATRIX])
    # per night-third log-propensity terms on N3 and REM
    n3_third: List[float] = field(default_factory=lambda: [0.6, 0.0, -0.8])
    n3_age: List[float] = field(default_factory=lambda: [-0.8, -0.4, -0.2])
    n3_bmi: List[float] = field(default_factory=lambda: [-0.5, -0.25, -0.1])
    n3_male: List[float] = field(default_factory=lambda: [-0.5, -0.25, -0.1])
    rem_third: List[float] = field(default_factory=lambda: [-0.6, 0.0, 0.4])
    rem_age: List[float] = field(default_factory=lambda: [0.0, -0.2, -0.4])
    rem_bmi: List[float] = field(default_factory=lambda: [0.0, -0.1, -0.2])
    rem_male: List[float] = field(default_factory=lambda: [0.0, -0.1, -0.2])
    rem_cycle_amp: float = 0.8
    rem_cycle_epochs: int = 180
    templates: Dict[str, Dict[str, Dict[str, float]]] = field(
        default_factory=lambda: {m: {s: dict(b) for s, b in t.items()} for m, t in DEFAULT_TEMPLATES.items()})
    sdb_base_rate: float = 12.0
    sdb_bmi_coef: float = 0.5
    sdb_male_coef: float = 0.3
    apnea_fraction: float = 0.35
    event_min_seconds: int = 10
    event_max_seconds: int = 40
    hypopnea_resp_scale: float = 0.2
    apnea_resp_scale: float = 0.03
    hypopnea_spo2_dip: float = 3.0
    apnea_spo2_dip: float = 6.0
    hazard_base: float = 0.1
    hazard_age: float = 1.0
    hazard_bmi: float = 0.5
    hazard_male: float = 0.5
    censor_horizon: float = 10.0
    workers: int = 1

    @property
    def stats(self) -> CohortStats:
        return CohortStats(self.age_mean, self.age_std, self.bmi_mean, self.bmi_std)

    @property
    def n_subjects(self) -> int:
        return self.n_pretrain + self.n_probe_train + self.n_test

    def zero_modulation(self) -> 'GeneratorConfig':
        """Copy with every demographic, night-third and cycle term removed"""
        zeros = [0.0, 0.0, 0.0]
        return replace(self, n3_third=list(zeros), n3_age=list(zeros), n3_bmi=list(zeros),
                       n3_male=list(zeros), rem_third=list(zeros), rem_age=list(zeros),
                       rem_bmi=list(zeros), rem_male=list(zeros), rem_cycle_amp=0.0)

    def validate(self):
        matrix = np.asarray(self.base_matrix, dtype=float)
        if matrix.shape != (5, 5):
            raise ConfigError(f"base_matrix must be 5x5, got {matrix.shape}")
        if np.any(matrix < 0) or not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-9):
            raise ConfigError("base_matrix rows must be nonnegative and sum to 1")
        if self.sdb_base_rate < 0 or self.hazard_base < 0 or self.censor_horizon < 0:
            raise ConfigError("SDB rate, hazard and censoring horizon must be nonnegative")
        if not 120 <= self.min_epochs <= self.max_epochs <= 1080:
            raise ConfigError(f"durations must satisfy 120 <= {self.min_epochs} <= {self.max_epochs} <= 1080")
        if not 0 < self.event_min_seconds <= self.event_max_seconds:
            raise ConfigError("event duration bounds are inconsistent")
        for rate in (self.high_rate, self.resp_rate, self.spo2_rate):
            if rate <= 0 or abs(rate * EPOCH_SECONDS - round(rate * EPOCH_SECONDS)) > 1e-9:
                raise ConfigError(f"native rate {rate} Hz must give whole samples per epoch")
        unknown = [m for m in self.modalities if m not in ModalityKind.__members__]
        if unknown:
            raise ConfigError(f"Unknown modalities: {unknown}")


# ----------------------------------------------------------------- demographics

def _truncated(mean: float, std: float, bounds: Tuple[float, float]):
    return truncnorm((bounds[0] - mean) / std, (bounds[1] - mean) / std, loc=mean, scale=std)


def tercile_bounds(cfg: GeneratorConfig) -> Dict[str, np.ndarray]:
    """Age and BMI tercile cut points of the configured distributions"""
    return {'age': _truncated(cfg.age_mean, cfg.age_std, AGE_RANGE).ppf([1 / 3, 2 / 3]),
            'bmi': _truncated(cfg.bmi_mean, cfg.bmi_std, BMI_RANGE).ppf([1 / 3, 2 / 3])}


def demographic_cell(profile: DemographicProfile, bounds: Dict[str, np.ndarray]) -> Tuple[str, int, int]:
    """(sex, age tercile, bmi tercile) of a profile"""
    return (profile.sex, int(np.searchsorted(bounds['age'], profile.age, side='right')),
            int(np.searchsorted(bounds['bmi'], profile.bmi, side='right')))


def sample_profile(rng: np.random.Generator, cfg: GeneratorConfig,
                   stratum: Optional[int] = None) -> DemographicProfile:
    """
    Draw a profile from truncated normals.

    With ``stratum`` in [0, 18) the draw is confined to one
    (sex x age-tercile x bmi-tercile) cell.
    """
    age_dist = _truncated(cfg.age_mean, cfg.age_std, AGE_RANGE)
    bmi_dist = _truncated(cfg.bmi_mean, cfg.bmi_std, BMI_RANGE)
    if stratum is None:
        sex = SEXES[int(rng.random() < 0.5)]
        u_age, u_bmi = rng.random(), rng.random()
    else:
        stratum = stratum % N_CELLS
        sex = SEXES[stratum // 9]
        age_k, bmi_k = (stratum // 3) % 3, stratum % 3
        u_age = rng.uniform(age_k / 3, (age_k + 1) / 3)
        u_bmi = rng.uniform(bmi_k / 3, (bmi_k + 1) / 3)
    age = float(np.clip(age_dist.ppf(u_age), *AGE_RANGE))
    bmi = float(np.clip(bmi_dist.ppf(u_bmi), *BMI_RANGE))
    return DemographicProfile(age=age, sex=sex, bmi=bmi).with_stats(cfg.stats)


# -------------------------------------------------------------------- hypnogram

def stationary_distribution(matrix: Sequence[Sequence[float]]) -> np.ndarray:
    values, vectors = np.linalg.eig(np.asarray(matrix, dtype=float).T)
    vector = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
    return vector / vector.sum()


def stage_logit_shift(profile: DemographicProfile, epoch: int, duration: int,
                      cfg: GeneratorConfig) -> Tuple[float, float]:
    """Additive log-propensity for entering N3 and REM at ``epoch``"""
    third = min(3 * epoch // duration, 2)
    n3 = (cfg.n3_third[third] + cfg.n3_age[third] * profile.z_age
          + cfg.n3_bmi[third] * profile.z_bmi + cfg.n3_male[third] * profile.male)
    rem = (cfg.rem_third[third] + cfg.rem_age[third] * profile.z_age
           + cfg.rem_bmi[third] * profile.z_bmi + cfg.rem_male[third] * profile.male)
    rem += cfg.rem_cycle_amp * math.cos(2.0 * math.pi * (epoch - 150) / cfg.rem_cycle_epochs)
    return n3, rem


def generate_hypnogram(profile: DemographicProfile, duration_epochs: int, rng: np.random.Generator,
                       cfg: GeneratorConfig) -> np.ndarray:
    """Stage codes (W=0 ... REM=4) for one night, starting awake"""
    if not 120 <= duration_epochs <= 1080:
        raise ConfigError(f"duration_epochs must be in [120, 1080], got {duration_epochs}")
    log_base = np.log(np.maximum(np.asarray(cfg.base_matrix, dtype=float), 1e-12))
    stages = np.zeros(duration_epochs, dtype=int)
    state = 0
    for t in range(1, duration_epochs):
        logits = log_base[state].copy()
        n3, rem = stage_logit_shift(profile, t, duration_epochs, cfg)
        logits[3] += n3
        logits[4] += rem
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        state = min(int(np.searchsorted(np.cumsum(probs), rng.random(), side='right')), 4)
        stages[t] = state
    return stages


# ----------------------------------------------------------------------- events

def generate_sdb_events(stages: np.ndarray, profile: DemographicProfile, rng: np.random.Generator,
                        cfg: GeneratorConfig) -> Tuple[np.ndarray, float]:
    """
    Per-second SDB labels (0 normal, 1 hypopnea, 2 apnea) and the AHI.

    Events arrive as a Poisson process during sleep and never overlap.
    """
    seconds = len(stages) * EPOCH_SECONDS
    labels = np.zeros(seconds, dtype=int)
    asleep = np.repeat(stages != 0, EPOCH_SECONDS)
    sleep_hours = asleep.sum() / 3600.0
    if sleep_hours == 0:
        return labels, 0.0
    rate = cfg.sdb_base_rate * math.exp(cfg.sdb_bmi_coef * profile.z_bmi + cfg.sdb_male_coef * profile.male)
    target = int(rng.poisson(rate * sleep_hours))
    sleep_seconds = np.flatnonzero(asleep)
    placed = 0
    for _ in range(20 * target):
        if placed == target:
            break
        start = int(sleep_seconds[rng.integers(len(sleep_seconds))])
        length = int(rng.integers(cfg.event_min_seconds, cfg.event_max_seconds + 1))
        kind = 2 if rng.random() < cfg.apnea_fraction else 1
        stop = start + length
        if stop > seconds or labels[max(start - 1, 0):min(stop + 1, seconds)].any():
            continue
        labels[start:stop] = kind
        placed += 1
    return labels, placed / sleep_hours


def generate_survival(profile: DemographicProfile, rng: np.random.Generator,
                      cfg: GeneratorConfig) -> SurvivalLabel:
    """Exponential event time with uniform censoring on [0, horizon]"""
    risk = cfg.hazard_age * profile.z_age + cfg.hazard_bmi * profile.z_bmi + cfg.hazard_male * profile.male
    event_time = rng.exponential(1.0 / (cfg.hazard_base * math.exp(risk)))
    censor_time = rng.uniform(0.0, cfg.censor_horizon)
    if event_time <= censor_time:
        return SurvivalLabel(time=float(event_time), event=1)
    return SurvivalLabel(time=float(censor_time), event=0)


# ---------------------------------------------------------------------- signals

def _unit(x: np.ndarray) -> np.ndarray:
    std = x.std()
    return x / std if std > 0 else x


def pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n)
    freqs[0] = freqs[1] if n > 2 else 1.0
    return _unit(np.fft.irfft(spectrum / np.sqrt(freqs), n=n))


def band_noise(rng: np.random.Generator, n: int, fs: float, band: Tuple[float, float]) -> np.ndarray:
    high = min(band[1], 0.45 * fs)
    sos = butter(4, [band[0], high], btype='bandpass', fs=fs, output='sos')
    return _unit(sosfiltfilt(sos, rng.standard_normal(n)))


def stage_oscillations(stages: np.ndarray, template: Dict[str, Dict[str, float]], fs: float,
                       rng: np.random.Generator, noise_amp: float) -> np.ndarray:
    """Sum of stage-gated band-limited components plus pink noise"""
    per_epoch = int(round(fs * EPOCH_SECONDS))
    n = len(stages) * per_epoch
    x = noise_amp * pink_noise(rng, n)
    bands = sorted({band for stage in STAGES for band in template.get(stage, {})})
    for band in bands:
        amps = np.array([template.get(stage, {}).get(band, 0.0) for stage in STAGES])
        x += np.repeat(amps[stages], per_epoch) * band_noise(rng, n, fs, BANDS[band])
    return x


def _ecg(stages: np.ndarray, fs: float, rng: np.random.Generator, noise_amp: float) -> np.ndarray:
    per_epoch = int(round(fs * EPOCH_SECONDS))
    beats_per_sample = np.repeat(np.array([HEART_RATE_BPM[s] for s in STAGES])[stages], per_epoch) / 60.0 / fs
    phase = np.cumsum(beats_per_sample)
    impulses = np.zeros_like(phase)
    impulses[1:][np.diff(np.floor(phase)) > 0] = 1.0
    sigma = 0.015 * fs
    kernel = np.exp(-0.5 * (np.arange(-3 * sigma, 3 * sigma + 1) / sigma) ** 2)
    return np.convolve(impulses, kernel, mode='same') + 0.1 * noise_amp * pink_noise(rng, len(phase))


def _per_sample(per_second: np.ndarray, n: int, fs: float) -> np.ndarray:
    """Spread a per-second track over n samples at fs Hz"""
    seconds = np.minimum((np.arange(n) / fs).astype(int), len(per_second) - 1)
    return per_second[seconds]


def _resp(stages: np.ndarray, sdb: np.ndarray, fs: float, rng: np.random.Generator,
          cfg: GeneratorConfig) -> np.ndarray:
    per_epoch = int(round(fs * EPOCH_SECONDS))
    breaths_per_sample = np.repeat(np.array([BREATHS_PER_MIN[s] for s in STAGES])[stages], per_epoch) / 60.0 / fs
    phase = np.cumsum(breaths_per_sample)
    scale = np.array([1.0, cfg.hypopnea_resp_scale, cfg.apnea_resp_scale])[sdb]
    envelope = _per_sample(scale, len(phase), fs)
    return envelope * np.sin(2.0 * np.pi * phase) + 0.05 * rng.standard_normal(len(phase))


def _spo2(stages: np.ndarray, sdb: np.ndarray, fs: float, rng: np.random.Generator,
          cfg: GeneratorConfig) -> np.ndarray:
    n = len(stages) * int(round(fs * EPOCH_SECONDS))
    dip = np.array([0.0, cfg.hypopnea_spo2_dip, cfg.apnea_spo2_dip])[sdb]
    x = 96.0 - _per_sample(dip, n, fs) + 0.3 * rng.standard_normal(n)
    return np.minimum(x, 100.0)


def generate_signals(stages: np.ndarray, profile: DemographicProfile, rng: np.random.Generator,
                     cfg: GeneratorConfig, record_id: str = 'sub-0000') -> RawRecord:
    """Waveforms for every configured modality, with SDB labels and AHI attached"""
    if len(stages) == 0:
        raise ConfigError("Cannot synthesize signals for an empty hypnogram")
    sdb, ahi = generate_sdb_events(stages, profile, rng, cfg)
    signals = {}
    for name in cfg.modalities:
        kind = ModalityKind(name)
        if kind in (ModalityKind.EEG, ModalityKind.EOG, ModalityKind.EMG):
            rate = cfg.high_rate
            x = stage_oscillations(stages, cfg.templates[name], rate, rng, cfg.noise_amp)
        elif kind == ModalityKind.ECG:
            rate = cfg.high_rate
            x = _ecg(stages, rate, rng, cfg.noise_amp)
        elif kind == ModalityKind.RESP:
            rate = cfg.resp_rate
            x = _resp(stages, sdb, rate, rng, cfg)
        else:
            rate = cfg.spo2_rate
            x = _spo2(stages, sdb, rate, rng, cfg)
        signals[kind] = ModalitySignals(rate, [CHANNEL_NAMES[kind]], x[None, :])
    return RawRecord(record_id, signals, profile=profile, stages=np.asarray(stages, dtype=int),
                     sdb=sdb, ahi=float(ahi))


# ----------------------------------------------------------------------- cohort

def split_of(index: int, cfg: GeneratorConfig) -> str:
    if index < cfg.n_pretrain:
        return 'pretrain'
    if index < cfg.n_pretrain + cfg.n_probe_train:
        return 'probe_train'
    return 'test'


def generate_record(index: int, seed_seq: np.random.SeedSequence, cfg: GeneratorConfig) -> RawRecord:
    rng = np.random.default_rng(seed_seq)
    profile = sample_profile(rng, cfg, stratum=index if cfg.stratified else None)
    duration = int(rng.integers(cfg.min_epochs, cfg.max_epochs + 1))
    stages = generate_hypnogram(profile, duration, rng, cfg)
    record = generate_signals(stages, profile, rng, cfg, record_id=f"sub-{index:04d}")
    record.survival = generate_survival(profile, rng, cfg)
    return record


def _write_one(args) -> Dict:
    index, seed_seq, cfg, records_dir, config_hash = args
    record = generate_record(index, seed_seq, cfg)
    write_record(record, Path(records_dir) / record.record_id, config_hash=config_hash)
    profile = record.profile
    return {
        'record_id': record.record_id, 'age': profile.age, 'sex': profile.sex, 'bmi': profile.bmi,
        'duration': len(record.stages), 'survival_time': record.survival.time,
        'event': record.survival.event, 'ahi': record.ahi, 'split': split_of(index, cfg),
        'config_hash': config_hash,
        'stages': record.stages,
    }


def stage_distribution_by_group(profiles: Sequence[DemographicProfile], hypnograms: Sequence[np.ndarray],
                                cfg: GeneratorConfig) -> pd.DataFrame:
    """Stage proportions per night-third for every (sex, age tercile, bmi tercile) group"""
    bounds = tercile_bounds(cfg)
    rows = []
    for profile, stages in zip(profiles, hypnograms):
        sex, age_k, bmi_k = demographic_cell(profile, bounds)
        for third, chunk in enumerate(np.array_split(np.asarray(stages), 3)):
            counts = np.bincount(chunk, minlength=5) / max(len(chunk), 1)
            rows.append({'sex': sex, 'age_tercile': age_k, 'bmi_tercile': bmi_k, 'third': third,
                         **{stage: counts[i] for i, stage in enumerate(STAGES)}})
    frame = pd.DataFrame(rows, columns=['sex', 'age_tercile', 'bmi_tercile', 'third', *STAGES])
    grouped = frame.groupby(['sex', 'age_tercile', 'bmi_tercile', 'third'], as_index=False)
    summary = grouped[list(STAGES)].mean()
    summary['n_subjects'] = grouped.size()['size'].to_numpy()
    return summary


def generate_cohort(cfg: GeneratorConfig, seed: int, out_dir: Path, config_hash: str = '',
                    limit: Optional[int] = None) -> pd.DataFrame:
    """
    Write ``records/<record_id>/`` directories, ``manifest.csv`` and
    ``macrostructure.csv`` under ``out_dir``.

    Returns:
        The manifest as a DataFrame
    """
    cfg.validate()
    out_dir = Path(out_dir)
    records_dir = out_dir / 'records'
    records_dir.mkdir(parents=True, exist_ok=True)
    n = cfg.n_subjects if limit is None else min(limit, cfg.n_subjects)
    children = np.random.SeedSequence(seed).spawn(cfg.n_subjects)[:n]
    jobs = [(i, children[i], cfg, str(records_dir), config_hash) for i in range(n)]

    logger.info(f"Generating {n} synthetic records into {records_dir}")
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(tqdm(pool.map(_write_one, jobs), total=n, desc="Synthesizing"))
    else:
        rows = [_write_one(job) for job in tqdm(jobs, desc="Synthesizing")]

    hypnograms = [row.pop('stages') for row in rows]
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    write_manifest(manifest, out_dir / 'manifest.csv')

    profiles = [DemographicProfile(r['age'], r['sex'], r['bmi']).with_stats(cfg.stats) for r in rows]
    macro = stage_distribution_by_group(profiles, hypnograms, cfg)
    macro['config_hash'] = config_hash
    macro.to_csv(out_dir / 'macrostructure.csv', index=False, float_format='%.6f')
    logger.info(f"Cohort ready: {n} records, mean AHI {manifest['ahi'].mean():.1f}")
    return manifest
