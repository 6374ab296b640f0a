"""
Record-level types and their on-disk format.

A record directory holds ``header.json`` (sorted keys), one little-endian
float32 file per channel named ``<modality>_<channel>.f32``, and the
label tracks ``stages.csv`` (epoch_index,stage) and ``sdb.csv``
(second_index,sdb_class). The cohort manifest is a single CSV.
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd

from errors import DataError

logger = logging.getLogger(__name__)

EPOCH_SECONDS = 30
STAGES = ('W', 'N1', 'N2', 'N3', 'REM')
STAGE_CODES = {name: code for code, name in enumerate(STAGES)}
SDB_CLASSES = ('normal', 'hypopnea', 'apnea')
SEXES = ('female', 'male')

MANIFEST_COLUMNS = ['record_id', 'age', 'sex', 'bmi', 'duration', 'survival_time',
                    'event', 'ahi', 'split', 'config_hash']

AGE_RANGE = (18.0, 95.0)
BMI_RANGE = (15.0, 50.0)


class ModalityKind(str, Enum):
    EEG = 'EEG'
    EOG = 'EOG'
    EMG = 'EMG'
    ECG = 'ECG'
    RESP = 'RESP'
    SPO2 = 'SPO2'

    @property
    def frequency_class(self) -> str:
        return 'low' if self in (ModalityKind.RESP, ModalityKind.SPO2) else 'high'


@dataclass(frozen=True)
class CohortStats:
    """Population statistics used to z-score age and BMI"""
    age_mean: float = 55.0
    age_std: float = 15.0
    bmi_mean: float = 28.0
    bmi_std: float = 5.0


@dataclass
class DemographicProfile:
    age: float
    sex: str
    bmi: float
    z_age: float = 0.0
    z_bmi: float = 0.0

    @property
    def male(self) -> float:
        return 1.0 if self.sex == 'male' else 0.0

    @property
    def is_valid(self) -> bool:
        values_ok = all(isinstance(v, (int, float)) and math.isfinite(v) for v in (self.age, self.bmi))
        return (values_ok and self.sex in SEXES
                and AGE_RANGE[0] <= self.age <= AGE_RANGE[1]
                and BMI_RANGE[0] <= self.bmi <= BMI_RANGE[1])

    def with_stats(self, stats: CohortStats) -> 'DemographicProfile':
        """Copy with z-fields recomputed under ``stats``"""
        return replace(self, z_age=(self.age - stats.age_mean) / stats.age_std,
                       z_bmi=(self.bmi - stats.bmi_mean) / stats.bmi_std)


@dataclass
class SurvivalLabel:
    time: float
    event: int


@dataclass
class ModalitySignals:
    """All channels of one modality, sharing a sampling rate"""
    rate: float
    channels: List[str]
    samples: np.ndarray  # [C, n]

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.rate


@dataclass
class RawRecord:
    record_id: str
    signals: Dict[ModalityKind, ModalitySignals]
    profile: Optional[DemographicProfile] = None
    stages: Optional[np.ndarray] = None
    sdb: Optional[np.ndarray] = None
    survival: Optional[SurvivalLabel] = None
    ahi: Optional[float] = None
    metadata: Dict = field(default_factory=dict)

    @property
    def duration(self) -> float:
        return min(s.duration for s in self.signals.values())

    def validate(self):
        """Raise DataError unless rates are positive and label tracks fit the waveform"""
        if not self.signals:
            raise DataError(f"Record {self.record_id} has no modalities")
        for kind, signals in self.signals.items():
            if signals.rate <= 0:
                raise DataError(f"Record {self.record_id}: {kind.value} rate must be positive")
            if signals.samples.ndim != 2 or signals.samples.shape[0] != len(signals.channels):
                raise DataError(f"Record {self.record_id}: {kind.value} samples {signals.samples.shape} "
                                f"do not match {len(signals.channels)} channels")
        epochs = int(self.duration // EPOCH_SECONDS)
        if self.stages is not None and len(self.stages) != epochs:
            raise DataError(f"Record {self.record_id}: {len(self.stages)} stage labels for {epochs} epochs")
        seconds = int(self.duration)
        if self.sdb is not None and len(self.sdb) != seconds:
            raise DataError(f"Record {self.record_id}: {len(self.sdb)} SDB labels for {seconds} seconds")


def write_record(record: RawRecord, directory: Union[str, Path], config_hash: Optional[str] = None) -> Path:
    """Write one record directory; returns its path"""
    record.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    modalities = {}
    for kind, signals in record.signals.items():
        for name, row in zip(signals.channels, signals.samples):
            (directory / f"{kind.value}_{name}.f32").write_bytes(np.asarray(row, dtype='<f4').tobytes())
        modalities[kind.value] = {'rate': float(signals.rate), 'channels': list(signals.channels),
                                  'n_samples': int(signals.samples.shape[1])}

    header = {
        'record_id': record.record_id,
        'modalities': modalities,
        'demographics': None if record.profile is None else {
            'age': record.profile.age, 'sex': record.profile.sex, 'bmi': record.profile.bmi},
        'survival': None if record.survival is None else {
            'time': record.survival.time, 'event': int(record.survival.event)},
        'ahi': record.ahi,
        'labels': {'stages': 'stages.csv' if record.stages is not None else None,
                   'sdb': 'sdb.csv' if record.sdb is not None else None},
        'config_hash': config_hash,
    }
    with open(directory / 'header.json', 'w') as f:
        json.dump(header, f, indent=2, sort_keys=True)

    if record.stages is not None:
        pd.DataFrame({'epoch_index': np.arange(len(record.stages)),
                      'stage': [STAGES[int(s)] for s in record.stages]}).to_csv(directory / 'stages.csv', index=False)
    if record.sdb is not None:
        pd.DataFrame({'second_index': np.arange(len(record.sdb)),
                      'sdb_class': np.asarray(record.sdb, dtype=int)}).to_csv(directory / 'sdb.csv', index=False)
    return directory


def read_record(directory: Union[str, Path], stats: Optional[CohortStats] = None) -> RawRecord:
    directory = Path(directory)
    header_path = directory / 'header.json'
    if not header_path.exists():
        raise DataError(f"Missing header.json in {directory}")
    with open(header_path) as f:
        header = json.load(f)

    signals = {}
    for kind_name, info in header['modalities'].items():
        kind = ModalityKind(kind_name)
        rows = []
        for name in info['channels']:
            path = directory / f"{kind_name}_{name}.f32"
            if not path.exists():
                raise DataError(f"Missing channel file {path.name} in {directory}")
            row = np.frombuffer(path.read_bytes(), dtype='<f4').astype(np.float64)
            if row.size != info['n_samples']:
                raise DataError(f"{path.name} holds {row.size} samples, header says {info['n_samples']} "
                                f"at {info['rate']} Hz")
            rows.append(row)
        signals[kind] = ModalitySignals(float(info['rate']), list(info['channels']), np.stack(rows))

    profile = None
    if header.get('demographics'):
        d = header['demographics']
        profile = DemographicProfile(age=d['age'], sex=d['sex'], bmi=d['bmi'])
        profile = profile.with_stats(stats or CohortStats())

    stages = sdb = None
    labels = header.get('labels') or {}
    if labels.get('stages'):
        frame = pd.read_csv(directory / labels['stages'])
        try:
            stages = frame.sort_values('epoch_index')['stage'].map(STAGE_CODES).to_numpy(dtype=int)
        except (KeyError, ValueError) as e:
            raise DataError(f"Malformed stages.csv in {directory}: {e}") from None
    if labels.get('sdb'):
        frame = pd.read_csv(directory / labels['sdb'])
        sdb = frame.sort_values('second_index')['sdb_class'].to_numpy(dtype=int)

    survival = None
    if header.get('survival'):
        survival = SurvivalLabel(float(header['survival']['time']), int(header['survival']['event']))

    record = RawRecord(header['record_id'], signals, profile, stages, sdb, survival, header.get('ahi'),
                       metadata={'config_hash': header.get('config_hash')})
    record.validate()
    return record


def write_manifest(manifest: pd.DataFrame, path: Union[str, Path]) -> Path:
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise DataError(f"Manifest is missing columns: {missing}")
    path = Path(path)
    manifest[MANIFEST_COLUMNS].to_csv(path, index=False)
    logger.info(f"Wrote manifest with {len(manifest)} records to {path}")
    return path


def read_manifest(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"Cohort manifest not found: {path}")
    manifest = pd.read_csv(path, dtype={'record_id': str, 'sex': str, 'split': str, 'config_hash': str})
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise DataError(f"Manifest {path} is missing columns: {missing}")
    return manifest


def profile_from_row(row, stats: CohortStats) -> Optional[DemographicProfile]:
    """Profile for a manifest row, or None when demographics are missing or out of range"""
    try:
        profile = DemographicProfile(age=float(row['age']), sex=str(row['sex']), bmi=float(row['bmi']))
    except (TypeError, ValueError):
        return None
    return profile.with_stats(stats) if profile.is_valid else None
