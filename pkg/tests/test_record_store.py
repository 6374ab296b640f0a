import json

import numpy as np
import pandas as pd
import pytest

from errors import DataError
from record_store import (MANIFEST_COLUMNS, CohortStats, DemographicProfile, ModalityKind, ModalitySignals,
                          RawRecord, SurvivalLabel, profile_from_row, read_manifest, read_record, write_manifest,
                          write_record)


def make_record(rng, seconds=90):
    return RawRecord(
        record_id='sub-0001',
        signals={
            ModalityKind.EEG: ModalitySignals(200.0, ['C3'], rng.normal(size=(1, 200 * seconds))),
            ModalityKind.RESP: ModalitySignals(25.0, ['airflow'], rng.normal(size=(1, 25 * seconds))),
        },
        profile=DemographicProfile(age=60.0, sex='male', bmi=31.0),
        stages=np.array([0, 2, 4]),
        sdb=np.zeros(seconds, dtype=int),
        survival=SurvivalLabel(time=3.5, event=1),
        ahi=7.5,
    )


def test_record_round_trip(tmp_path, rng):
    record = make_record(rng)
    write_record(record, tmp_path / 'sub-0001', config_hash='0123456789abcdef')
    header = json.loads((tmp_path / 'sub-0001' / 'header.json').read_text())
    assert list(header) == sorted(header)
    assert header['config_hash'] == '0123456789abcdef'
    stages = pd.read_csv(tmp_path / 'sub-0001' / 'stages.csv')
    assert stages['stage'].tolist() == ['W', 'N2', 'REM']

    loaded = read_record(tmp_path / 'sub-0001', CohortStats())
    np.testing.assert_allclose(loaded.signals[ModalityKind.EEG].samples,
                               record.signals[ModalityKind.EEG].samples, rtol=1e-6, atol=1e-6)
    assert loaded.signals[ModalityKind.RESP].rate == 25.0
    np.testing.assert_array_equal(loaded.stages, record.stages)
    assert loaded.survival == record.survival
    assert loaded.profile.z_age == pytest.approx((60.0 - 55.0) / 15.0)
    assert loaded.ahi == 7.5


def test_read_record_errors(tmp_path, rng):
    with pytest.raises(DataError, match="header"):
        read_record(tmp_path / 'nowhere')
    directory = write_record(make_record(rng), tmp_path / 'rec')
    (directory / 'RESP_airflow.f32').write_bytes(np.zeros(10, dtype='<f4').tobytes())
    with pytest.raises(DataError, match="samples"):
        read_record(directory)
    (directory / 'RESP_airflow.f32').unlink()
    with pytest.raises(DataError, match="Missing channel"):
        read_record(directory)


def test_validate_rejects_label_length_mismatch(rng):
    record = make_record(rng)
    record.stages = np.array([0, 1])
    with pytest.raises(DataError, match="stage labels"):
        record.validate()


def test_manifest_round_trip_and_missing_columns(tmp_path):
    frame = pd.DataFrame([{'record_id': 'sub-0000', 'age': 40.0, 'sex': 'female', 'bmi': 22.0,
                           'duration': 240, 'survival_time': 2.0, 'event': 0, 'ahi': 3.0,
                           'split': 'pretrain', 'config_hash': '00ff'}])
    write_manifest(frame, tmp_path / 'manifest.csv')
    loaded = read_manifest(tmp_path / 'manifest.csv')
    assert list(loaded.columns) == MANIFEST_COLUMNS
    assert loaded.loc[0, 'config_hash'] == '00ff'
    with pytest.raises(DataError):
        write_manifest(frame.drop(columns=['ahi']), tmp_path / 'bad.csv')
    with pytest.raises(DataError):
        read_manifest(tmp_path / 'absent.csv')


@pytest.mark.parametrize('row', [
    {'age': float('nan'), 'sex': 'male', 'bmi': 25.0},
    {'age': 12.0, 'sex': 'male', 'bmi': 25.0},
    {'age': 40.0, 'sex': 'unknown', 'bmi': 25.0},
    {'age': 40.0, 'sex': 'female', 'bmi': 80.0},
])
def test_profile_from_row_rejects_invalid_demographics(row):
    assert profile_from_row(row, CohortStats()) is None


def test_profile_from_row_computes_z_scores():
    profile = profile_from_row({'age': 70.0, 'sex': 'female', 'bmi': 23.0}, CohortStats())
    assert profile.z_age == pytest.approx(1.0)
    assert profile.z_bmi == pytest.approx(-1.0)
    assert profile.male == 0.0


def test_frequency_classes():
    assert ModalityKind.RESP.frequency_class == 'low'
    assert ModalityKind.SPO2.frequency_class == 'low'
    assert ModalityKind.EEG.frequency_class == 'high'
