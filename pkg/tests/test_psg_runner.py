import json
from dataclasses import asdict

import numpy as np
import pandas as pd
import pytest

import numerics_core as nc
from errors import DataError
from micro_encoder import MicroConfig
from psg_runner import PSGRunner, main
from run_config import load_run_config


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ('PSGDE_SEED', 'PSGDE_OUT', 'PSGDE_STAGE', 'PSGDE_LOG_LEVEL'):
        monkeypatch.delenv(name, raising=False)


def tiny_run_config(tmp_path, **changes):
    """A cohort of 16 short nights and the smallest encoders"""
    body = {
        'seed': 1,
        'cohort': {'n_pretrain': 8, 'n_probe_train': 4, 'n_test': 4, 'min_epochs': 120, 'max_epochs': 130,
                   'high_rate': 100.0, 'hazard_base': 2.0, 'modalities': ['EEG', 'EOG', 'EMG', 'RESP', 'SPO2']},
        'micro': asdict(MicroConfig.tiny()),
        'macro': {'d_model': 8, 'depth': 1, 'state_dim': 4, 'interval_epochs': 40, 'batch_size': 4},
        'optim': {'micro_batch': 4, 'windows_per_record': 1},
        'probe': {'steps': 20},
        **changes,
    }
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(body))
    return path


def test_unknown_config_key_exits_2(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text(json.dumps({'micro': {'depth': 3}}))
    assert main(['synth', '--config', str(path), '--out', str(tmp_path / 'out')]) == 2


def test_unknown_stage_exits_2(tmp_path):
    assert main(['pretrain', '--stage', 'finetune', '--out', str(tmp_path)]) == 2


def test_macro_without_micro_checkpoint_exits_3(tmp_path):
    config = tiny_run_config(tmp_path)
    assert main(['pretrain', '--config', str(config), '--stage', 'macro', '--out', str(tmp_path / 'out')]) == 3


def test_probe_without_cohort_exits_3(tmp_path):
    config = tiny_run_config(tmp_path)
    assert main(['probe', '--config', str(config), '--out', str(tmp_path / 'out')]) == 3


def test_synth_refuses_to_overwrite_without_force(tmp_path):
    config = tiny_run_config(tmp_path)
    out = tmp_path / 'out'
    assert main(['synth', '--config', str(config), '--out', str(out), '--limit-subjects', '6']) == 0
    manifest = pd.read_csv(out / 'cohort' / 'manifest.csv')
    assert len(manifest) == 6
    assert set(manifest['split']) == {'pretrain', 'probe_train', 'test'}
    assert main(['synth', '--config', str(config), '--out', str(out)]) == 3
    assert main(['synth', '--config', str(config), '--out', str(out), '--force', '--limit-subjects', '8']) == 0
    assert len(pd.read_csv(out / 'cohort' / 'manifest.csv')) == 8
    assert (out / 'psg_runner.log').exists()


def test_limit_keeps_split_minimums(tmp_path):
    cfg = load_run_config(tiny_run_config(tmp_path), environ={}, overrides={'paths': {'out': str(tmp_path)}})
    cohort = PSGRunner(cfg, limit_subjects=5).cohort_config()
    assert (cohort.n_pretrain, cohort.n_probe_train, cohort.n_test) == (2, 2, 2)
    assert PSGRunner(cfg, limit_subjects=100).cohort_config() is cfg.cohort


def test_subject_limit_changes_the_config_hash(tmp_path):
    cfg = load_run_config(tiny_run_config(tmp_path), environ={}, overrides={'paths': {'out': str(tmp_path)}})
    limited = PSGRunner(cfg, limit_subjects=6)
    assert limited.config_hash != PSGRunner(cfg).config_hash
    explicit = load_run_config(tiny_run_config(tmp_path), environ={}, overrides={
        'paths': {'out': str(tmp_path)},
        'cohort': {'n_pretrain': 2, 'n_probe_train': 2, 'n_test': 2}})
    assert limited.config_hash == PSGRunner(explicit).config_hash
    assert PSGRunner(cfg, limit_subjects=100).config_hash == cfg.config_hash


def test_check_splits_detects_leakage(tmp_path):
    cfg = load_run_config(environ={}, overrides={'paths': {'out': str(tmp_path)}})
    runner = PSGRunner(cfg)
    manifest = pd.DataFrame({'record_id': ['a', 'b', 'b', 'c'], 'split': ['pretrain', 'probe_train', 'test', 'test']})
    with pytest.raises(DataError, match="leakage"):
        runner.check_splits(manifest)
    with pytest.raises(DataError, match="non-empty"):
        runner.check_splits(pd.DataFrame({'record_id': ['a'], 'split': ['test']}))


def test_epoch_embeddings_are_written_per_record(tmp_path):
    cfg = load_run_config(environ={}, overrides={'paths': {'out': str(tmp_path)}})
    runner = PSGRunner(cfg)
    epochs = np.arange(12, dtype=float).reshape(4, 3) / 7.0
    path = runner.write_epoch_embeddings('rec_0003', epochs)
    assert path == tmp_path / 'embeddings' / 'epochs' / 'rec_0003.csv'
    frame = pd.read_csv(path, dtype={'config_hash': str})
    assert list(frame.columns) == ['epoch_index', 'e0', 'e1', 'e2', 'config_hash']
    assert frame['epoch_index'].tolist() == [0, 1, 2, 3]
    np.testing.assert_allclose(frame[['e0', 'e1', 'e2']].to_numpy(), epochs, rtol=1e-9)
    assert set(frame['config_hash']) == {cfg.config_hash}


@pytest.mark.slow
def test_end_to_end_run_writes_every_artifact(tmp_path):
    config = tiny_run_config(tmp_path)
    out = tmp_path / 'out'
    assert main(['all', '--config', str(config), '--out', str(out)]) == 0

    micro_loss = pd.read_csv(out / 'micro_loss.csv')
    assert list(micro_loss.columns) == ['step', 'epoch', 'lr', 'total', 'recon', 'cl', 'koleo', 'config_hash']
    assert micro_loss['step'].tolist() == list(range(len(micro_loss)))
    assert (out / 'checkpoints' / 'micro.ckpt').exists()
    assert (out / 'checkpoints' / 'macro.ckpt').exists()
    assert len(pd.read_csv(out / 'macro_loss.csv')) >= 1

    for task in ('stage5', 'sdb3', 'survival', 'regression', 'binary'):
        record = json.loads((out / 'metrics' / f'metrics_{task}.json').read_text())
        assert set(record) == {'task', 'split', 'accuracy', 'macro_f1', 'kappa', 'c_index', 'mae', 'per_class',
                               'config_hash'}
    stage = json.loads((out / 'metrics' / 'metrics_stage5.json').read_text())
    assert 0.0 <= stage['accuracy'] <= 1.0
    assert stage['c_index'] is None
    confusion = pd.read_csv(out / 'metrics' / 'confusion_stage5.csv', index_col=0)
    assert list(confusion.index) == ['W', 'N1', 'N2', 'N3', 'REM']

    comparison = json.loads((out / 'metrics' / 'comparison.json').read_text())
    assert set(comparison['micro']) == {'sex_accuracy', 'age_mae', 'ahi_mae', 'stage_accuracy'}
    assert set(comparison['group_cosine_gap']) == {'before', 'after'}
    assert (out / 'metrics' / 'fewshot.csv').exists()
    embeddings = pd.read_csv(out / 'embeddings' / 'subject_embeddings.csv')
    assert len(embeddings) == 8
    manifest = pd.read_csv(out / 'cohort' / 'manifest.csv')
    for record_id in manifest.loc[manifest['split'] != 'pretrain', 'record_id']:
        epochs = pd.read_csv(out / 'embeddings' / 'epochs' / f'{record_id}.csv', dtype={'config_hash': str})
        assert list(epochs.columns) == ['epoch_index'] + [f'e{i}' for i in range(96)] + ['config_hash']
        assert epochs['epoch_index'].tolist() == list(range(len(epochs)))
        assert len(epochs) >= 120
        assert epochs['config_hash'].nunique() == 1

    # finished stages resume as no-ops and keep the loss history
    assert main(['pretrain', '--config', str(config), '--out', str(out), '--stage', 'micro']) == 0
    pd.testing.assert_frame_equal(pd.read_csv(out / 'micro_loss.csv'), micro_loss)


@pytest.mark.slow
def test_single_probe_stage(tmp_path):
    config = tiny_run_config(tmp_path)
    out = tmp_path / 'out'
    assert main(['synth', '--config', str(config), '--out', str(out)]) == 0
    assert main(['pretrain', '--config', str(config), '--out', str(out), '--stage', 'micro']) == 0
    assert main(['pretrain', '--config', str(config), '--out', str(out), '--stage', 'macro']) == 0
    assert main(['probe', '--config', str(config), '--out', str(out), '--stage', 'probe:stage5']) == 0
    assert sorted(p.name for p in (out / 'metrics').glob('metrics_*.json')) == ['metrics_stage5.json']


class Interrupted(Exception):
    pass


@pytest.mark.slow
def test_resume_after_an_epoch_matches_an_uninterrupted_run(tmp_path, monkeypatch):
    config = tiny_run_config(tmp_path, optim={'micro_batch': 4, 'windows_per_record': 1, 'micro_epochs': 2})
    straight, resumed = tmp_path / 'straight', tmp_path / 'resumed'
    for out in (straight, resumed):
        assert main(['synth', '--config', str(config), '--out', str(out)]) == 0
    assert main(['pretrain', '--config', str(config), '--out', str(straight), '--stage', 'micro']) == 0

    save = PSGRunner._save

    def save_then_stop(runner, *args, **kwargs):
        save(runner, *args, **kwargs)
        raise Interrupted()

    monkeypatch.setattr(PSGRunner, '_save', save_then_stop)
    with pytest.raises(Interrupted):
        main(['pretrain', '--config', str(config), '--out', str(resumed), '--stage', 'micro'])
    monkeypatch.setattr(PSGRunner, '_save', save)
    assert main(['pretrain', '--config', str(config), '--out', str(resumed), '--stage', 'micro']) == 0

    assert (straight / 'micro_loss.csv').read_bytes() == (resumed / 'micro_loss.csv').read_bytes()
    first, first_meta = nc.load_checkpoint(straight / 'checkpoints' / 'micro.ckpt')
    second, second_meta = nc.load_checkpoint(resumed / 'checkpoints' / 'micro.ckpt')
    assert first_meta == second_meta
    assert first.keys() == second.keys()
    for name in first:
        np.testing.assert_array_equal(first[name], second[name])


@pytest.mark.slow
def test_micro_loss_drops_over_the_first_epoch(tmp_path):
    config = tiny_run_config(tmp_path, optim={'micro_batch': 4, 'windows_per_record': 24, 'micro_lr': 5e-3})
    out = tmp_path / 'out'
    assert main(['synth', '--config', str(config), '--out', str(out)]) == 0
    assert main(['pretrain', '--config', str(config), '--out', str(out), '--stage', 'micro']) == 0
    total = pd.read_csv(out / 'micro_loss.csv')['total'].to_numpy()
    assert len(total) == 48
    assert total[-4:].mean() <= 0.8 * total[:4].mean()


@pytest.mark.slow
def test_stage_accuracy_beats_the_majority_class(tmp_path):
    config = tiny_run_config(tmp_path, probe={'steps': 300})
    out = tmp_path / 'out'
    assert main(['all', '--config', str(config), '--out', str(out)]) == 0
    comparison = json.loads((out / 'metrics' / 'comparison.json').read_text())
    assert comparison['macro']['stage_accuracy'] >= comparison['majority_stage_accuracy'] + 0.15
    assert comparison['components'] == {'shared': True, 'contrastive': True, 'koleo': True,
                                        'dgcl_terms': ['age', 'bmi', 'sex']}
