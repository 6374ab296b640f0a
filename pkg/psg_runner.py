"""
Command-line pipeline: synthesize a cohort, pretrain both encoders, probe and evaluate.

    python psg_runner.py synth    --out runs/demo
    python psg_runner.py pretrain --out runs/demo --stage micro
    python psg_runner.py pretrain --out runs/demo --stage macro
    python psg_runner.py probe    --out runs/demo --stage probe:stage5
    python psg_runner.py eval     --out runs/demo
    python psg_runner.py all      --out runs/demo --limit-subjects 24
"""
import argparse
import json
import logging
import math
import os
import shutil
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from tqdm import tqdm

import numerics_core as nc
from downstream_eval import (bandpower_features, confusion_frame, evaluate_probe, few_shot_curve,
                             metrics_record, probe_train, wake_truncate)
from errors import ConfigError, DataError, PSGError
from macro_encoder import MacroEncoder, group_cosine_gap, macro_batch_loss, stratified_batches, subject_embed
from micro_encoder import MicroEncoder, build_mask_plan, encode_record, sample_windows, stack_masks
from record_store import DemographicProfile, ModalityKind, profile_from_row, read_manifest, read_record
from run_config import ENV_PREFIX, RunConfig, load_run_config
from signal_pipeline import patchify, standardize
from synthetic_cohort import demographic_cell, generate_cohort, tercile_bounds

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ['step', 'epoch', 'lr', 'total', 'recon', 'cl', 'koleo', 'config_hash']
MACRO_LOSS_COLUMNS = ['step', 'epoch', 'lr', 'dgcl', 'skipped_intervals', 'config_hash']
PROBE_TASKS = ('stage5', 'sdb3', 'survival', 'regression', 'binary')


def limit_cohort(cohort, limit: Optional[int]):
    """Shrink every split proportionally to about `limit` subjects, two per split at least"""
    if limit is None or limit >= cohort.n_subjects:
        return cohort
    share = limit / cohort.n_subjects
    n_probe = max(2, round(cohort.n_probe_train * share))
    n_test = max(2, round(cohort.n_test * share))
    n_pretrain = max(2, limit - n_probe - n_test)
    return replace(cohort, n_pretrain=n_pretrain, n_probe_train=n_probe, n_test=n_test)


@dataclass
class SubjectFeatures:
    """Frozen embeddings and labels of one subject, restricted to its wake-truncated window"""
    record_id: str
    split: str
    profile: DemographicProfile
    stages: np.ndarray
    sdb: np.ndarray
    survival_time: float
    event: int
    ahi: float
    micro_epochs: np.ndarray
    contextual: np.ndarray
    seconds: np.ndarray
    bandpower: np.ndarray
    subject: np.ndarray
    subject_untrained: np.ndarray

    @property
    def micro_subject(self) -> np.ndarray:
        return self.micro_epochs.mean(axis=0)


class PSGRunner:
    def __init__(self, cfg: RunConfig, force: bool = False, limit_subjects: Optional[int] = None):
        """
        Args:
            cfg: validated run configuration
            force: overwrite an existing cohort and restart finished training stages
            limit_subjects: shrink the cohort to about this many subjects, split proportions kept
        """
        limited = limit_cohort(cfg.cohort, limit_subjects)
        if limited is not cfg.cohort:
            cfg = replace(cfg, cohort=limited)
        self.cfg = cfg
        self.force = force
        self.limit_subjects = limit_subjects
        self.out = Path(cfg.paths.out)
        self.config_hash = cfg.config_hash
        self.out.mkdir(parents=True, exist_ok=True)
        logger.info(f"PSGRunner ready: out={self.out}, config hash {self.config_hash}")

    # ------------------------------------------------------------------ paths

    @property
    def cohort_dir(self) -> Path:
        return self.cfg.paths.cohort_dir

    @property
    def micro_checkpoint(self) -> Path:
        return self.out / 'checkpoints' / 'micro.ckpt'

    @property
    def macro_checkpoint(self) -> Path:
        return self.out / 'checkpoints' / 'macro.ckpt'

    @property
    def metrics_dir(self) -> Path:
        return self.out / 'metrics'

    # ------------------------------------------------------------------ synth

    def cohort_config(self):
        """Cohort settings with the subject limit already applied; these are the hashed settings"""
        return self.cfg.cohort

    def synth(self) -> Path:
        out_dir = self.cohort_dir
        if out_dir.exists() and any(out_dir.iterdir()):
            if not self.force:
                raise DataError(f"Cohort directory {out_dir} is not empty; pass --force to overwrite")
            logger.warning(f"Removing existing cohort at {out_dir}")
            shutil.rmtree(out_dir)
        generate_cohort(self.cohort_config(), self.cfg.seed, out_dir, self.config_hash)
        return out_dir

    # ---------------------------------------------------------------- records

    def manifest(self) -> pd.DataFrame:
        return read_manifest(self.cohort_dir / 'manifest.csv')

    def split_ids(self, manifest: pd.DataFrame, split: str) -> List[str]:
        return manifest.loc[manifest['split'] == split, 'record_id'].tolist()

    def load_standard(self, record_id: str, kinds: Sequence[ModalityKind]):
        record = read_record(self.cohort_dir / 'records' / record_id, self.cfg.cohort.stats)
        record.signals = {k: s for k, s in record.signals.items() if k in kinds}
        missing = [k.value for k in kinds if k not in record.signals]
        if missing:
            raise DataError(f"Record {record_id} lacks modalities {missing}")
        return standardize(record, self.cfg.pipeline)

    # ------------------------------------------------------------ checkpoints

    def _save(self, path: Path, prefix: str, model, optimizer: nc.AdamW, epoch: int, step: int,
              extra: Optional[Dict] = None):
        tensors = model.state_dict(f'{prefix}.')
        tensors.update(optimizer.state_tensors())
        metadata = {'config_hash': self.config_hash, 'stage': prefix, 'epoch': epoch, 'step': step,
                    **(extra or {})}
        nc.save_checkpoint(path, tensors, metadata)
        logger.info(f"Saved {prefix} checkpoint at epoch {epoch}, step {step}")

    def _resume(self, path: Path, prefix: str, model, optimizer: nc.AdamW) -> Optional[Dict]:
        if self.force or not path.exists():
            return None
        tensors, metadata = nc.load_checkpoint(path)
        if metadata.get('config_hash') != self.config_hash:
            raise DataError(f"Checkpoint {path} was written under config {metadata.get('config_hash')}, "
                            f"current config is {self.config_hash}; pass --force to restart")
        model.load_state_dict(tensors, f'{prefix}.')
        optimizer.load_state_tensors(tensors, metadata['step'])
        logger.info(f"Resuming {prefix} from epoch {metadata['epoch']}, step {metadata['step']}")
        return metadata

    def _loss_rows(self, path: Path, resumed: Optional[Dict]) -> List[Dict]:
        if resumed is None or not path.exists():
            return []
        frame = pd.read_csv(path, dtype={'config_hash': str}, float_precision='round_trip')
        return frame[frame['step'] < resumed['step']].to_dict('records')

    def load_micro(self) -> MicroEncoder:
        if not self.micro_checkpoint.exists():
            raise DataError(f"Micro checkpoint {self.micro_checkpoint} not found; run the micro stage first")
        tensors, _ = nc.load_checkpoint(self.micro_checkpoint)
        encoder = MicroEncoder(self.cfg.micro, np.random.default_rng(self.cfg.seed))
        encoder.load_state_dict(tensors, 'micro.')
        encoder.freeze()
        return encoder

    def load_macro(self, untrained: bool = False) -> MacroEncoder:
        """Trained macro encoder, or its seed-identical initialization with ``untrained``"""
        if not self.macro_checkpoint.exists():
            raise DataError(f"Macro checkpoint {self.macro_checkpoint} not found; run the macro stage first")
        tensors, metadata = nc.load_checkpoint(self.macro_checkpoint)
        encoder = MacroEncoder(self.cfg.macro, int(metadata['input_dim']), np.random.default_rng(self.cfg.seed + 1))
        if not untrained:
            encoder.load_state_dict(tensors, 'macro.')
        encoder.freeze()
        return encoder

    # ---------------------------------------------------------------- pretrain

    def pretrain_micro(self) -> Path:
        cfg, optim_cfg = self.cfg, self.cfg.optim
        encoder = MicroEncoder(cfg.micro, np.random.default_rng(cfg.seed))
        optimizer = nc.AdamW(encoder.named_parameters(), lr=optim_cfg.micro_lr, betas=tuple(optim_cfg.betas),
                             weight_decay=optim_cfg.weight_decay)
        resumed = self._resume(self.micro_checkpoint, 'micro', encoder, optimizer)
        loss_csv = self.out / 'micro_loss.csv'
        rows = self._loss_rows(loss_csv, resumed)
        start_epoch = resumed['epoch'] if resumed else 0
        step = resumed['step'] if resumed else 0
        if start_epoch >= optim_cfg.micro_epochs:
            logger.info("Micro pretraining already complete")
            return self.micro_checkpoint

        ids = self.split_ids(self.manifest(), 'pretrain')
        if not ids:
            raise DataError("No pretraining records in the cohort manifest")
        chunk = optim_cfg.micro_batch
        steps_per_epoch = math.ceil(len(ids) / chunk) * optim_cfg.windows_per_record
        total_steps = steps_per_epoch * optim_cfg.micro_epochs

        for epoch in range(start_epoch, optim_cfg.micro_epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(ids))
            progress = tqdm(range(0, len(ids), chunk), desc=f"Micro epoch {epoch + 1}/{optim_cfg.micro_epochs}")
            for group_index, offset in enumerate(progress):
                rng = np.random.default_rng([cfg.seed, epoch, group_index])
                grids = [patchify(self.load_standard(ids[i], cfg.micro.kinds)) for i in order[offset:offset + chunk]]
                windows = sample_windows(grids, len(grids) * optim_cfg.windows_per_record, cfg.micro, rng)
                shuffle = rng.permutation(len(grids) * optim_cfg.windows_per_record)
                for batch_start in range(0, len(shuffle), len(grids)):
                    picked = shuffle[batch_start:batch_start + len(grids)]
                    patches = {k: v[picked] for k, v in windows.items()}
                    plans = [build_mask_plan(cfg.micro.window_patches, cfg.micro.kinds, rng, cfg.micro)
                             for _ in picked]
                    lr = nc.cosine_lr(step, total_steps, optim_cfg.micro_lr, optim_cfg.lr_min, optim_cfg.warmup_steps)
                    optimizer.zero_grad()
                    loss, parts = encoder.loss(patches, stack_masks(plans))
                    loss.backward()
                    optimizer.step(max(lr, optim_cfg.lr_min))
                    rows.append({'step': step, 'epoch': epoch, 'lr': lr, **parts, 'config_hash': self.config_hash})
                    progress.set_postfix(loss=f"{parts['total']:.4f}")
                    logger.debug(f"micro step {step}: " + ", ".join(f"{k}={v:.4f}" for k, v in parts.items()))
                    step += 1
            pd.DataFrame(rows, columns=LOSS_COLUMNS).to_csv(loss_csv, index=False)
            self._save(self.micro_checkpoint, 'micro', encoder, optimizer, epoch + 1, step)
        logger.info(f"Micro pretraining done after {step} steps; final loss {rows[-1]['total']:.4f}")
        return self.micro_checkpoint

    def _embed_subjects(self, micro: MicroEncoder, ids: Sequence[str]) -> Dict[str, np.ndarray]:
        embeddings = {}
        for record_id in tqdm(ids, desc="Micro embeddings"):
            embeddings[record_id] = encode_record(self.load_standard(record_id, self.cfg.micro.kinds), micro).epochs
        return embeddings

    def pretrain_macro(self) -> Path:
        cfg, optim_cfg = self.cfg, self.cfg.optim
        micro = self.load_micro()
        manifest = self.manifest()
        pretrain = manifest[manifest['split'] == 'pretrain']
        profiles = {}
        for _, row in pretrain.iterrows():
            profile = profile_from_row(row, cfg.cohort.stats)
            if profile is None:
                logger.warning(f"Excluding {row['record_id']} from macro pretraining: missing demographics")
                continue
            profiles[row['record_id']] = profile
        pretrain = pretrain[pretrain['record_id'].isin(list(profiles))]
        if len(pretrain) < 2:
            raise DataError("Macro pretraining needs at least two subjects with demographics")

        sequences = self._embed_subjects(micro, pretrain['record_id'].tolist())
        input_dim = next(iter(sequences.values())).shape[1]
        encoder = MacroEncoder(cfg.macro, input_dim, np.random.default_rng(cfg.seed + 1))
        optimizer = nc.AdamW(encoder.named_parameters(), lr=optim_cfg.macro_lr, betas=tuple(optim_cfg.betas),
                             weight_decay=optim_cfg.weight_decay)
        resumed = self._resume(self.macro_checkpoint, 'macro', encoder, optimizer)
        loss_csv = self.out / 'macro_loss.csv'
        rows = self._loss_rows(loss_csv, resumed)
        start_epoch = resumed['epoch'] if resumed else 0
        step = resumed['step'] if resumed else 0
        if start_epoch >= optim_cfg.macro_epochs:
            logger.info("Macro pretraining already complete")
            return self.macro_checkpoint

        batch_size = min(cfg.macro.batch_size, len(pretrain))
        batches_per_epoch = len(stratified_batches(pretrain, batch_size, np.random.default_rng([cfg.seed, 1, 0])))
        total_steps = batches_per_epoch * optim_cfg.macro_epochs
        for epoch in range(start_epoch, optim_cfg.macro_epochs):
            batches = stratified_batches(pretrain, batch_size, np.random.default_rng([cfg.seed, 1, epoch]))
            for batch in tqdm(batches, desc=f"Macro epoch {epoch + 1}/{optim_cfg.macro_epochs}"):
                lr = nc.cosine_lr(step, total_steps, optim_cfg.macro_lr, optim_cfg.lr_min, optim_cfg.warmup_steps)
                optimizer.zero_grad()
                loss, skipped = macro_batch_loss(encoder, [sequences[r] for r in batch], [profiles[r] for r in batch])
                loss.backward()
                optimizer.step(max(lr, optim_cfg.lr_min))
                rows.append({'step': step, 'epoch': epoch, 'lr': lr, 'dgcl': loss.item(),
                             'skipped_intervals': skipped, 'config_hash': self.config_hash})
                logger.debug(f"macro step {step}: dgcl={loss.item():.4f}, skipped={skipped}")
                step += 1
            pd.DataFrame(rows, columns=MACRO_LOSS_COLUMNS).to_csv(loss_csv, index=False)
            self._save(self.macro_checkpoint, 'macro', encoder, optimizer, epoch + 1, step,
                       {'input_dim': input_dim})
        logger.info(f"Macro pretraining done after {step} steps")
        return self.macro_checkpoint

    # ------------------------------------------------------------------ probes

    def check_splits(self, manifest: pd.DataFrame):
        train, test = set(self.split_ids(manifest, 'probe_train')), set(self.split_ids(manifest, 'test'))
        ids = manifest['record_id']
        leaked = sorted((train & test) | set(ids[ids.duplicated()]))
        if leaked:
            raise DataError(f"Split leakage: records {leaked} appear in more than one split")
        if not train or not test:
            raise DataError("Probing needs non-empty probe_train and test splits")

    def collect_features(self, manifest: pd.DataFrame, split: str) -> List[SubjectFeatures]:
        micro, macro, untrained = self.load_micro(), self.load_macro(), self.load_macro(untrained=True)
        kinds = list(dict.fromkeys(self.cfg.micro.kinds + [k for k in (ModalityKind.EEG, ModalityKind.EOG,
                                                                      ModalityKind.EMG)
                                                          if k.value in self.cfg.cohort.modalities]))
        subjects = []
        rows = manifest[manifest['split'] == split]
        for _, row in tqdm(list(rows.iterrows()), desc=f"Embedding {split}"):
            profile = profile_from_row(row, self.cfg.cohort.stats)
            if profile is None:
                logger.warning(f"Skipping {row['record_id']}: missing demographics")
                continue
            record = self.load_standard(row['record_id'], kinds)
            micro_record = replace(record, signals={k: record.signals[k] for k in self.cfg.micro.kinds})
            embedded = encode_record(micro_record, micro)
            self.write_epoch_embeddings(row['record_id'], embedded.epochs)
            with nc.no_grad():
                output = macro.forward(embedded.epochs)
                before = untrained.forward(embedded.epochs)
            n = output.contextual.shape[0]
            window = wake_truncate(record.stages[:n])
            span = slice(window.start, window.end)
            subjects.append(SubjectFeatures(
                record_id=row['record_id'], split=split, profile=profile,
                stages=record.stages[:n][span], sdb=record.sdb[window.start * 30:window.end * 30],
                survival_time=float(row['survival_time']), event=int(row['event']), ahi=float(row['ahi']),
                micro_epochs=embedded.epochs[:n][span], contextual=output.contextual.data[span],
                seconds=embedded.seconds[window.start * 30:window.end * 30].astype(np.float32),
                bandpower=bandpower_features(record)[:n][span],
                subject=subject_embed(output.endpoints), subject_untrained=subject_embed(before.endpoints),
            ))
        if not subjects:
            raise DataError(f"No usable subjects in split {split}")
        return subjects

    def _task_data(self, subjects: List[SubjectFeatures], task: str, level: str = 'macro'):
        """(features, labels, events) for one task; ``level`` picks macro or micro-only embeddings"""
        if task == 'stage5':
            source = (lambda s: s.contextual) if level == 'macro' else (
                (lambda s: s.micro_epochs) if level == 'micro' else (lambda s: s.bandpower))
            return np.concatenate([source(s) for s in subjects]), np.concatenate([s.stages for s in subjects]), None
        if task == 'sdb3':
            return (np.concatenate([s.seconds for s in subjects]).astype(np.float64),
                    np.concatenate([s.sdb for s in subjects]), None)
        features = np.stack([s.subject if level == 'macro' else s.micro_subject for s in subjects])
        if task == 'survival':
            return features, np.array([s.survival_time for s in subjects]), np.array([s.event for s in subjects])
        if task == 'binary':
            return features, np.array([int(s.profile.sex == 'male') for s in subjects]), None
        if task == 'regression':
            return features, np.array([s.profile.age for s in subjects]), None
        if task == 'ahi':
            return features, np.array([s.ahi for s in subjects]), None
        raise ConfigError(f"Unknown probe task {task}")

    def run_probe(self, task: str, train: List[SubjectFeatures], test: List[SubjectFeatures],
                  level: str = 'macro') -> Dict:
        probe_task = 'regression' if task == 'ahi' else task
        x_train, y_train, e_train = self._task_data(train, task, level)
        x_test, y_test, e_test = self._task_data(test, task, level)
        seed_index = list(PROBE_TASKS).index(probe_task)
        result = probe_train(x_train, y_train, probe_task, self.cfg.probe,
                             np.random.default_rng([self.cfg.seed, 2, seed_index]), events=e_train)
        return evaluate_probe(result.head, x_test, y_test, e_test)

    def write_metrics(self, task: str, result: Dict):
        self.metrics_dir.mkdir(parents=True, exist_ok=True)
        record = metrics_record(task, 'test', result, self.config_hash)
        with open(self.metrics_dir / f'metrics_{task}.json', 'w') as f:
            json.dump(record, f, indent=2, sort_keys=True)
        if 'confusion' in result:
            frame = confusion_frame(result['confusion'], result['class_names'])
            frame['config_hash'] = self.config_hash
            frame.to_csv(self.metrics_dir / f'confusion_{task}.csv')
        logger.info(f"{task}: " + ", ".join(f"{k}={v:.4f}" for k, v in record.items()
                                             if isinstance(v, float)))
        return record

    def write_epoch_embeddings(self, record_id: str, epochs: np.ndarray) -> Path:
        """One row per 30-s epoch of the whole night, micro encoder embedding columns e0..eD-1"""
        frame = pd.DataFrame(epochs, columns=[f'e{i}' for i in range(epochs.shape[1])])
        frame.insert(0, 'epoch_index', np.arange(len(epochs)))
        frame['config_hash'] = self.config_hash
        path = self.out / 'embeddings' / 'epochs' / f'{record_id}.csv'
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format='%.10g')
        logger.debug(f"Wrote {len(frame)} epoch embeddings to {path}")
        return path

    def write_embeddings(self, subjects: List[SubjectFeatures]):
        rows = []
        for s in subjects:
            rows.append({'record_id': s.record_id, 'split': s.split, 'age': s.profile.age, 'sex': s.profile.sex,
                         'bmi': s.profile.bmi, **{f'e{i}': v for i, v in enumerate(s.subject)},
                         'config_hash': self.config_hash})
        path = self.out / 'embeddings' / 'subject_embeddings.csv'
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows).to_csv(path, index=False, float_format='%.10g')
        logger.info(f"Wrote {len(rows)} subject embeddings to {path}")

    def probe_eval(self, tasks: Optional[Sequence[str]] = None, compare: bool = True) -> Dict:
        """Probe the requested tasks on frozen embeddings; ``compare`` adds the micro-vs-macro report"""
        tasks = list(tasks or PROBE_TASKS)
        manifest = self.manifest()
        self.check_splits(manifest)
        train = self.collect_features(manifest, 'probe_train')
        test = self.collect_features(manifest, 'test')
        self.write_embeddings(train + test)

        records = {task: self.write_metrics(task, self.run_probe(task, train, test)) for task in tasks}
        if compare:
            records['comparison'] = self.compare(train, test)
        return records

    def compare(self, train: List[SubjectFeatures], test: List[SubjectFeatures]) -> Dict:
        """Micro-only vs macro embeddings on demographic and staging probes, few-shot curve and clustering"""
        levels = {}
        for level in ('micro', 'macro'):
            levels[level] = {
                'sex_accuracy': self.run_probe('binary', train, test, level)['report'].accuracy,
                'age_mae': self.run_probe('regression', train, test, level)['mae'],
                'ahi_mae': self.run_probe('ahi', train, test, level)['mae'],
                'stage_accuracy': self.run_probe('stage5', train, test, level)['report'].accuracy,
            }
        bandpower = self.run_probe('stage5', train, test, 'bandpower')['report']
        test_stages = np.concatenate([s.stages for s in test])
        majority = float(np.mean(test_stages == np.bincount(test_stages).argmax()))

        everyone = train + test
        bounds = tercile_bounds(self.cfg.cohort)
        groups = ['{}-{}'.format(*demographic_cell(s.profile, bounds)[:2]) for s in everyone]
        gap_after = group_cosine_gap(np.stack([s.subject for s in everyone]), groups)
        gap_before = group_cosine_gap(np.stack([s.subject_untrained for s in everyone]), groups)

        fewshot = few_shot_curve([(s.contextual, s.stages) for s in train], *self._task_data(test, 'stage5')[:2],
                                 cfg=self.cfg.probe, rng=np.random.default_rng([self.cfg.seed, 3]))
        fewshot['config_hash'] = self.config_hash
        fewshot.to_csv(self.metrics_dir / 'fewshot.csv', index=False)

        micro_cfg, macro_cfg = self.cfg.micro, self.cfg.macro
        dgcl_terms = [name for name, on in (('age', macro_cfg.use_age), ('bmi', macro_cfg.use_bmi),
                                            ('sex', macro_cfg.use_sex)) if on]
        comparison = {'micro': levels['micro'], 'macro': levels['macro'],
                      'bandpower_stage_accuracy': bandpower.accuracy, 'majority_stage_accuracy': majority,
                      'group_cosine_gap': {'before': gap_before, 'after': gap_after},
                      'components': {'shared': micro_cfg.use_shared, 'contrastive': micro_cfg.use_contrastive,
                                     'koleo': micro_cfg.use_koleo, 'dgcl_terms': dgcl_terms},
                      'config_hash': self.config_hash}
        with open(self.metrics_dir / 'comparison.json', 'w') as f:
            json.dump(comparison, f, indent=2, sort_keys=True)
        logger.info(f"Group cosine gap {gap_before:.4f} -> {gap_after:.4f}; "
                    f"stage accuracy micro {levels['micro']['stage_accuracy']:.3f}, "
                    f"macro {levels['macro']['stage_accuracy']:.3f}, bandpower {bandpower.accuracy:.3f}")
        return comparison

    # -------------------------------------------------------------- commands

    def run(self, command: str):
        stage = self.cfg.stage
        if command == 'synth':
            return self.synth()
        if command == 'pretrain':
            if stage not in ('all', 'micro', 'macro'):
                raise ConfigError(f"pretrain runs stage micro or macro, got {stage}")
            if stage in ('all', 'micro'):
                self.pretrain_micro()
            if stage in ('all', 'macro'):
                self.pretrain_macro()
            return self.macro_checkpoint if stage != 'micro' else self.micro_checkpoint
        if command == 'probe':
            if stage.startswith('probe:'):
                return self.probe_eval([stage.split(':', 1)[1]], compare=False)
            return self.probe_eval(compare=False)
        if command == 'eval':
            return self.probe_eval()
        if command == 'all':
            self.synth()
            self.pretrain_micro()
            self.pretrain_macro()
            return self.probe_eval()
        raise ConfigError(f"Unknown command {command}")


def configure_logging(out: Optional[Path] = None):
    handlers = [logging.StreamHandler()]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(out / 'psg_runner.log'))
    logging.basicConfig(
        level=os.getenv(f'{ENV_PREFIX}LOG_LEVEL', 'INFO'),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Desk-scale sleep foundation model pipeline')
    parser.add_argument('command', choices=['synth', 'pretrain', 'probe', 'eval', 'all'])
    parser.add_argument('--config', help='JSON config merged over the defaults')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--out', help='output directory')
    parser.add_argument('--stage', help="micro | macro | probe:<task> | eval")
    parser.add_argument('--force', action='store_true', help='overwrite the cohort and restart training')
    parser.add_argument('--limit-subjects', type=int, dest='limit_subjects')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Exit codes: 0 success, 2 configuration error, 3 data error"""
    args = build_parser().parse_args(argv)
    load_dotenv()
    overrides: Dict = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.out:
        overrides['paths'] = {'out': args.out}
    if args.stage:
        overrides['stage'] = args.stage

    try:
        cfg = load_run_config(args.config, overrides=overrides)
    except ConfigError as e:
        configure_logging()
        logger.error(f"Configuration error: {e}")
        return 2

    configure_logging(Path(cfg.paths.out))
    try:
        runner = PSGRunner(cfg, force=args.force, limit_subjects=args.limit_subjects)
        runner.run(args.command)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2
    except (DataError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return 3
    except PSGError as e:
        logger.error(f"Run failed: {e}")
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
