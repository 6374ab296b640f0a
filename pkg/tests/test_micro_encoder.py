from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import numerics_core as nc
from errors import ConfigError, DataError
from micro_encoder import (MicroConfig, MicroEncoder, build_mask_plan, contrastive_loss, encode_record,
                           koleo_loss, merged_length, micro_total_loss, recon_loss, sample_windows, stack_masks,
                           timeslot_matrix, upsample_matrix)
from numerics_core import NDValue
from record_store import ModalityKind
from signal_pipeline import concat_patches, patchify, smooth_target

EEG, RESP, EOG = ModalityKind.EEG, ModalityKind.RESP, ModalityKind.EOG


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_batch(rng, cfg, batch=2):
    return {k: rng.normal(size=(batch, 1, cfg.window_patches, 50)) for k in cfg.kinds}


def batch_masks(rng, cfg, batch=2):
    return stack_masks([build_mask_plan(cfg.window_patches, cfg.kinds, rng, cfg) for _ in range(batch)])


def test_high_frequency_masks_cover_half_of_every_period(rng):
    cfg = MicroConfig.tiny(['EEG', 'EOG'])
    plan = build_mask_plan(120, cfg.kinds, rng, cfg)
    assert plan.period == 10
    for kind in cfg.kinds:
        per_period = np.roll(plan.masks[kind], -plan.offset).reshape(-1, 10)
        assert (per_period.sum(axis=1) == 5).all()
        assert plan.masked_fraction(kind) == 0.5
        assert plan.run_lengths[kind] == 1


def test_low_frequency_masks_are_runs_on_the_shared_grid(rng):
    cfg = MicroConfig.tiny()
    for _ in range(10):
        plan = build_mask_plan(125, cfg.kinds, rng, cfg)
        assert plan.period == 40
        assert plan.n_patches == 120
        assert 0 <= plan.offset < cfg.merge_stride
        expected = ((np.arange(120) - plan.offset) % 8) < 4
        np.testing.assert_array_equal(plan.masks[RESP], expected)
        assert plan.masked_fraction(EEG) == 0.5


def test_every_merge_window_sees_half_of_each_high_frequency_modality(rng):
    cfg = MicroConfig.tiny(['EEG', 'EOG', 'RESP'])
    for _ in range(20):
        plan = build_mask_plan(cfg.window_patches, cfg.kinds, rng, cfg)
        for kind in (EEG, EOG):
            cover = upsample_matrix(plan.n_patches, cfg) > 0
            per_window = plan.masks[kind].astype(int) @ cover
            assert (per_window == cfg.merge_kernel // 2).all()


def test_mask_plan_needs_one_full_period(rng):
    cfg = MicroConfig.tiny()
    with pytest.raises(DataError, match="period"):
        build_mask_plan(30, cfg.kinds, rng, cfg)


@settings(max_examples=40, deadline=None)
@given(st.integers(40, 400), st.integers(0, 2**31 - 1))
def test_mask_ratio_holds_for_any_length(n_patches, seed):
    cfg = MicroConfig.tiny()
    plan = build_mask_plan(n_patches, cfg.kinds, np.random.default_rng(seed), cfg)
    assert plan.n_patches % plan.period == 0
    assert n_patches - plan.period < plan.n_patches <= n_patches
    for kind in cfg.kinds:
        assert plan.masked_fraction(kind) == pytest.approx(cfg.mask_ratio)


@pytest.mark.parametrize('changes', [
    {'mask_ratio': 0.6},
    {'modalities': ['EEG', 'EEG']},
    {'modalities': ['EEG', 'PPG']},
    {'window_epochs': 1, 'modalities': ['EEG', 'RESP']},
    {'heads': 3},
    {'top_k': 5},
    {'merge_kernel': 5},
    {'merge_stride': 3},
    {'use_shared': False},
])
def test_invalid_micro_config(changes):
    with pytest.raises(ConfigError):
        replace(MicroConfig.tiny(), **changes).validate()


def test_upsample_and_timeslot_weights():
    cfg = MicroConfig.tiny()
    assert merged_length(120, cfg) == 23
    up = upsample_matrix(120, cfg)
    assert up.shape == (120, 23)
    np.testing.assert_allclose(up.sum(axis=1), 1.0)
    pool = timeslot_matrix(23, cfg)
    assert pool.shape == (2, 23)
    np.testing.assert_allclose(pool.sum(axis=1), 1.0)
    assert (pool[0] > 0).sum() == 11
    assert (pool[1] > 0).sum() == 12


def test_forward_shapes_and_routing(rng, tiny_micro):
    encoder = MicroEncoder(tiny_micro, rng)
    patches = random_batch(rng, tiny_micro)
    out = encoder.forward(patches, batch_masks(rng, tiny_micro))
    for kind in tiny_micro.kinds:
        assert out.private[kind].shape == (2, 23, 48)
        assert out.fused[kind].shape == (2, 23, 48)
        assert out.upsampled[kind].shape == (2, 120, 16)
        assert out.recon[kind].shape == (2, 1, 60, 50)
        assert out.pooled_shared[kind].shape == (2, 2, 48)
    assert len(out.routing) == tiny_micro.shared_depth
    np.testing.assert_array_equal((out.routing[0] > 0).sum(axis=1), tiny_micro.top_k)


def test_forward_rejects_missing_modality(rng, tiny_micro):
    encoder = MicroEncoder(tiny_micro, rng)
    patches = random_batch(rng, tiny_micro)
    del patches[RESP]
    with pytest.raises(DataError, match="missing modalities"):
        encoder.forward(patches)


def test_masked_patch_contents_do_not_reach_outputs(rng, tiny_micro):
    encoder = MicroEncoder(tiny_micro, rng)
    patches = random_batch(rng, tiny_micro)
    masks = batch_masks(rng, tiny_micro)
    base = encoder.forward(patches, masks)
    scrambled = {k: v.copy() for k, v in patches.items()}
    scrambled[EEG][masks[EEG][:, None, :, None].repeat(50, axis=3)] = 99.0
    changed = encoder.forward(scrambled, masks)
    for kind in tiny_micro.kinds:
        np.testing.assert_allclose(changed.fused[kind].data, base.fused[kind].data, atol=1e-10)
        np.testing.assert_allclose(changed.recon[kind].data, base.recon[kind].data, atol=1e-10)


def test_recon_loss_is_zero_for_the_smoothed_target(rng):
    x = rng.normal(size=(2, 1, 40, 50))
    index = np.stack([np.arange(0, 40, 2), np.arange(1, 40, 2)])
    target = smooth_target(concat_patches(x)).reshape(x.shape)
    prediction = np.stack([target[b][:, index[b]] for b in range(2)])
    loss = recon_loss({EEG: x}, {EEG: NDValue(prediction)}, {EEG: index})
    assert loss.item() == pytest.approx(0.0, abs=1e-20)
    shifted = recon_loss({EEG: x}, {EEG: NDValue(prediction + 0.5)}, {EEG: index})
    assert shifted.item() == pytest.approx(0.25)


def test_contrastive_loss_matches_direct_computation(rng):
    n, d, tau = 5, 6, 0.1
    shared = {k: rng.normal(size=(n, d)) for k in (EEG, EOG, RESP)}
    private = {k: rng.normal(size=(n, d)) for k in (EEG, EOG, RESP)}
    loss = contrastive_loss({k: NDValue(v) for k, v in shared.items()},
                            {k: NDValue(v) for k, v in private.items()}, tau).item()

    expected = []
    for kind in shared:
        target = unit(np.mean([unit(shared[k]) for k in shared if k != kind], axis=0))
        anchor = unit(shared[kind])
        for t in range(n):
            logits = [anchor[t] @ target[s] / tau for s in range(n)]
            logits.append(anchor[t] @ unit(private[kind])[t] / tau)
            expected.append(np.log(np.sum(np.exp(logits))) - logits[t])
    assert loss == pytest.approx(np.mean(expected), rel=1e-10)


def test_contrastive_loss_requires_two_modalities_and_slots(rng):
    one = {EEG: NDValue(rng.normal(size=(4, 3)))}
    with pytest.raises(DataError):
        contrastive_loss(one, one, 0.1)
    single_slot = {EEG: NDValue(np.ones((1, 3))), RESP: NDValue(np.ones((1, 3)))}
    with pytest.raises(DataError):
        contrastive_loss(single_slot, single_slot, 0.1)


def test_koleo_matches_direct_computation_and_gradients(rng):
    z = rng.normal(size=(6, 4))
    points = unit(z)
    dist = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(dist, np.inf)
    assert koleo_loss(NDValue(z)).item() == pytest.approx(-np.mean(np.log(dist.min(axis=1))))
    report = nc.grad_check(lambda inputs: koleo_loss(inputs[0]), [NDValue(z)], abs_floor=1e-8)
    assert report.max_relative_error < 1e-5


def test_koleo_rejects_single_point():
    with pytest.raises(DataError):
        koleo_loss(NDValue(np.ones((1, 3))))


def test_contrastive_gradients(rng):
    shared = [NDValue(rng.normal(size=(4, 5))) for _ in range(2)]
    private = [NDValue(rng.normal(size=(4, 5))) for _ in range(2)]

    def fn(inputs):
        return contrastive_loss({EEG: inputs[0], RESP: inputs[1]}, {EEG: inputs[2], RESP: inputs[3]}, 0.2)

    assert nc.grad_check(fn, shared + private, abs_floor=1e-8).max_relative_error < 1e-5


def test_total_loss_weights():
    cfg = MicroConfig(cl_weight=0.1, koleo_weight=0.01)
    assert micro_total_loss(2.0, 3.0, -4.0, cfg) == pytest.approx(2.0 + 0.3 - 0.04)


def test_encoder_loss_gradients(rng, tiny_micro):
    encoder = MicroEncoder(tiny_micro, rng)
    patches = random_batch(rng, tiny_micro)
    masks = batch_masks(rng, tiny_micro)
    total, parts = encoder.loss(patches, masks)
    assert set(parts) == {'total', 'recon', 'cl', 'koleo'}
    total.backward()
    assert encoder.private['EEG'].mask_token.grad is not None
    assert encoder.modality_embedding['RESP'].grad is not None

    checked = [encoder.private['EEG'].mask_token, encoder.upsample.weight, encoder.decoder_out['RESP'].bias]
    report = nc.grad_check(lambda _: encoder.loss(patches, masks)[0], checked, max_entries=8, abs_floor=1e-6)
    assert report.max_relative_error < 1e-4


def test_encode_record_shapes_and_determinism(rng, tiny_micro, standard_record):
    encoder = MicroEncoder(tiny_micro, rng)
    first = encode_record(standard_record, encoder)
    second = encode_record(standard_record, encoder)
    n = standard_record.n_epochs
    assert first.epochs.shape == (n, 2 * tiny_micro.merge_dim)
    assert first.seconds.shape == (n * 30, 2 * tiny_micro.up_dim)
    np.testing.assert_array_equal(first.epochs, second.epochs)
    assert np.all(np.isfinite(first.epochs))
    assert not np.any(np.all(first.epochs == 0, axis=1))


def test_sample_windows_align_to_epochs(rng, tiny_micro, standard_record):
    grid = patchify(standard_record)
    batch = sample_windows([grid], 3, tiny_micro, rng)
    assert batch[EEG].shape == (3, 1, tiny_micro.window_patches, 50)
    starts = []
    for window in batch[EEG]:
        match = [s for s in range(0, grid[EEG].shape[1] - 119, 60)
                 if np.array_equal(grid[EEG][:, s:s + 120], window)]
        starts.append(match)
    assert all(starts)


def test_visible_patches_do_not_enter_the_reconstruction_loss(rng):
    x = rng.normal(size=(2, 1, 40, 50))
    index = np.stack([np.arange(0, 40, 2), np.arange(1, 40, 2)])
    prediction = NDValue(rng.normal(size=(2, 1, 20, 50)))
    base = recon_loss({EEG: x}, {EEG: prediction}, {EEG: index}).item()
    edited = x.copy()
    for b in range(2):
        visible = np.setdiff1d(np.arange(40), index[b])
        # the 11-point smoother reaches 5 samples past a patch edge
        edited[b, :, visible, 8:42] = 1e3
    assert recon_loss({EEG: edited}, {EEG: prediction}, {EEG: index}).item() == pytest.approx(base, rel=1e-12)


def test_outputs_do_not_depend_on_modality_order(rng, tiny_micro):
    encoder = MicroEncoder(tiny_micro, rng)
    patches = random_batch(rng, tiny_micro)
    masks = batch_masks(rng, tiny_micro)
    forward = encoder.forward(patches, masks)
    backward = encoder.forward(dict(reversed(list(patches.items()))), dict(reversed(list(masks.items()))))
    for kind in tiny_micro.kinds:
        np.testing.assert_array_equal(forward.fused[kind].data, backward.fused[kind].data)
        np.testing.assert_array_equal(forward.recon[kind].data, backward.recon[kind].data)


def test_total_loss_honours_the_regularizer_switches():
    assert micro_total_loss(2.0, 3.0, -4.0, MicroConfig(use_contrastive=False)) == pytest.approx(2.0 - 0.04)
    assert micro_total_loss(2.0, 3.0, -4.0, MicroConfig(use_koleo=False)) == pytest.approx(2.0 + 0.3)
    assert micro_total_loss(2.0, 3.0, -4.0, MicroConfig(use_contrastive=False, use_koleo=False)) == 2.0


def test_encoder_without_shared_experts(rng, tiny_micro):
    cfg = replace(tiny_micro, use_shared=False, use_contrastive=False)
    encoder = MicroEncoder(cfg, rng)
    names = [name for name, _ in encoder.named_parameters()]
    assert not any(name.startswith(('shared_blocks', 'fusion', 'modality_embedding')) for name in names)
    patches = random_batch(rng, cfg)
    masks = batch_masks(rng, cfg)
    out = encoder.forward(patches, masks)
    assert out.routing == []
    for kind in cfg.kinds:
        np.testing.assert_array_equal(out.fused[kind].data, out.private[kind].data)
    total, parts = encoder.loss(patches, masks)
    assert parts['cl'] == 0.0
    assert parts['total'] == pytest.approx(parts['recon'] + cfg.koleo_weight * parts['koleo'])
    total.backward()
    assert encoder.private['EEG'].mask_token.grad is not None


def test_disabled_koleo_leaves_the_total(rng, tiny_micro):
    cfg = replace(tiny_micro, use_koleo=False)
    encoder = MicroEncoder(cfg, rng)
    _, parts = encoder.loss(random_batch(rng, cfg), batch_masks(rng, cfg))
    assert parts['koleo'] == 0.0
    assert parts['total'] == pytest.approx(parts['recon'] + cfg.cl_weight * parts['cl'])
