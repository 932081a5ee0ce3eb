"""Training steps, phase orchestration, determinism, checkpoints."""

import numpy as np
import pytest

from pseudowhiten import numerics as nm, training as tr
from pseudowhiten.augment import AugmentationSpec
from pseudowhiten.nets import ArchConfig
from pseudowhiten.numerics import Tensor
from pseudowhiten.training import TrainConfig

ARCH = ArchConfig(input_dim=10, encoder_hidden=(16,), repr_dim=12, embed_dim=6)
AUG = AugmentationSpec(noise_sigma=0.3, mask_prob=0.1)


def small_cfg(**overrides):
    base = dict(
        mode="ensemble",
        num_blocks=1,
        epochs=3,
        batch_size=8,
        ae_pretrain_epochs=2,
        ae_warmup_epochs=1,
        warmup_epochs=1,
        warmup_lr=0.005,
        seed=123,
    )
    base.update(overrides)
    return TrainConfig(**base)


def small_data(n=40, dim=10, seed=5):
    return np.random.default_rng(seed).standard_normal((n, dim))


def params_snapshot(block):
    return {k: p.data.copy() for k, p in block.parameters().items()}


def assert_params_equal(a, b):
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k]), f"parameter {k} differs"


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------


def test_step_returns_consistent_breakdown():
    cfg = small_cfg()
    block = tr.init_block(ARCH, cfg, 0)
    rng = np.random.default_rng(0)
    bd = tr.train_block_step(block, rng.standard_normal((8, 10)), rng.standard_normal((8, 10)), cfg)
    assert np.isfinite(bd.total)
    assert bd.total == pytest.approx(bd.whitening + cfg.alpha * (bd.recon_a + bd.recon_b), abs=1e-12)
    assert bd.whitening == pytest.approx(bd.diag_term + bd.offdiag_term, rel=1e-12)


def test_efficient_step_runs_and_has_single_recon():
    cfg = small_cfg(mode="efficient")
    block = tr.init_block(ARCH, cfg, 0)
    assert len(block.autoencoders) == 1
    rng = np.random.default_rng(0)
    bd = tr.train_block_step(block, rng.standard_normal((8, 10)), rng.standard_normal((8, 10)), cfg)
    assert bd.recon_b == 0.0
    assert bd.recon_a > 0.0


def test_drop_ae_step_equals_barlow_twins_step():
    # beta=0, alpha=0, no autoencoders: one step must match an independent
    # plain redundancy-reduction step (lambda=1) from the same initial state.
    rng = np.random.default_rng(7)
    va, vb = rng.standard_normal((8, 10)), rng.standard_normal((8, 10))

    cfg_pw = small_cfg(beta=0.0, alpha=0.0, use_autoencoders=False)
    cfg_bt = small_cfg(loss_variant="barlow_twins", lambda_bt=1.0)
    block_pw = tr.init_block(ARCH, cfg_pw, 0)
    block_bt = tr.init_block(ARCH, cfg_bt, 0)
    assert_params_equal(params_snapshot(block_pw), params_snapshot(block_bt))

    bd_pw = tr.train_block_step(block_pw, va, vb, cfg_pw)
    bd_bt = tr.train_block_step(block_bt, va, vb, cfg_bt)
    assert bd_pw.total == pytest.approx(bd_bt.total, rel=1e-12)
    after_pw, after_bt = params_snapshot(block_pw), params_snapshot(block_bt)
    for k in after_pw:
        assert np.allclose(after_pw[k], after_bt[k], rtol=1e-10, atol=1e-12), k


def test_step_equals_hand_computed_bt_loss_value():
    # Independent oracle: recompute the step's loss with plain numpy.
    cfg = small_cfg(beta=0.0, alpha=0.0, use_autoencoders=False)
    block = tr.init_block(ARCH, cfg, 0)
    rng = np.random.default_rng(9)
    va, vb = rng.standard_normal((8, 10)), rng.standard_normal((8, 10))

    block.train(True)
    with nm.no_grad():
        za, zb = tr._network_forward(block, Tensor(va), Tensor(vb))
    block2 = tr.init_block(ARCH, cfg, 0)
    bd = tr.train_block_step(block2, va, vb, cfg)

    def np_pearson(a, b):
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        denom = np.outer(np.linalg.norm(a, axis=0), np.linalg.norm(b, axis=0)) + 1e-12
        return (a.T @ b) / denom

    c = np_pearson(za.data, zb.data)
    expected = float(np.sum((c - np.eye(c.shape[0])) ** 2))
    assert bd.total == pytest.approx(expected, rel=1e-10)


def test_alpha_zero_leaves_autoencoders_untouched():
    cfg = small_cfg(alpha=0.0)
    block = tr.init_block(ARCH, cfg, 0)
    before = {k: p.data.copy() for k, p in block.ae_parameters(0).items()}
    before.update({k: p.data.copy() for k, p in block.ae_parameters(1).items()})
    rng = np.random.default_rng(1)
    for _ in range(5):
        tr.train_block_step(block, rng.standard_normal((8, 10)), rng.standard_normal((8, 10)), cfg)
    after = {k: p.data.copy() for k, p in block.ae_parameters(0).items()}
    after.update({k: p.data.copy() for k, p in block.ae_parameters(1).items()})
    assert_params_equal(before, after)


def test_shared_views_flag_does_not_change_step_math():
    va, vb = small_data(8, seed=2), small_data(8, seed=3)
    results = []
    for flag in (False, True):
        cfg = small_cfg(shared_views=flag)
        block = tr.init_block(ARCH, cfg, 0)
        results.append((tr.train_block_step(block, va, vb, cfg), params_snapshot(block)))
    assert results[0][0] == results[1][0]
    assert_params_equal(results[0][1], results[1][1])


def test_untied_weights_escape_hatch():
    cfg = small_cfg(tied_weights=False)
    block = tr.init_block(ARCH, cfg, 0)
    assert block.encoder_b is not None
    bd = tr.train_block_step(block, small_data(8, seed=2), small_data(8, seed=3), cfg)
    assert np.isfinite(bd.total)


def test_regularized_variants_step():
    for variant in ("regularized_ae", "regularized_gaussian"):
        cfg = small_cfg(loss_variant=variant, lambda_bt=0.005)
        block = tr.init_block(ARCH, cfg, 0)
        ae_before = (
            {k: p.data.copy() for k, p in block.ae_parameters(0).items()}
            if block.autoencoders
            else {}
        )
        bd = tr.train_block_step(block, small_data(8, seed=2), small_data(8, seed=3), cfg)
        assert np.isfinite(bd.total) and bd.recon_a == 0.0
        if block.autoencoders:  # frozen during the main phase
            ae_after = {k: p.data.copy() for k, p in block.ae_parameters(0).items()}
            assert_params_equal(ae_before, ae_after)


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def test_ae_pretraining_reduces_reconstruction():
    cfg = small_cfg(ae_pretrain_epochs=40, ae_warmup_epochs=2, ae_warmup_lr=0.003)
    blocks = tr.init_blocks(ARCH, cfg)
    data = small_data(64)

    class Capture:
        def __init__(self):
            self.rows = []

        def write(self, **kw):
            self.rows.append(kw)

    cap = Capture()
    tr.pretrain_autoencoders(blocks, data, cfg, AUG, writer=cap)
    recon = [r["values"]["recon"] for r in cap.rows if r["phase"] == "ae_pretrain"]
    assert recon[-1] < 0.5 * recon[0]


def test_ae_pretraining_zero_epochs_is_noop():
    cfg = small_cfg(ae_pretrain_epochs=0)
    blocks = tr.init_blocks(ARCH, cfg)
    before = params_snapshot(blocks[0])
    tr.pretrain_autoencoders(blocks, small_data(), cfg, AUG)
    assert_params_equal(before, params_snapshot(blocks[0]))


def test_training_is_deterministic():
    cfg = small_cfg()
    data = small_data()
    run1 = tr.train_ensemble(cfg, ARCH, AUG, data)
    run2 = tr.train_ensemble(cfg, ARCH, AUG, data)
    assert_params_equal(params_snapshot(run1[0]), params_snapshot(run2[0]))


def test_blocks_differ_across_ensemble():
    cfg = small_cfg(num_blocks=3, epochs=2, ae_pretrain_epochs=1)
    blocks = tr.train_ensemble(cfg, ARCH, AUG, small_data())
    w0 = blocks[0].encoder.layers[0].weight.data
    w1 = blocks[1].encoder.layers[0].weight.data
    w2 = blocks[2].encoder.layers[0].weight.data
    assert not np.array_equal(w0, w1) and not np.array_equal(w1, w2)


def test_block_independence_under_partial_training():
    # Training block 1 alone reproduces its parameters bit-exactly.
    cfg = small_cfg(num_blocks=3, epochs=2, ae_pretrain_epochs=1)
    data = small_data()
    full = tr.train_ensemble(cfg, ARCH, AUG, data)
    partial = tr.train_ensemble(cfg, ARCH, AUG, data, only_blocks={1})
    assert_params_equal(params_snapshot(full[1]), params_snapshot(partial[1]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_abort_carries_context():
    cfg = small_cfg(warmup_lr=1e25, ae_pretrain_enabled=False)
    with pytest.raises(tr.TrainingAbort, match=r"epoch \d+ step \d+ block 0"):
        tr.train_ensemble(cfg, ARCH, AUG, small_data())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(epochs=2, ae_pretrain_epochs=1)
    data = small_data()
    blocks = tr.train_ensemble(cfg, ARCH, AUG, data)
    payload = tr.config_payload(cfg, ARCH, AUG)
    path = tmp_path / "state.ckpt"
    tr.save_checkpoint(blocks, 2, payload, path)
    loaded, epoch, stored = tr.load_checkpoint(path, expected_config=payload)
    assert epoch == 2 and stored == payload
    assert_params_equal(params_snapshot(blocks[0]), params_snapshot(loaded[0]))
    for name, state in blocks[0].optimizers.items():
        assert loaded[0].optimizers[name].step_count == state.step_count
        for k in state.m:
            assert np.array_equal(loaded[0].optimizers[name].m[k], state.m[k])


def test_checkpoint_rejects_altered_config(tmp_path):
    cfg = small_cfg(epochs=2, ae_pretrain_epochs=1)
    blocks = tr.train_ensemble(cfg, ARCH, AUG, small_data())
    payload = tr.config_payload(cfg, ARCH, AUG)
    path = tmp_path / "state.ckpt"
    tr.save_checkpoint(blocks, 2, payload, path)
    altered = tr.config_payload(small_cfg(epochs=2, ae_pretrain_epochs=1, beta=0.5), ARCH, AUG)
    with pytest.raises(tr.ConfigMismatchError, match="hash"):
        tr.load_checkpoint(path, expected_config=altered)


def test_checkpoint_corrupt_file_reports_offset(tmp_path):
    cfg = small_cfg(epochs=1, ae_pretrain_epochs=0)
    blocks = tr.train_ensemble(cfg, ARCH, AUG, small_data())
    path = tmp_path / "state.ckpt"
    tr.save_checkpoint(blocks, 1, tr.config_payload(cfg, ARCH, AUG), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 64])
    with pytest.raises(tr.CheckpointError, match="byte offset"):
        tr.load_checkpoint(path)
    path.write_bytes(b"junk" + raw[4:])
    with pytest.raises(tr.CheckpointError, match="magic"):
        tr.load_checkpoint(path)


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = small_cfg(epochs=3, ae_pretrain_epochs=1)
    data = small_data()

    class Capture:
        def __init__(self):
            self.rows = []

        def write(self, **kw):
            self.rows.append(kw)

    full_cap = Capture()
    full = tr.train_ensemble(cfg, ARCH, AUG, data, writer=full_cap)

    ck = tmp_path / "ck"
    tr.train_ensemble(cfg, ARCH, AUG, data, checkpoint_dir=ck, stop_after_epoch=2)
    resumed_cap = Capture()
    resumed = tr.train_ensemble(
        cfg, ARCH, AUG, data, writer=resumed_cap, resume_from=ck / "final.ckpt"
    )
    assert_params_equal(params_snapshot(full[0]), params_snapshot(resumed[0]))
    full_last = [r for r in full_cap.rows if r["phase"] == "train" and r["epoch"] == 2]
    resumed_last = [r for r in resumed_cap.rows if r["phase"] == "train" and r["epoch"] == 2]
    assert full_last == resumed_last


def test_periodic_checkpoints_written(tmp_path):
    cfg = small_cfg(epochs=4, ae_pretrain_epochs=0, checkpoint_every=2)
    tr.train_ensemble(cfg, ARCH, AUG, small_data(), checkpoint_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["epoch0002.ckpt", "epoch0004.ckpt", "final.ckpt"]


def test_dump_correlations_writes_csvs(tmp_path):
    cfg = small_cfg(epochs=1, ae_pretrain_epochs=0)
    tr.train_ensemble(cfg, ARCH, AUG, small_data(), dump_correlations_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert "epoch0000_block0_c1.csv" in names and "epoch0000_block0_c2.csv" in names


def test_efficient_multi_block_ensemble():
    cfg = small_cfg(mode="efficient", num_blocks=2, epochs=2, ae_pretrain_epochs=1)
    blocks = tr.train_ensemble(cfg, ARCH, AUG, small_data())
    assert all(len(b.autoencoders) == 1 for b in blocks)
    w0 = blocks[0].encoder.layers[0].weight.data
    w1 = blocks[1].encoder.layers[0].weight.data
    assert not np.array_equal(w0, w1)


def test_checkpoint_empty_path_errors(tmp_path):
    cfg = small_cfg(epochs=1, ae_pretrain_epochs=0)
    blocks = tr.init_blocks(ARCH, cfg)
    with pytest.raises(OSError):
        tr.save_checkpoint(blocks, 0, tr.config_payload(cfg, ARCH, AUG), "")
    with pytest.raises(OSError):
        tr.load_checkpoint("")
