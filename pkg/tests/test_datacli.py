"""Synthetic data, image IO, metrics streams, config handling, CLI plumbing."""

import json
import warnings

import numpy as np
import pytest

from pseudowhiten.datacli import (
    ConfigError,
    MetricsWriter,
    RunConfig,
    SyntheticDatasetSpec,
    config_from_dict,
    config_to_dict,
    generate_synthetic,
    load_config,
    load_image_dataset,
    read_metrics,
    run_config_hash,
    write_idx_dataset,
    write_ppm_dir,
)
from pseudowhiten.datacli.cli import main
from pseudowhiten.datacli.datasets import DataFormatError
from pseudowhiten.evaluation import knn_predict


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def test_synthetic_deterministic_and_balanced():
    spec = SyntheticDatasetSpec(num_classes=3, samples_per_class=20, input_dim=8, seed=4)
    (tx1, ty1), (sx1, sy1) = generate_synthetic(spec)
    (tx2, ty2), _ = generate_synthetic(spec)
    assert np.array_equal(tx1, tx2) and np.array_equal(ty1, ty2)
    assert [int(np.sum(ty1 == c)) for c in range(3)] == [16, 16, 16]
    assert [int(np.sum(sy1 == c)) for c in range(3)] == [4, 4, 4]
    assert tx1.shape == (48, 8) and sx1.shape == (12, 8)


def test_synthetic_center_separation_holds():
    spec = SyntheticDatasetSpec(num_classes=4, samples_per_class=50, input_dim=16,
                                separation=5.0, within_sigma=0.01, seed=1)
    (tx, ty), _ = generate_synthetic(spec)
    centers = np.stack([tx[ty == c].mean(axis=0) for c in range(4)])
    dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
    np.fill_diagonal(dists, np.inf)
    assert dists.min() >= 5.0 - 0.1


def test_synthetic_tiny_sigma_gives_perfect_knn():
    spec = SyntheticDatasetSpec(num_classes=2, samples_per_class=20, input_dim=6,
                                within_sigma=1e-9, seed=2)
    train, test = generate_synthetic(spec)
    preds, _ = knn_predict(train.x, train.y, test.x, k=5)
    assert np.array_equal(preds, test.y)


def test_synthetic_nuisance_dims_carry_no_signal():
    spec = SyntheticDatasetSpec(num_classes=2, samples_per_class=200, input_dim=10,
                                nuisance_dim=4, nuisance_sigma=2.0, within_sigma=0.5, seed=3)
    train, _ = generate_synthetic(spec)
    per_class_means = np.stack([train.x[train.y == c].mean(axis=0) for c in range(2)])
    assert np.max(np.abs(per_class_means[:, 6:])) < 0.5  # centers are zero there


def test_synthetic_infeasible_separation_errors():
    # 12 centers on a 1-D signal axis essentially never end up pairwise
    # separated by a full draw deviation; bounded retries must give up.
    spec = SyntheticDatasetSpec(num_classes=12, samples_per_class=5, input_dim=2,
                                nuisance_dim=1, separation=5.0)
    with pytest.raises(ValueError, match="could not place"):
        generate_synthetic(spec)


# ---------------------------------------------------------------------------
# Image IO
# ---------------------------------------------------------------------------


def test_idx_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, size=(6, 1, 5, 4), dtype=np.uint8)
    labels = rng.integers(0, 3, size=6)
    write_idx_dataset(images, labels, tmp_path)
    loaded = load_image_dataset(tmp_path, "idx")
    assert np.array_equal(loaded.x, images.astype(float) / 255.0)
    assert np.array_equal(loaded.y, labels)
    assert loaded.x.max() <= 1.0


def test_idx_pixel_scaling(tmp_path):
    images = np.full((1, 1, 4, 4), 255, dtype=np.uint8)
    write_idx_dataset(images, np.zeros(1, dtype=int), tmp_path)
    loaded = load_image_dataset(tmp_path, "idx")
    assert loaded.x.max() == 1.0


def test_idx_malformed_errors(tmp_path, rng):
    images = rng.integers(0, 256, size=(3, 4, 4), dtype=np.uint8)
    write_idx_dataset(images, np.zeros(3, dtype=int), tmp_path)
    payload = (tmp_path / "images.idx").read_bytes()
    (tmp_path / "images.idx").write_bytes(payload[:-7])
    with pytest.raises(DataFormatError, match="bytes"):
        load_image_dataset(tmp_path, "idx")


def test_ppm_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, size=(4, 3, 6, 5), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1])
    write_ppm_dir(images, labels, tmp_path)
    loaded = load_image_dataset(tmp_path, "ppm-dir")
    assert np.array_equal(loaded.x, images.astype(float) / 255.0)
    assert np.array_equal(loaded.y, labels)


def test_ppm_label_count_mismatch(tmp_path, rng):
    images = rng.integers(0, 256, size=(3, 3, 4, 4), dtype=np.uint8)
    write_ppm_dir(images, np.zeros(3, dtype=int), tmp_path)
    lines = (tmp_path / "labels.csv").read_text().strip().splitlines()
    (tmp_path / "labels.csv").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(DataFormatError, match="label"):
        load_image_dataset(tmp_path, "ppm-dir")


def test_unknown_format_errors(tmp_path):
    with pytest.raises(ValueError, match="format"):
        load_image_dataset(tmp_path, "png")


# ---------------------------------------------------------------------------
# Metrics stream
# ---------------------------------------------------------------------------


def test_metrics_round_trip(tmp_path):
    path = tmp_path / "metrics.jsonl"
    with MetricsWriter(path, "run-1", "hash") as writer:
        for epoch in range(3):
            writer.write(phase="train", block_id=0, epoch=epoch, step=7, values={"total": 1.5 * epoch})
    records = read_metrics(path)
    assert len(records) == 3
    assert [r.seq for r in records] == [0, 1, 2]
    assert records[2].values["total"] == 3.0
    assert all(r.config_hash == "hash" for r in records)


def test_metrics_truncated_final_line(tmp_path):
    path = tmp_path / "metrics.jsonl"
    with MetricsWriter(path, "run-1", "hash") as writer:
        writer.write(phase="train", block_id=0, epoch=0, step=0, values={"a": 1.0})
        writer.write(phase="train", block_id=0, epoch=1, step=0, values={"a": 2.0})
    raw = path.read_text()
    path.write_text(raw[: len(raw) - 9])  # clip inside the final record
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        records = read_metrics(path)
    assert len(records) == 1
    assert any("truncated" in str(w.message) for w in caught)


def test_metrics_sortable(tmp_path):
    path = tmp_path / "metrics.jsonl"
    with MetricsWriter(path, "run-1", "h") as writer:
        writer.write(phase="train", block_id=1, epoch=0, step=0, values={})
        writer.write(phase="train", block_id=0, epoch=1, step=0, values={})
        writer.write(phase="train", block_id=0, epoch=0, step=3, values={})
    keys = [r.sort_key() for r in sorted(read_metrics(path), key=lambda r: r.sort_key())]
    assert keys == [(0, 0, 3), (0, 1, 0), (1, 0, 0)]


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_config_default_round_trip():
    cfg = RunConfig.default()
    again = config_from_dict(config_to_dict(cfg))
    assert run_config_hash(cfg) == run_config_hash(again)


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"train": {"bogus_knob": 1}})
    with pytest.raises(ConfigError, match="sections"):
        config_from_dict({"trainer": {}})


def test_config_dim_consistency_checked():
    raw = {"data": {"input_dim": 16}, "arch": {"input_dim": 32}}
    with pytest.raises(ConfigError, match="input_dim"):
        config_from_dict(raw)


def test_config_json_and_toml_files(tmp_path):
    raw = {"data": {"input_dim": 16}, "arch": {"input_dim": 16}, "train": {"epochs": 5}}
    jpath = tmp_path / "run.json"
    jpath.write_text(json.dumps(raw))
    assert load_config(jpath).train.epochs == 5
    tpath = tmp_path / "run.toml"
    tpath.write_text("[data]\ninput_dim = 16\n[arch]\ninput_dim = 16\n[train]\nepochs = 5\n")
    assert load_config(tpath).train.epochs == 5
    assert run_config_hash(load_config(jpath)) == run_config_hash(load_config(tpath))


def test_config_missing_file():
    with pytest.raises(ConfigError, match="not found"):
        load_config("/nonexistent/run.json")


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def tiny_config(tmp_path, **train_overrides):
    train = dict(
        epochs=2,
        batch_size=8,
        num_blocks=1,
        ae_pretrain_epochs=1,
        ae_warmup_epochs=0,
        warmup_epochs=0,
        seed=7,
    )
    train.update(train_overrides)
    raw = {
        "data": {"num_classes": 2, "samples_per_class": 20, "input_dim": 8, "seed": 1},
        "arch": {"input_dim": 8, "encoder_hidden": [12], "repr_dim": 10, "embed_dim": 6},
        "augment": {"noise_sigma": 0.2, "mask_prob": 0.1},
        "train": train,
        "probe": {"epochs": 3},
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def test_cli_usage_errors():
    assert main([]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["train", "--config", "/nonexistent.json"]) == 1


def test_cli_train_then_eval(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    run_dirs = list(out.iterdir())
    assert len(run_dirs) == 1
    run_dir = run_dirs[0]
    assert (run_dir / "metrics.jsonl").exists()
    assert (run_dir / "checkpoints" / "final.ckpt").exists()
    assert (run_dir / "report.json").exists()
    assert (run_dir / "summary.csv").exists()
    report = json.loads((run_dir / "report.json").read_text())
    assert 0 <= report["top1"] <= 100

    assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
    assert "ensemble" in capsys.readouterr().out


def test_cli_eval_without_checkpoint_errors(tmp_path):
    cfg = tiny_config(tmp_path, seed=99)
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "empty")]) == 1


def test_cli_train_determinism(tmp_path):
    cfg = tiny_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(out_a)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out_b)]) == 0
    run_a = next(out_a.iterdir())
    run_b = next(out_b.iterdir())
    assert (run_a / "metrics.jsonl").read_bytes() == (run_b / "metrics.jsonl").read_bytes()
    assert (run_a / "report.json").read_bytes() == (run_b / "report.json").read_bytes()
    assert (run_a / "summary.csv").read_bytes() == (run_b / "summary.csv").read_bytes()


def test_cli_seed_override_changes_run(tmp_path):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "8"]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
    assert len(list(out.iterdir())) == 2


def test_cli_dump_correlations(tmp_path):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--out", str(out), "--dump-correlations"]) == 0
    run_dir = next(out.iterdir())
    dumped = list((run_dir / "correlations").glob("*.csv"))
    assert len(dumped) == 4  # 2 epochs x (c1, c2)


def test_cli_sweep_lambda_grid(tmp_path, capsys):
    cfg = tiny_config(tmp_path, ae_pretrain_epochs=1)
    out = tmp_path / "runs"
    assert main(["sweep-lambda", "--config", str(cfg), "--out", str(out)]) == 0
    run_dir = next(out.iterdir())
    rows = (run_dir / "summary.csv").read_text().strip().splitlines()
    assert len(rows) == 6  # header + 5 grid points
    assert len(list((run_dir / "points").iterdir())) == 5
    assert "bt-l0.005" in capsys.readouterr().out


def test_cli_sweep_beta_grid(tmp_path):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["sweep-beta", "--config", str(cfg), "--out", str(out)]) == 0
    run_dir = next(out.iterdir())
    rows = (run_dir / "summary.csv").read_text().strip().splitlines()
    assert len(rows) == 6  # header + 5 betas


@pytest.mark.parametrize("which", ["drop-ae", "no-pretrain", "shared-views"])
def test_cli_ablations(tmp_path, which):
    cfg = tiny_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["ablate", which, "--config", str(cfg), "--out", str(out)]) == 0
    run_dir = next(out.iterdir())
    assert which in run_dir.name
    assert (run_dir / "summary.csv").exists()


def test_cli_ablate_drop_ae_matches_bt_losses(tmp_path):
    # drop-ae must produce the same step losses as an explicit lambda=1
    # baseline run with the same seed and views.
    cfg_a = tiny_config(tmp_path, use_autoencoders=False, alpha=0.0, beta=0.0)
    out_a = tmp_path / "runs_a"
    assert main(["train", "--config", str(cfg_a), "--out", str(out_a)]) == 0
    cfg_b = tiny_config(tmp_path, loss_variant="barlow_twins", lambda_bt=1.0)
    out_b = tmp_path / "runs_b"
    assert main(["train", "--config", str(cfg_b), "--out", str(out_b)]) == 0

    from pseudowhiten.datacli.metrics import read_metrics as rm

    rows_a = [r.values["total"] for r in rm(next(out_a.iterdir()) / "metrics.jsonl") if r.phase == "train"]
    rows_b = [r.values["total"] for r in rm(next(out_b.iterdir()) / "metrics.jsonl") if r.phase == "train"]
    assert rows_a == pytest.approx(rows_b, rel=1e-9)


# ---------------------------------------------------------------------------
# Cross-cutting invariants
# ---------------------------------------------------------------------------


def test_two_process_determinism(tmp_path):
    # Byte-identical artifacts across two separate interpreter invocations.
    import subprocess
    import sys

    cfg = tiny_config(tmp_path)
    outputs = []
    for name in ("p1", "p2"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "pseudowhiten.datacli.cli", "train",
             "--config", str(cfg), "--out", str(out)],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        run_dir = next(out.iterdir())
        outputs.append(
            ((run_dir / "metrics.jsonl").read_bytes(), (run_dir / "report.json").read_bytes())
        )
    assert outputs[0] == outputs[1]


def test_artifacts_share_config_hash(tmp_path):
    from pseudowhiten.datacli.metrics import read_metrics as rm
    from pseudowhiten.training import load_checkpoint, hash_config

    cfg = tiny_config(tmp_path)
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    run_dir = next(out.iterdir())
    records = rm(run_dir / "metrics.jsonl")
    hashes = {r.config_hash for r in records}
    report = json.loads((run_dir / "report.json").read_text())
    _, _, stored_cfg = load_checkpoint(run_dir / "checkpoints" / "final.ckpt")
    assert hashes == {report["config_hash"]}
    assert hash_config(stored_cfg) == report["config_hash"]


def test_sweep_points_use_distinct_seeds():
    from pseudowhiten.seeding import derive_seed

    seeds = [derive_seed(0, "sweep-lambda", i) for i in range(5)]
    seeds += [derive_seed(0, "sweep-beta", i) for i in range(5)]
    assert len(set(seeds)) == 10


def test_cli_transfer_eval(tmp_path, capsys):
    raw = json.loads(tiny_config(tmp_path).read_text())
    raw["transfer"] = {"num_classes": 2, "samples_per_class": 20, "input_dim": 8, "seed": 42}
    cfg = tmp_path / "config_transfer.json"
    cfg.write_text(json.dumps(raw))
    out = tmp_path / "runs"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--transfer"]) == 0
    eval_dir = [d for d in out.iterdir() if d.name.startswith("eval-")]
    report = json.loads((eval_dir[0] / "report.json").read_text())
    assert report["transfer"] is True
