"""Two-phase training: autoencoder pretraining, then per-block joint updates.

A Block is one ensemble member: encoder + projector (optionally an untied
second pair) and its autoencoders (two in ensemble mode, one in efficient
mode).  Blocks never exchange gradients or parameters; every random draw is
keyed by (seed, purpose, epoch, step) counters so a block retrains
bit-identically regardless of what the other blocks do, and checkpoints
resume exactly.

Baseline loss variants for the sweep/ablation surface run through the same
step machinery: plain redundancy reduction (no autoencoders), and the
regularized forms whose off-diagonal targets come from a frozen pretrained
autoencoder pair or a fixed Gaussian draw.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nm
from .augment import AugmentationSpec, generate_and_allocate
from .correlation import auto_correlation, build_target, correlation_to_csv, cross_correlation
from .losses import (
    LossBreakdown,
    LossConfig,
    barlow_twins_loss,
    efficient_loss,
    gaussian_uncertainty_matrix,
    pseudo_whitening_loss,
    reconstruction_loss,
    regularized_bt_loss,
    total_loss,
)
from .nets import ArchConfig, Autoencoder, EncoderNet, ProjectorHead
from .numerics import Tensor
from .seeding import derive_seed, rng_for

__all__ = [
    "TrainConfig",
    "Block",
    "TrainingAbort",
    "CheckpointError",
    "ConfigMismatchError",
    "init_block",
    "init_blocks",
    "pretrain_autoencoders",
    "train_block_step",
    "train_ensemble",
    "save_checkpoint",
    "load_checkpoint",
    "config_payload",
    "hash_config",
]

LOSS_VARIANTS = ("pseudo_whitening", "barlow_twins", "regularized_ae", "regularized_gaussian")

CKPT_MAGIC = b"PWCKPT1\n"


class TrainingAbort(RuntimeError):
    """Raised when a step produces a non-finite loss; carries step context."""


class CheckpointError(RuntimeError):
    """Malformed or truncated checkpoint file."""


class ConfigMismatchError(RuntimeError):
    """Checkpoint was written under a different configuration."""


@dataclass
class TrainConfig:
    mode: str = "ensemble"  # ensemble | efficient
    num_blocks: int = 1
    epochs: int = 200
    batch_size: int = 128
    alpha: float = 0.2
    beta: float = 0.01
    lambda_bt: float = 0.005
    form: str = "algorithm1"
    loss_variant: str = "pseudo_whitening"
    use_autoencoders: bool = True
    ae_pretrain_enabled: bool = True
    ae_pretrain_epochs: int = 250
    ae_warmup_epochs: int = 10
    ae_warmup_lr: float = 0.1
    ae_main_lr: float = 1e-3
    warmup_epochs: int = 4
    warmup_lr: float = 0.005
    main_lr: float = 1e-3
    weight_decay: float = 1e-6
    seed: int = 0
    shared_views: bool = False
    tied_weights: bool = True
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def validate(self) -> None:
        if self.mode not in ("ensemble", "efficient"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant '{self.loss_variant}'")
        if self.loss_variant != "pseudo_whitening" and self.mode != "ensemble":
            raise ValueError("baseline loss variants run in ensemble mode only")
        if self.num_blocks < 1 or self.epochs < 1:
            raise ValueError("num_blocks and epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")

    def loss_config(self) -> LossConfig:
        return LossConfig(
            alpha=self.alpha,
            beta=self.beta,
            lambda_bt=self.lambda_bt,
            form=self.form,
            mode=self.mode,
        )

    def needs_autoencoders(self) -> bool:
        if self.loss_variant == "pseudo_whitening":
            return self.use_autoencoders
        return self.loss_variant == "regularized_ae"

    def ae_schedule(self) -> nm.LrSchedule:
        return nm.LrSchedule(
            kind="warmup_constant",
            warmup_epochs=self.ae_warmup_epochs,
            warmup_lr=self.ae_warmup_lr,
            main_lr=self.ae_main_lr,
        )

    def main_schedule(self) -> nm.LrSchedule:
        return nm.LrSchedule(
            kind="warmup_constant",
            warmup_epochs=self.warmup_epochs,
            warmup_lr=self.warmup_lr,
            main_lr=self.main_lr,
        )


class Block:
    """One ensemble member and its optimizer states."""

    def __init__(
        self,
        block_id: int,
        seed: int,
        encoder: EncoderNet,
        projector: ProjectorHead,
        autoencoders: list[Autoencoder],
        encoder_b: EncoderNet | None = None,
        projector_b: ProjectorHead | None = None,
        gaussian_g: np.ndarray | None = None,
    ):
        self.block_id = block_id
        self.seed = seed
        self.encoder = encoder
        self.projector = projector
        self.autoencoders = autoencoders
        self.encoder_b = encoder_b
        self.projector_b = projector_b
        self.gaussian_g = gaussian_g
        self.optimizers: dict[str, nm.AdamState] = {}

    def network_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.encoder.parameters("encoder"))
        out.update(self.projector.parameters("projector"))
        if self.encoder_b is not None:
            out.update(self.encoder_b.parameters("encoder_b"))
        if self.projector_b is not None:
            out.update(self.projector_b.parameters("projector_b"))
        return out

    def ae_parameters(self, index: int) -> dict[str, Tensor]:
        return self.autoencoders[index].parameters(f"ae{index}")

    def parameters(self) -> dict[str, Tensor]:
        out = self.network_parameters()
        for i in range(len(self.autoencoders)):
            out.update(self.ae_parameters(i))
        return out

    def main_parameters(self, cfg: TrainConfig) -> dict[str, Tensor]:
        """Parameters updated during joint training (frozen AEs excluded)."""
        out = self.network_parameters()
        if cfg.loss_variant == "pseudo_whitening":
            for i in range(len(self.autoencoders)):
                out.update(self.ae_parameters(i))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self.projector.buffers("projector"))
        if self.projector_b is not None:
            out.update(self.projector_b.buffers("projector_b"))
        return out

    def load_buffers(self, arrays: dict[str, np.ndarray]) -> None:
        self.projector.load_buffers("projector", arrays)
        if self.projector_b is not None:
            self.projector_b.load_buffers("projector_b", arrays)

    def train(self, mode: bool) -> None:
        self.projector.train(mode)
        if self.projector_b is not None:
            self.projector_b.train(mode)


def init_block(arch: ArchConfig, cfg: TrainConfig, block_id: int) -> Block:
    cfg.validate()
    bs = derive_seed(cfg.seed, "block", block_id)
    encoder = EncoderNet.init(arch, derive_seed(bs, "enc"))
    projector = ProjectorHead.init(arch, derive_seed(bs, "proj"))
    encoder_b = projector_b = None
    if cfg.mode == "ensemble" and not cfg.tied_weights:
        encoder_b = EncoderNet.init(arch, derive_seed(bs, "enc-b"))
        projector_b = ProjectorHead.init(arch, derive_seed(bs, "proj-b"))
    n_aes = 0
    if cfg.needs_autoencoders():
        n_aes = 1 if cfg.mode == "efficient" else 2
    autoencoders = [Autoencoder.init(arch, derive_seed(bs, "ae", i)) for i in range(n_aes)]
    gaussian_g = None
    if cfg.loss_variant == "regularized_gaussian":
        gaussian_g = gaussian_uncertainty_matrix(arch.embed_dim, rng_for(bs, "gaussian-g"))
    block = Block(block_id, bs, encoder, projector, autoencoders, encoder_b, projector_b, gaussian_g)
    for i in range(n_aes):
        block.optimizers[f"ae{i}"] = nm.init_adam(
            block.ae_parameters(i), cfg.ae_main_lr, weight_decay=cfg.weight_decay
        )
    block.optimizers["main"] = nm.init_adam(
        block.main_parameters(cfg), cfg.main_lr, weight_decay=cfg.weight_decay
    )
    return block


def init_blocks(arch: ArchConfig, cfg: TrainConfig) -> list[Block]:
    return [init_block(arch, cfg, k) for k in range(cfg.num_blocks)]


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------


def _network_forward(block: Block, view_a: Tensor, view_b: Tensor) -> tuple[Tensor, Tensor]:
    za = block.projector.forward(block.encoder.forward(view_a))
    enc_b = block.encoder_b or block.encoder
    proj_b = block.projector_b or block.projector
    zb = proj_b.forward(enc_b.forward(view_b))
    return za, zb


def _frozen_latent_correlation(block: Block, view_a: Tensor, view_b: Tensor) -> np.ndarray:
    with nm.no_grad():
        la, _ = block.autoencoders[0].forward(view_a)
        lb, _ = block.autoencoders[1].forward(view_b)
        return cross_correlation(la, lb).values.data


def train_block_step(block: Block, view_a: np.ndarray, view_b: np.ndarray, cfg: TrainConfig) -> LossBreakdown:
    """One joint update on a pair of views; returns the loss components.

    Autoencoders receive gradients only through their reconstruction term;
    with alpha = 0 the reconstruction stays off the tape entirely, so their
    parameters are left untouched (no decay either).
    """
    cfg.validate()
    block.train(True)
    lcfg = cfg.loss_config()
    xa, xb = Tensor(view_a), Tensor(view_b)

    if cfg.mode == "efficient":
        stacked = Tensor(np.vstack([view_a, view_b]))
        z = block.projector.forward(block.encoder.forward(stacked))
        c_prime = auto_correlation(z)
        if cfg.alpha != 0.0:
            latent, recon = block.autoencoders[0].forward(stacked)
            recon_term = reconstruction_loss(stacked, recon)
        else:
            with nm.no_grad():
                latent, _ = block.autoencoders[0].forward(stacked)
            recon_term = None
        c_dprime = auto_correlation(Tensor(latent.data))  # constant target side
        whitening = efficient_loss(c_prime, c_dprime, lcfg)
        total = total_loss(whitening, recon_term, None, cfg.alpha)
    elif cfg.loss_variant == "pseudo_whitening":
        za, zb = _network_forward(block, xa, xb)
        c1 = cross_correlation(za, zb)
        if block.autoencoders:
            if cfg.alpha != 0.0:
                la, ra = block.autoencoders[0].forward(xa)
                lb, rb = block.autoencoders[1].forward(xb)
                recon_a = reconstruction_loss(xa, ra)
                recon_b = reconstruction_loss(xb, rb)
            else:
                with nm.no_grad():
                    la, _ = block.autoencoders[0].forward(xa)
                    lb, _ = block.autoencoders[1].forward(xb)
                recon_a = recon_b = None
            c2 = cross_correlation(Tensor(la.data), Tensor(lb.data))
            target = build_target(c2, cfg.beta)
        else:
            target = build_target(_identity_corr(c1.dim), cfg.beta)
            recon_a = recon_b = None
        whitening = pseudo_whitening_loss(c1, target, lcfg)
        total = total_loss(whitening, recon_a, recon_b, cfg.alpha)
    else:
        za, zb = _network_forward(block, xa, xb)
        c1 = cross_correlation(za, zb)
        if cfg.loss_variant == "barlow_twins":
            value = barlow_twins_loss(c1, cfg.lambda_bt)
        elif cfg.loss_variant == "regularized_ae":
            g = _frozen_latent_correlation(block, xa, xb)
            value = regularized_bt_loss(c1, g, cfg.lambda_bt)
        else:  # regularized_gaussian
            value = regularized_bt_loss(c1, block.gaussian_g, cfg.lambda_bt)
        total = total_loss(value, None, None, 0.0)

    if not np.isfinite(total.breakdown.total):
        raise TrainingAbort(f"non-finite loss; last components: {total.breakdown.as_dict()}")
    nm.backward(total.value)
    params = block.main_parameters(cfg)
    nm.adam_step(params, nm.collect_grads(params), block.optimizers["main"])
    nm.zero_grads(block.parameters())
    return total.breakdown


def _identity_corr(dim: int):
    from .correlation import CorrelationMatrix

    return CorrelationMatrix(Tensor(np.eye(dim)), is_auto=True)


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------


def _epoch_batches(n: int, batch_size: int, shuffle_rng: np.random.Generator) -> list[np.ndarray]:
    order = shuffle_rng.permutation(n)
    slices = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [s for s in slices if len(s) >= 2]  # correlations need 2+ rows


def _block_pair_rngs(blocks, phase: str, epoch: int, step: int):
    return [
        (rng_for(b.seed, phase, epoch, step, 0), rng_for(b.seed, phase, epoch, step, 1))
        for b in blocks
    ]


def pretrain_autoencoders(
    blocks: list[Block],
    train_x: np.ndarray,
    cfg: TrainConfig,
    aug_spec: AugmentationSpec,
    writer=None,
    only_blocks: set[int] | None = None,
) -> None:
    """Train each block's autoencoders on its own augmented view stream.

    Networks are untouched.  Skipped entirely when pretraining is disabled
    or the variant carries no autoencoders.
    """
    cfg.validate()
    if not cfg.ae_pretrain_enabled or not cfg.needs_autoencoders() or cfg.ae_pretrain_epochs < 1:
        return
    sched = cfg.ae_schedule()
    n = len(train_x)
    for epoch in range(cfg.ae_pretrain_epochs):
        lr = nm.lr_schedule(epoch, sched)
        totals = np.zeros(len(blocks))
        counts = np.zeros(len(blocks))
        batches = _epoch_batches(n, cfg.batch_size, rng_for(cfg.seed, "ae-shuffle", epoch))
        for step, idx in enumerate(batches):
            alloc = generate_and_allocate(
                train_x[idx],
                len(blocks),
                aug_spec,
                rng_for(cfg.seed, "ae-alloc", epoch, step),
                pair_rngs=_block_pair_rngs(blocks, "ae-views", epoch, step),
                shared_views=False,
            )
            for block in blocks:
                if only_blocks is not None and block.block_id not in only_blocks:
                    continue
                view_a, view_b = alloc.views_for_block(block.block_id)[0]
                if cfg.mode == "efficient":
                    views = [np.vstack([view_a, view_b])]
                else:
                    views = [view_a, view_b]
                step_loss = 0.0
                for i, view in enumerate(views):
                    ae = block.autoencoders[i]
                    state = block.optimizers[f"ae{i}"]
                    state.learning_rate = lr
                    x = Tensor(view)
                    _, recon = ae.forward(x)
                    loss = reconstruction_loss(x, recon)
                    value = float(loss.data)
                    if not np.isfinite(value):
                        raise TrainingAbort(
                            f"non-finite reconstruction loss at ae-pretrain epoch {epoch} "
                            f"step {step} block {block.block_id}"
                        )
                    step_loss += value
                    nm.backward(loss)
                    params = block.ae_parameters(i)
                    nm.adam_step(params, nm.collect_grads(params), state)
                    nm.zero_grads(params)
                totals[block.block_id] += step_loss
                counts[block.block_id] += 1
        if writer is not None:
            for block in blocks:
                if counts[block.block_id]:
                    writer.write(
                        phase="ae_pretrain",
                        block_id=block.block_id,
                        epoch=epoch,
                        step=len(batches),
                        values={"recon": totals[block.block_id] / counts[block.block_id], "lr": lr},
                    )


def _dump_epoch_correlations(blocks, train_x, cfg, aug_spec, epoch, out_dir) -> None:
    """Recompute the epoch's step-0 views and dump C1/C2 per block as CSV."""
    from pathlib import Path

    batches = _epoch_batches(len(train_x), cfg.batch_size, rng_for(cfg.seed, "shuffle", epoch))
    if not batches:
        return
    alloc = generate_and_allocate(
        train_x[batches[0]],
        len(blocks),
        aug_spec,
        rng_for(cfg.seed, "alloc", epoch, 0),
        pair_rngs=_block_pair_rngs(blocks, "views", epoch, 0),
        shared_views=cfg.shared_views,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with nm.no_grad():
        for block in blocks:
            view_a, view_b = alloc.views_for_block(block.block_id)[0]
            block.train(False)
            if cfg.mode == "efficient":
                stacked = Tensor(np.vstack([view_a, view_b]))
                c1 = auto_correlation(block.projector.forward(block.encoder.forward(stacked)))
                mats = {"c1": c1}
                if block.autoencoders:
                    latent, _ = block.autoencoders[0].forward(stacked)
                    mats["c2"] = auto_correlation(latent)
            else:
                za, zb = _network_forward(block, Tensor(view_a), Tensor(view_b))
                mats = {"c1": cross_correlation(za, zb)}
                if len(block.autoencoders) == 2:
                    la, _ = block.autoencoders[0].forward(Tensor(view_a))
                    lb, _ = block.autoencoders[1].forward(Tensor(view_b))
                    mats["c2"] = cross_correlation(la, lb)
            block.train(True)
            for name, mat in mats.items():
                correlation_to_csv(mat, out / f"epoch{epoch:04d}_block{block.block_id}_{name}.csv")


def train_ensemble(
    cfg: TrainConfig,
    arch: ArchConfig,
    aug_spec: AugmentationSpec,
    train_x: np.ndarray,
    writer=None,
    only_blocks: set[int] | None = None,
    checkpoint_dir=None,
    config_dict: dict | None = None,
    resume_from=None,
    stop_after_epoch: int | None = None,
    dump_correlations_dir=None,
) -> list[Block]:
    """Run the full two-phase procedure and return the trained blocks.

    Per epoch and source batch the allocator emits 2M views; each block
    consumes its own pair (all pairs under shared_views) and steps
    independently.  ``stop_after_epoch`` ends the main phase early without
    touching the configuration, which is how interrupted-run resume is
    exercised; ``resume_from`` continues bit-exactly from a checkpoint.
    """
    cfg.validate()
    if config_dict is None:
        config_dict = config_payload(cfg, arch, aug_spec)
    cfg_hash = hash_config(config_dict)

    start_epoch = 0
    if resume_from is not None:
        blocks, start_epoch, stored = load_checkpoint(resume_from, expected_config=config_dict)
    else:
        blocks = init_blocks(arch, cfg)
        pretrain_autoencoders(blocks, train_x, cfg, aug_spec, writer=writer, only_blocks=only_blocks)

    sched = cfg.main_schedule()
    n = len(train_x)
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch, last_epoch):
        lr = nm.lr_schedule(epoch, sched)
        sums = {b.block_id: None for b in blocks}
        counts = {b.block_id: 0 for b in blocks}
        batches = _epoch_batches(n, cfg.batch_size, rng_for(cfg.seed, "shuffle", epoch))
        for step, idx in enumerate(batches):
            alloc = generate_and_allocate(
                train_x[idx],
                len(blocks),
                aug_spec,
                rng_for(cfg.seed, "alloc", epoch, step),
                pair_rngs=_block_pair_rngs(blocks, "views", epoch, step),
                shared_views=cfg.shared_views,
            )
            for block in blocks:
                if only_blocks is not None and block.block_id not in only_blocks:
                    continue
                block.optimizers["main"].learning_rate = lr
                for view_a, view_b in alloc.views_for_block(block.block_id):
                    try:
                        bd = train_block_step(block, view_a, view_b, cfg)
                    except (TrainingAbort, ValueError) as exc:
                        raise TrainingAbort(
                            f"epoch {epoch} step {step} block {block.block_id}: {exc}"
                        ) from exc
                    vals = np.array(list(bd.as_dict().values()))
                    sums[block.block_id] = vals if sums[block.block_id] is None else sums[block.block_id] + vals
                    counts[block.block_id] += 1
        if writer is not None:
            keys = list(LossBreakdown(0, 0, 0, 0, 0, 0).as_dict().keys())
            for block in blocks:
                if counts[block.block_id]:
                    means = sums[block.block_id] / counts[block.block_id]
                    values = dict(zip(keys, (float(v) for v in means)))
                    values["lr"] = lr
                    writer.write(
                        phase="train", block_id=block.block_id, epoch=epoch,
                        step=len(batches), values=values,
                    )
        if dump_correlations_dir is not None:
            _dump_epoch_correlations(blocks, train_x, cfg, aug_spec, epoch, dump_correlations_dir)
        done = epoch + 1
        if checkpoint_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            _save_to_dir(blocks, done, config_dict, checkpoint_dir, f"epoch{done:04d}")
    if checkpoint_dir is not None:
        _save_to_dir(blocks, last_epoch, config_dict, checkpoint_dir, "final")
    return blocks


def _save_to_dir(blocks, epoch, config_dict, checkpoint_dir, stem) -> None:
    from pathlib import Path

    path = Path(checkpoint_dir)
    path.mkdir(parents=True, exist_ok=True)
    save_checkpoint(blocks, epoch, config_dict, path / f"{stem}.ckpt")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def config_payload(cfg: TrainConfig, arch: ArchConfig, aug_spec: AugmentationSpec) -> dict:
    payload = {"train": asdict(cfg), "arch": asdict(arch), "augment": asdict(aug_spec)}
    return json.loads(_canonical_json(payload))  # JSON-native types throughout


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def hash_config(config_dict: dict) -> str:
    return hashlib.sha256(_canonical_json(config_dict).encode("utf-8")).hexdigest()


def _state_arrays(blocks: list[Block]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for b in blocks:
        pre = f"block{b.block_id}"
        for name, p in b.parameters().items():
            out[f"{pre}/{name}"] = p.data
        for name, arr in b.buffers().items():
            out[f"{pre}/{name}"] = arr
        for opt_name, state in b.optimizers.items():
            for name, arr in state.m.items():
                out[f"{pre}/opt/{opt_name}/m/{name}"] = arr
            for name, arr in state.v.items():
                out[f"{pre}/opt/{opt_name}/v/{name}"] = arr
    return out


def save_checkpoint(blocks: list[Block], epoch: int, config_dict: dict, path) -> None:
    """JSON header + little-endian float64 blob; byte-identical per seed."""
    arrays = _state_arrays(blocks)
    manifest = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "format_version": 1,
        "config": config_dict,
        "config_hash": hash_config(config_dict),
        "epoch": int(epoch),
        "opt_steps": {
            f"block{b.block_id}/{name}": state.step_count
            for b in blocks
            for name, state in b.optimizers.items()
        },
        "arrays": manifest,
        "total_elements": offset,
    }
    header_bytes = _canonical_json(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path, expected_config: dict | None = None):
    """Rebuild blocks from a checkpoint; returns (blocks, epoch, config_dict).

    Refuses to load when ``expected_config`` hashes differently from the
    stored configuration.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic at byte offset 0")
    pos = len(CKPT_MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError(f"{path}: truncated header length at byte offset {len(raw)}")
    (header_len,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    if len(raw) < pos + header_len:
        raise CheckpointError(f"{path}: truncated header at byte offset {len(raw)}")
    try:
        header = json.loads(raw[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header at byte offset {pos}: {exc}") from exc
    pos += header_len
    config_dict = header["config"]
    if expected_config is not None and hash_config(expected_config) != header["config_hash"]:
        raise ConfigMismatchError(
            f"{path}: checkpoint config hash {header['config_hash'][:12]} does not match "
            f"current config {hash_config(expected_config)[:12]}"
        )
    expected_bytes = header["total_elements"] * 8
    blob = raw[pos:]
    if len(blob) < expected_bytes:
        raise CheckpointError(
            f"{path}: truncated blob at byte offset {pos + len(blob)} "
            f"(expected {pos + expected_bytes})"
        )
    flat = np.frombuffer(blob[:expected_bytes], dtype="<f8")

    cfg = TrainConfig(**config_dict["train"])
    arch = ArchConfig(**{**config_dict["arch"], "encoder_hidden": tuple(config_dict["arch"]["encoder_hidden"])})
    blocks = init_blocks(arch, cfg)
    loaded: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        loaded[entry["name"]] = flat[entry["offset"] : entry["offset"] + size].reshape(shape).copy()
    for b in blocks:
        pre = f"block{b.block_id}"
        for name, p in b.parameters().items():
            p.data[:] = loaded[f"{pre}/{name}"]
        b.load_buffers({name: loaded[f"{pre}/{name}"] for name in b.buffers()})
        for opt_name, state in b.optimizers.items():
            state.step_count = int(header["opt_steps"][f"{pre}/{opt_name}"])
            for name in state.m:
                state.m[name][:] = loaded[f"{pre}/opt/{opt_name}/m/{name}"]
                state.v[name][:] = loaded[f"{pre}/opt/{opt_name}/v/{name}"]
    return blocks, int(header["epoch"]), config_dict
