"""Hinge/MSE losses and the two-step adversarial training loop.

Each GAN batch runs one discriminator update with the generator frozen,
then one generator update against the weighted MSE + adversarial loss with
the discriminator frozen (in inference mode, so its running statistics
never move during generator steps).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import Corpus, MelNormStats, load_mel, load_uti, preprocess_clip, standardize_mel
from .metrics import channel_r2
from .models import Discriminator, DiscriminatorArch, Generator, GeneratorArch, copy_params
from .rng import stream
from .tensor import AdamState, GradTape, Tensor, adam_step, add, mean, mul, relu, reshape, sub, transpose


class NumericError(RuntimeError):
    """A training step produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    loss_mode: str = "mse"
    mse_weight: float = 0.75
    adv_weight: float = 0.25
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    adv_form: str = "hinge"

    def validate(self) -> None:
        if self.loss_mode not in ("mse", "gan"):
            raise ValueError(f"loss_mode must be 'mse' or 'gan', got {self.loss_mode!r}")
        if self.adv_form not in ("hinge", "raw"):
            raise ValueError(f"adv_form must be 'hinge' or 'raw', got {self.adv_form!r}")
        if abs(self.mse_weight + self.adv_weight - 1.0) > 1e-12:
            raise ValueError("mse_weight + adv_weight must equal 1")
        if min(self.lr_g, self.lr_d) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be positive")


# ---------------------------------------------------------------------------
# Losses


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def hinge_d_loss(real_scores, fake_scores) -> Tensor:
    """mean(max(0, 1 - real)) + mean(max(0, 1 + fake)) over all scores."""
    real, fake = _as_tensor(real_scores), _as_tensor(fake_scores)
    return add(mean(relu(1.0 - real)), mean(relu(1.0 + fake)))


def hinge_g_adv_loss(fake_scores) -> Tensor:
    """The discriminator hinge with the fake batch labeled as real."""
    return mean(relu(1.0 - _as_tensor(fake_scores)))


def raw_g_adv_loss(fake_scores) -> Tensor:
    """Raw-score alternative: -mean(D(fake))."""
    return mean(-_as_tensor(fake_scores))


def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return mean(mul(diff, diff))


def combined_g_loss(pred, target, fake_scores, cfg: TrainConfig) -> Tensor:
    """cfg.mse_weight * MSE + cfg.adv_weight * adversarial term."""
    adv = hinge_g_adv_loss(fake_scores) if cfg.adv_form == "hinge" else raw_g_adv_loss(fake_scores)
    return add(mul(mse_loss(pred, target), cfg.mse_weight), mul(adv, cfg.adv_weight))


def mel_to_patches(mel: Tensor) -> Tensor:
    """[B, frames, mels] to the discriminator's [B, mels, frames, 1]."""
    b, t, m = mel.shape
    return reshape(transpose(mel, (0, 2, 1)), (b, m, t, 1))


# ---------------------------------------------------------------------------
# Data plumbing


@dataclass
class UttData:
    utt_id: str
    frames: np.ndarray  # [T, H, W], min-max scaled
    mel_std: np.ndarray  # [T, n_mels], standardized


def load_split_data(corpus: Corpus, split: str, stats: MelNormStats) -> list[UttData]:
    out = []
    for rec in corpus.split(split):
        clip = preprocess_clip(load_uti(corpus.path(rec, "uti")))
        mel = standardize_mel(load_mel(corpus.path(rec, "mel")), stats)
        out.append(UttData(rec["id"], clip.frames, mel.frames))
    return out


def window_index(utts: list[UttData], input_frames: int = 25) -> list[tuple[int, int]]:
    half = input_frames // 2
    pairs = []
    for u, utt in enumerate(utts):
        for center in range(half, utt.frames.shape[0] - half):
            pairs.append((u, center))
    return pairs


def assemble_batch(
    utts: list[UttData], pairs: list[tuple[int, int]], input_frames: int = 25, target_frames: int = 5
) -> tuple[Tensor, Tensor]:
    half_in = input_frames // 2
    half_out = target_frames // 2
    blocks = np.stack([utts[u].frames[c - half_in : c + half_in + 1] for u, c in pairs])
    targets = np.stack([utts[u].mel_std[c - half_out : c + half_out + 1] for u, c in pairs])
    return Tensor(blocks[..., None]), Tensor(targets)


# ---------------------------------------------------------------------------
# Training steps


def train_step_d(batch, gen: Generator, disc: Discriminator, opt_d: AdamState) -> float:
    """Discriminator update; the generator runs detached in infer mode."""
    blocks, targets = batch
    fake = gen.forward(blocks, mode="infer")  # no tape: gradients detached
    with GradTape() as tape:
        real_scores = disc.forward(mel_to_patches(targets), mode="train")
        fake_scores = disc.forward(mel_to_patches(fake), mode="train")
        loss = hinge_d_loss(real_scores, fake_scores)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("discriminator loss is not finite")
    grads = tape.gradients(loss, disc.params)
    adam_step(disc.params, grads, opt_d)
    return value


def train_step_g(
    batch, gen: Generator, disc: Discriminator | None, opt_g: AdamState, cfg: TrainConfig
) -> tuple[float, float, float | None]:
    """Generator update; the discriminator is frozen in infer mode."""
    blocks, targets = batch
    with GradTape() as tape:
        pred = gen.forward(blocks, mode="train")
        if cfg.loss_mode == "gan":
            fake_scores = disc.forward(mel_to_patches(pred), mode="infer", frozen=True)
            loss = combined_g_loss(pred, targets, fake_scores, cfg)
            adv_term = (
                hinge_g_adv_loss(fake_scores)
                if cfg.adv_form == "hinge"
                else raw_g_adv_loss(fake_scores)
            )
            g_adv = adv_term.item()
        else:
            loss = mse_loss(pred, targets)
            g_adv = None
        g_mse = mse_loss(pred, targets).item()
    value = loss.item()
    if not np.isfinite(value):
        raise NumericError("generator loss is not finite")
    grads = tape.gradients(loss, gen.params)
    adam_step(gen.params, grads, opt_g)
    return value, g_mse, g_adv


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    epoch: int
    d_loss: float | None
    g_adv: float | None
    g_mse: float
    dev_mse: float
    dev_r2: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    COLUMNS = ("epoch", "d_loss", "g_adv", "g_mse", "dev_mse", "dev_r2", "seconds")

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for r in self.records:
            cells = []
            for col in self.COLUMNS:
                value = getattr(r, col)
                cells.append("" if value is None else repr(value))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"best_epoch": self.best_epoch, "records": [r.__dict__ for r in self.records]},
            indent=1,
        )

    def comparable(self) -> list[tuple]:
        """Record tuples excluding the wall-clock column."""
        return [
            tuple(getattr(r, c) for c in self.COLUMNS if c != "seconds") for r in self.records
        ]


def evaluate_dev(gen: Generator, dev_utts: list[UttData], batch_size: int) -> tuple[float, float]:
    """Window-level MSE and mean R^2 over every dev window, fixed order."""
    pairs = window_index(dev_utts, gen.arch.input_frames)
    preds, targets = [], []
    for lo in range(0, len(pairs), batch_size):
        blocks, target = assemble_batch(dev_utts, pairs[lo : lo + batch_size], gen.arch.input_frames)
        preds.append(gen.forward(blocks, mode="infer").data.reshape(-1, gen.arch.n_mels))
        targets.append(target.data.reshape(-1, gen.arch.n_mels))
    pred = np.concatenate(preds)
    target = np.concatenate(targets)
    r2 = channel_r2(pred, target)
    return float(np.mean((pred - target) ** 2)), float(np.nanmean(r2))


def train(
    train_utts: list[UttData],
    dev_utts: list[UttData],
    cfg: TrainConfig,
    gen_arch: GeneratorArch = GeneratorArch(),
    disc_arch: DiscriminatorArch = DiscriminatorArch(),
) -> tuple[dict, TrainLog]:
    """Full optimization; returns the best-dev generator parameters and the
    per-epoch log.  Deterministic in (config, seed)."""
    cfg.validate()
    if not train_utts:
        raise ValueError("training split is empty")
    pairs = window_index(train_utts, gen_arch.input_frames)
    if not pairs:
        raise ValueError("no training windows: every clip is shorter than the input context")
    if not dev_utts or not window_index(dev_utts, gen_arch.input_frames):
        raise ValueError("dev split has no windows")

    gen = Generator.init(gen_arch, cfg.seed)
    disc = Discriminator.init(disc_arch, cfg.seed) if cfg.loss_mode == "gan" else None
    opt_g = AdamState(lr=cfg.lr_g, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    opt_d = AdamState(lr=cfg.lr_d, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    log = TrainLog()
    best_params = copy_params(gen.params)
    best_dev = np.inf
    for epoch in range(cfg.max_epochs):
        started = time.perf_counter()
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(pairs))
        d_losses, g_mses, g_advs = [], [], []
        for lo in range(0, len(order), cfg.batch_size):
            batch_pairs = [pairs[i] for i in order[lo : lo + cfg.batch_size]]
            batch = assemble_batch(train_utts, batch_pairs, gen_arch.input_frames)
            if cfg.loss_mode == "gan":
                d_losses.append(train_step_d(batch, gen, disc, opt_d))
            _, g_mse, g_adv = train_step_g(batch, gen, disc, opt_g, cfg)
            g_mses.append(g_mse)
            if g_adv is not None:
                g_advs.append(g_adv)
        dev_mse, dev_r2 = evaluate_dev(gen, dev_utts, cfg.batch_size)
        log.records.append(
            EpochRecord(
                epoch=epoch,
                d_loss=float(np.mean(d_losses)) if d_losses else None,
                g_adv=float(np.mean(g_advs)) if g_advs else None,
                g_mse=float(np.mean(g_mses)),
                dev_mse=dev_mse,
                dev_r2=dev_r2,
                seconds=time.perf_counter() - started,
            )
        )
        if dev_mse < best_dev:
            best_dev = dev_mse
            best_params = copy_params(gen.params)
            log.best_epoch = epoch
        elif epoch - log.best_epoch >= cfg.patience:
            break
    return best_params, log
