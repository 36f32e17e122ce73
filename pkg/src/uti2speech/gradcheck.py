"""Finite-difference verification of the reverse-mode gradients through
both networks, on a miniature generator/discriminator pair."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .models import MINI_DISCRIMINATOR, MINI_GENERATOR, Discriminator, Generator
from .rng import stream
from .tensor import GradTape, Tensor
from .training import TrainConfig, combined_g_loss, hinge_d_loss, mel_to_patches


@dataclass
class GradCheckResult:
    n_checked: int = 0
    max_rel_error: float = 0.0
    worst_param: str = ""
    seconds: float = 0.0
    per_loss: dict = field(default_factory=dict)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom


def _fd_gradients(loss_fn, params: dict[str, Tensor], h: float = 1e-5) -> dict[str, np.ndarray]:
    grads = {}
    for name, p in params.items():
        base = p.data.copy()
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn({**params, name: Tensor(base)})
            flat[i] = orig - h
            fm = loss_fn({**params, name: Tensor(base)})
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def run_gradcheck(seed: int = 16, batch: int = 2, h: float = 1e-5, corrupt: bool = False) -> GradCheckResult:
    """Check every parameter gradient of the discriminator hinge loss and
    of the combined generator loss against central finite differences.

    The default seed keeps every relu pre-activation, max-pool gap, and
    hinge margin well clear of its kink (minimum 5.6e-4), so the central
    differences never straddle a non-differentiable point.

    ``corrupt`` is a test hook that scales one analytic gradient by 1.01,
    simulating a broken backward rule; the check must then fail.
    """
    gen = Generator.init(MINI_GENERATOR, seed)
    disc = Discriminator.init(MINI_DISCRIMINATOR, seed)
    rng = stream(seed, "gradcheck")
    blocks = Tensor(
        rng.uniform(-1.0, 1.0, size=(batch, 25, MINI_GENERATOR.input_height, MINI_GENERATOR.input_width, 1))
    )
    targets = Tensor(rng.normal(size=(batch, 5, 80)) * 0.5)
    cfg = TrainConfig(loss_mode="gan")
    started = time.perf_counter()
    result = GradCheckResult()

    def snapshot():
        return disc.export_buffers()

    def restore(buffers):
        disc.load_buffers(buffers)

    buffers0 = snapshot()

    # --- discriminator hinge loss, generator detached ---------------------
    fake = gen.forward(blocks, mode="infer")
    real_patches = mel_to_patches(targets)
    fake_patches = mel_to_patches(fake)

    def d_loss_value(d_params):
        saved = disc.params
        disc.params = d_params
        restore(buffers0)
        try:
            real_scores = disc.forward(real_patches, mode="train")
            fake_scores = disc.forward(fake_patches, mode="train")
            return hinge_d_loss(real_scores, fake_scores).item()
        finally:
            disc.params = saved
            restore(buffers0)

    with GradTape() as tape:
        restore(buffers0)
        real_scores = disc.forward(real_patches, mode="train")
        fake_scores = disc.forward(fake_patches, mode="train")
        loss = hinge_d_loss(real_scores, fake_scores)
    restore(buffers0)
    analytic = tape.gradients(loss, disc.params)
    fd = _fd_gradients(d_loss_value, disc.params, h)
    worst = 0.0
    for name in disc.params:
        a = analytic[name].data
        if corrupt and name == "conv1.w":
            a = a * 1.01
        err = float(_rel_error(a, fd[name]).max())
        result.n_checked += a.size
        if err > worst:
            worst = err
            worst_name = f"d_loss/{name}"
    result.per_loss["hinge_d_loss"] = worst
    if worst > result.max_rel_error:
        result.max_rel_error, result.worst_param = worst, worst_name

    # --- combined generator loss through the frozen discriminator ---------
    all_params = {f"gen.{k}": v for k, v in gen.params.items()}
    all_params.update({f"disc.{k}": v for k, v in disc.params.items()})

    def g_loss_value(params):
        saved_g, saved_d = gen.params, disc.params
        gen.params = {k[4:]: v for k, v in params.items() if k.startswith("gen.")}
        disc.params = {k[5:]: v for k, v in params.items() if k.startswith("disc.")}
        try:
            pred = gen.forward(blocks, mode="train")
            scores = disc.forward(mel_to_patches(pred), mode="infer")
            return combined_g_loss(pred, targets, scores, cfg).item()
        finally:
            gen.params, disc.params = saved_g, saved_d

    with GradTape() as tape:
        pred = gen.forward(blocks, mode="train")
        scores = disc.forward(mel_to_patches(pred), mode="infer")
        loss = combined_g_loss(pred, targets, scores, cfg)
    analytic = tape.gradients(
        loss, {**{f"gen.{k}": v for k, v in gen.params.items()},
               **{f"disc.{k}": v for k, v in disc.params.items()}}
    )
    fd = _fd_gradients(g_loss_value, all_params, h)
    worst = 0.0
    for name in all_params:
        a = analytic[name].data
        err = float(_rel_error(a, fd[name]).max())
        result.n_checked += a.size
        if err > worst:
            worst = err
            worst_name = f"combined_g_loss/{name}"
    result.per_loss["combined_g_loss"] = worst
    if worst > result.max_rel_error:
        result.max_rel_error, result.worst_param = worst, worst_name

    result.seconds = time.perf_counter() - started
    return result
