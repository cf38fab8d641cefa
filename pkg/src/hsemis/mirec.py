"""Masked image reconstruction with an adversarial patch critic.

Images are ``[h, w, ch]`` arrays.  Patches are numbered row-major over the
``(h / p) x (w / p)`` grid and flattened in ``(row, col, channel)`` order.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateMaskError, ShapeError
from .nn import functional as F
from .nn.layers import (
    BatchNorm, Conv2d, ConvTranspose2d, InstanceNorm, Module, SeparableConv2d, lrelu,
)
from .nn.optim import Adam
from .nn.tensor import Tensor, as_tensor, concat, no_grad, relu, sigmoid

log = logging.getLogger(__name__)


# -- patches and masks -----------------------------------------------------------------

def positional_encoding(n_patches: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding over patch index, shape ``[n_patches, dim]``."""
    pos = np.arange(n_patches)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass
class PatchSet:
    patch_size: int
    patches: np.ndarray  # [N_p, p*p*ch]
    positional_encodings: np.ndarray  # same shape
    source_dims: tuple[int, int, int]

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    @property
    def encoded(self) -> np.ndarray:
        return self.patches + self.positional_encodings

    @property
    def grid(self) -> tuple[int, int]:
        h, w, _ = self.source_dims
        return h // self.patch_size, w // self.patch_size


def patchify(image, p: int) -> PatchSet:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w, ch = image.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"image {h}x{w} is not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = image.reshape(gh, p, gw, p, ch).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * ch)
    return PatchSet(p, patches, positional_encoding(gh * gw, p * p * ch), (h, w, ch))


def unpatchify(patches, p: int, dims: tuple[int, int, int]) -> np.ndarray:
    h, w, ch = dims
    gh, gw = h // p, w // p
    patches = np.asarray(patches)
    if patches.shape != (gh * gw, p * p * ch):
        raise ShapeError(f"expected {(gh * gw, p * p * ch)} patches, got {patches.shape}")
    return patches.reshape(gh, gw, p, p, ch).transpose(0, 2, 1, 3, 4).reshape(h, w, ch)


@dataclass(frozen=True)
class MaskPlan:
    masked_indices: np.ndarray
    visible_indices: np.ndarray
    ratio: float
    seed: int

    @property
    def n_patches(self) -> int:
        return len(self.masked_indices) + len(self.visible_indices)

    def mask_vector(self) -> np.ndarray:
        m = np.zeros(self.n_patches, dtype=bool)
        m[self.masked_indices] = True
        return m


def mask_count(n_patches: int, ratio: float) -> int:
    return int(np.floor(ratio * n_patches + 0.5))


def sample_mask(n_patches: int, ratio: float, seed: int) -> MaskPlan:
    """Mask ``round(ratio * n_patches)`` patch indices drawn uniformly without replacement."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_patches < 2:
        raise ValueError("need at least two patches")
    n_masked = mask_count(n_patches, ratio)
    if n_masked in (0, n_patches):
        raise DegenerateMaskError(f"ratio {ratio} masks {n_masked} of {n_patches} patches")
    perm = np.random.default_rng(seed).permutation(n_patches)
    return MaskPlan(np.sort(perm[:n_masked]), np.sort(perm[n_masked:]), ratio, seed)


def _mask_image(plan: MaskPlan, p: int, dims: tuple[int, int, int]) -> np.ndarray:
    h, w, ch = dims
    gh, gw = h // p, w // p
    grid = plan.mask_vector().reshape(gh, gw).astype(np.float64)
    return np.repeat(np.repeat(grid, p, axis=0), p, axis=1)[..., None] * np.ones(ch)


def repair(visible: PatchSet, reconstructed, plan: MaskPlan) -> np.ndarray:
    """Splice reconstructed patches into the masked slots; visible slots stay bit-exact."""
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if reconstructed.shape != (len(plan.masked_indices), visible.patches.shape[1]):
        raise ValueError(
            f"{reconstructed.shape[0] if reconstructed.ndim else 0} reconstructions for "
            f"{len(plan.masked_indices)} masked patches"
        )
    if plan.n_patches != visible.n_patches:
        raise ValueError("plan does not match the patch grid")
    patches = visible.patches.copy()
    patches[plan.masked_indices] = reconstructed
    return unpatchify(patches, visible.patch_size, visible.source_dims)


# -- networks -------------------------------------------------------------------------

def _patch_rows(x: Tensor, p: int) -> Tensor:
    """``[B, h, w, ch]`` -> ``[B, N_p, p*p*ch]`` (differentiable)."""
    b, h, w, ch = x.shape
    gh, gw = h // p, w // p
    return x.reshape(b, gh, p, gw, p, ch).transpose(0, 1, 3, 2, 4, 5).reshape(b, gh * gw, p * p * ch)


class EncoderBlock(Module):
    """Separable-conv residual block that halves resolution."""

    def __init__(self, rng, c_in: int, c_out: int):
        self.conv1 = SeparableConv2d(rng, c_in, c_out, stride=2)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = SeparableConv2d(rng, c_out, c_out)
        self.bn2 = BatchNorm(c_out)
        self.skip = Conv2d(rng, c_in, c_out, k=1, stride=2, padding=0)

    def forward(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return relu(h + self.skip(x))


class DecoderBlock(Module):
    """Upsample, gate the encoder skip, concatenate, refine."""

    def __init__(self, rng, c_in: int, c_skip: int, c_out: int):
        self.up = ConvTranspose2d(rng, c_in, c_out)
        self.gate_up = Conv2d(rng, c_out, c_skip, k=1)
        self.gate_skip = Conv2d(rng, c_skip, c_skip, k=1)
        self.conv = Conv2d(rng, c_skip + c_out, c_out)
        self.bn = BatchNorm(c_out)
        self.proj = Conv2d(rng, c_skip + c_out, c_out, k=1)

    def forward(self, x, skip):
        up = self.up(x)
        attended = sigmoid(self.gate_up(up) + self.gate_skip(skip)) * skip
        fused = concat([attended, up], axis=-1)
        return relu(self.bn(self.conv(fused)) + self.proj(fused))


class ReconstructionGenerator(Module):
    def __init__(self, rng: np.random.Generator, image_size: int = 32, channels: int = 1,
                 patch_size: int = 8, widths=(16, 32, 64, 128, 256)):
        if image_size % (2 ** len(widths)):
            raise ValueError(f"image size {image_size} cannot be halved {len(widths)} times")
        self.image_size = image_size
        self.channels = channels
        self.patch_size = patch_size
        self.widths = tuple(widths)
        dim = patch_size * patch_size * channels
        self.mask_token = Tensor(rng.normal(0.0, 0.02, dim), requires_grad=True)
        enc_in = (channels,) + self.widths[:-1]
        self.encoder = [EncoderBlock(rng, a, b) for a, b in zip(enc_in, self.widths)]
        # decoder k = 5..1: input width_k, skip F_e^{k-1}, output width_{k-1} (16 for k=1)
        dec = []
        for k in range(len(self.widths), 0, -1):
            c_in = self.widths[k - 1]
            c_skip = enc_in[k - 1]
            c_out = self.widths[k - 2] if k >= 2 else self.widths[0]
            dec.append(DecoderBlock(rng, c_in, c_skip, c_out))
        self.decoder = dec
        self.head = Conv2d(rng, self.widths[0], channels, k=1)
        n_p = (image_size // patch_size) ** 2
        self._pe_image = unpatchify(positional_encoding(n_p, dim), patch_size,
                                    (image_size, image_size, channels))

    def masked_input(self, images: np.ndarray, mask_images: np.ndarray) -> Tensor:
        """Visible pixels plus the learned token in masked slots, with positional encoding."""
        b, h, w, ch = images.shape
        p = self.patch_size
        visible = images * (1.0 - mask_images) + self._pe_image
        token = self.mask_token.reshape(1, 1, p, 1, p, ch)
        m6 = mask_images.reshape(b, h // p, p, w // p, p, ch)
        return (m6 * token).reshape(b, h, w, ch) + visible

    def forward(self, images: np.ndarray, mask_images: np.ndarray) -> Tensor:
        x = self.masked_input(images, mask_images)
        feats = [x]
        for block in self.encoder:
            feats.append(block(feats[-1]))
        d = feats[-1]
        for i, block in enumerate(self.decoder):
            d = block(d, feats[len(self.encoder) - 1 - i])
        return self.head(d)

    def encode(self, images: np.ndarray) -> Tensor:
        """Global-average bottleneck features of unmasked images, ``[B, widths[-1]]``."""
        x = self.masked_input(images, np.zeros_like(images))
        for block in self.encoder:
            x = block(x)
        return x.mean(axis=(1, 2))


class ReconstructionDiscriminator(Module):
    """Five conv / instance-norm / leaky-ReLU blocks and a per-patch sigmoid head."""

    def __init__(self, rng: np.random.Generator, channels: int = 1, patch_size: int = 8,
                 widths=(16, 32, 64, 64, 64)):
        n_down = int(round(np.log2(patch_size)))
        if 2**n_down != patch_size or n_down > len(widths):
            raise ValueError(f"patch size {patch_size} must be a power of two <= 2**{len(widths)}")
        c_in = (channels,) + tuple(widths[:-1])
        self.convs = [Conv2d(rng, a, b, stride=2 if i < n_down else 1)
                      for i, (a, b) in enumerate(zip(c_in, widths))]
        self.norms = [InstanceNorm(b) for b in widths]
        self.head = Conv2d(rng, widths[-1], 1, k=1)

    def forward(self, images) -> Tensor:
        """``[B, h, w, ch]`` -> ``[B, N_p]`` probabilities that each patch is real."""
        h = as_tensor(images)
        for conv, norm in zip(self.convs, self.norms):
            h = lrelu(norm(conv(h)))
        out = sigmoid(self.head(h))
        return out.reshape(out.shape[0], -1)


def generator_forward(gen: ReconstructionGenerator, visible: PatchSet, plan: MaskPlan) -> np.ndarray:
    """Reconstruct the masked patches of one image, ``[len(masked), p*p*ch]``."""
    if plan.n_patches != visible.n_patches:
        raise ValueError("plan does not match the patch grid")
    p, dims = visible.patch_size, visible.source_dims
    # masked content never reaches the network: zero it before building the input
    patches = visible.patches.copy()
    patches[plan.masked_indices] = 0.0
    image = unpatchify(patches, p, dims)[None]
    was_training = gen.training
    gen.eval()
    with no_grad():
        out = gen(image, _mask_image(plan, p, dims)[None])
    gen.train(was_training)
    return _patch_rows(out, p).data[0, plan.masked_indices]


# -- losses ---------------------------------------------------------------------------

def generator_loss(d_out_on_fake, reconstructed, original, alpha: float = 1.0) -> Tensor:
    """``BCE(d_fake, 1) + alpha * mean|reconstructed - original|``."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    return F.loss_bce(d_out_on_fake, 1.0) + F.loss_l1(reconstructed, original) * alpha


def discriminator_loss(d_out_on_real, d_out_on_fake, alpha: float = 1.0) -> Tensor:
    """``0.5 * BCE(d_real, 1) + alpha * 0.5 * BCE(d_fake, 0)``; alpha weights only the fake term."""
    return F.loss_bce(d_out_on_real, 1.0) * 0.5 + F.loss_bce(d_out_on_fake, 0.0) * (0.5 * alpha)


def mirec_total_loss(gen_loss, dis_loss):
    return gen_loss + dis_loss


# -- training ------------------------------------------------------------------------

@dataclass
class MirecConfig:
    mask_ratio: float = 0.75
    alpha: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 3e-4
    patch_size: int = 8
    seed: int = 0


@dataclass
class MirecResult:
    generator: ReconstructionGenerator
    discriminator: ReconstructionDiscriminator
    reconstructions: np.ndarray
    history: list[dict] = field(default_factory=list)
    eval_l1: list[tuple[int, float]] = field(default_factory=list)  # (steps taken, masked L1)

    def history_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "gen_loss", "dis_loss", "l1"])
        for row in self.history:
            writer.writerow([row["step"], repr(row["gen_loss"]), repr(row["dis_loss"]), repr(row["l1"])])
        return buf.getvalue()


def _mask_seed(base: int, *keys: int) -> int:
    return int(np.random.SeedSequence([base, *keys]).generate_state(1)[0])


def _plans_and_masks(n: int, n_patches: int, ratio: float, p: int, dims, seed: int, keys):
    plans = [sample_mask(n_patches, ratio, _mask_seed(seed, *k)) for k in keys]
    masks = np.stack([_mask_image(pl, p, dims) for pl in plans])
    return plans, masks


def masked_l1(gen: ReconstructionGenerator, images: np.ndarray, ratio: float, seed: int) -> float:
    """Mean absolute error over masked pixels, masks fixed by ``seed``.

    Batch norm uses the statistics of ``images`` themselves, so the value does
    not depend on how far the running averages have converged; the running
    buffers are left untouched.
    """
    n, h, w, ch = images.shape
    p = gen.patch_size
    n_p = (h // p) * (w // p)
    _, masks = _plans_and_masks(n, n_p, ratio, p, (h, w, ch), seed, [(1, i) for i in range(n)])
    saved = {name: buf.copy() for name, buf in gen.named_buffers()}
    was = gen.training
    gen.train()
    try:
        with no_grad():
            out = gen(images, masks).data
    finally:
        for name, buf in gen.named_buffers():
            buf[...] = saved[name]
        gen.train(was)
    return float(np.abs(out - images)[masks > 0].mean())


def reconstruct_images(gen: ReconstructionGenerator, images: np.ndarray, ratio: float, seed: int,
                       batch_size: int = 64) -> np.ndarray:
    """Repair every image with a seed-derived mask; visible pixels are copied verbatim."""
    n, h, w, ch = images.shape
    p = gen.patch_size
    n_p = (h // p) * (w // p)
    out = np.empty_like(images)
    gen.eval()
    for start in range(0, n, batch_size):
        idx = range(start, min(n, start + batch_size))
        _, masks = _plans_and_masks(len(idx), n_p, ratio, p, (h, w, ch), seed, [(2, i) for i in idx])
        batch = images[start:start + len(idx)]
        with no_grad():
            pred = gen(batch, masks).data
        out[start:start + len(idx)] = np.where(masks > 0, pred, batch)
    gen.train()
    return out


def train_mirec(images, config: MirecConfig | None = None, eval_images=None, eval_every: int = 200) -> MirecResult:
    """Alternate generator and discriminator Adam steps, then repair every input.

    With ``eval_images`` the masked L1 on those images (fixed masks) is
    recorded before training and after every ``eval_every`` steps.
    """
    config = config or MirecConfig()
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    if len(images) == 0:
        raise DataError("train_mirec needs at least one image")
    n, h, w, ch = images.shape
    p = config.patch_size
    n_p = (h // p) * (w // p)
    root = np.random.SeedSequence(config.seed)
    g_seed, d_seed, b_seed = root.spawn(3)
    gen = ReconstructionGenerator(np.random.default_rng(g_seed), h, ch, p)
    dis = ReconstructionDiscriminator(np.random.default_rng(d_seed), ch, p)
    g_opt = Adam(gen.parameters(), config.lr, config.weight_decay)
    d_opt = Adam(dis.parameters(), config.lr, config.weight_decay)
    batch_rng = np.random.default_rng(b_seed)
    history = []
    eval_l1 = []
    if eval_images is not None:
        eval_images = np.asarray(eval_images, dtype=np.float64)
        eval_l1.append((0, masked_l1(gen, eval_images, config.mask_ratio, config.seed)))
    for step in range(config.steps):
        idx = batch_rng.choice(n, size=min(config.batch_size, n), replace=n < config.batch_size)
        batch = images[idx]
        plans, masks = _plans_and_masks(len(idx), n_p, config.mask_ratio, p, (h, w, ch), config.seed,
                                        [(0, step, j) for j in range(len(idx))])
        sel = np.nonzero(np.stack([pl.mask_vector() for pl in plans]))  # into [B, N_p]

        # generator update
        out = gen(batch, masks)
        x_rep = out * masks + batch * (1.0 - masks)
        recon_rows = _patch_rows(out, p)[sel]
        target_rows = _patch_rows(Tensor(batch), p).data[sel]
        d_fake = dis(x_rep)[sel]
        g_loss = generator_loss(d_fake, recon_rows, target_rows, config.alpha)
        l1 = float(np.abs(recon_rows.data - target_rows).mean())
        g_opt.zero_grad()
        d_opt.zero_grad()
        g_loss.backward()
        g_opt.step()

        # discriminator update on the same repaired images, generator frozen
        d_opt.zero_grad()
        x_rep_fixed = x_rep.data
        d_real = dis(batch)[sel]
        d_fake2 = dis(x_rep_fixed)[sel]
        d_loss = discriminator_loss(d_real, d_fake2, config.alpha)
        d_loss.backward()
        d_opt.step()

        history.append({"step": step, "gen_loss": g_loss.item(), "dis_loss": d_loss.item(), "l1": l1})
        if step % 200 == 0:
            log.info("mirec step %d gen %.4f dis %.4f l1 %.4f", step, g_loss.item(), d_loss.item(), l1)
        if eval_images is not None and ((step + 1) % eval_every == 0 or step == config.steps - 1):
            eval_l1.append((step + 1, masked_l1(gen, eval_images, config.mask_ratio, config.seed)))

    recon = reconstruct_images(gen, images, config.mask_ratio, config.seed)
    return MirecResult(gen, dis, recon, history, eval_l1)
