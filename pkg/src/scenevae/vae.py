"""Convolutional VAE whose posterior means serve as global image descriptors.

The encoder is a stack of stride-2 ``conv -> batchnorm -> leaky relu``
blocks followed by two linear heads for the posterior mean and log-variance.
The decoder mirrors it with stride-2 transposed convolutions and ends in a
3x3 convolution plus sigmoid, so reconstructions live in [0, 1].

Training minimizes

    recon_weight * ||x - x_hat||^2  +  KL(q(z|x) || N(0, I))  [+ DIP penalty]

per image, averaged over the batch. The DIP penalty pushes the batch
covariance of the posterior means towards the identity.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, LeakyReLU, Linear, Module, reparameterize
from .optim import Adam
from .rng import Rng
from .tensor import (NumericError, ShapeError, Tensor, exp, matmul, mean, no_grad, reset_tape, sigmoid, square,
                     transpose, tsum)

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "dip")


def default_channels(image_size: int):
    if image_size == 128:
        return [32, 64, 128, 256, 512, 512]
    return [32, 64, 128, 256, 512]


@dataclass
class VaeConfig:
    image_size: int = 64
    latent_dim: int = 128
    channel_schedule: list = None
    variant: str = "dip"
    lambda_d: float = 50.0
    lambda_od: float = 5.0
    recon_weight: float = 1.0
    in_channels: int = 3
    slope: float = 0.01
    n_samples: int = 1

    def __post_init__(self):
        if self.channel_schedule is None:
            self.channel_schedule = default_channels(self.image_size)
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lambda_d < 0 or self.lambda_od < 0:
            raise ValueError("DIP weights must be non-negative")
        size = self.image_size
        if size < 1 or size & (size - 1):
            raise ValueError(f"image_size must be a power of two, got {size}")
        if not self.channel_schedule or size < 2 ** len(self.channel_schedule):
            raise ValueError(f"image_size {size} too small for {len(self.channel_schedule)} stride-2 blocks")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    @property
    def bottleneck_size(self):
        return self.image_size >> len(self.channel_schedule)


@dataclass
class TrainConfig:
    learning_rate: float = 0.005
    max_epochs: int = 500
    patience: int = 100
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm)")


@dataclass
class LatentCode:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


@dataclass
class LossBreakdown:
    recon: float
    kl: float
    dip: float
    total: float


class _Block(Module):
    def __init__(self, conv, ch, slope):
        self.conv = conv
        self.bn = BatchNorm2d(ch)
        self.act = LeakyReLU(slope)

    def __call__(self, x):
        return self.act(self.bn(self.conv(x)))


class VAE(Module):
    def __init__(self, config: VaeConfig, seed: int = 0):
        self.config = config
        rng = Rng(seed, "init")
        chans = config.channel_schedule
        slope = config.slope

        self.encoder = []
        prev = config.in_channels
        for c in chans:
            self.encoder.append(_Block(Conv2d(prev, c, 3, 2, 1, bias=False, rng=rng), c, slope))
            prev = c
        s = config.bottleneck_size
        flat = chans[-1] * s * s
        self.fc_mu = Linear(flat, config.latent_dim, rng=rng)
        self.fc_logvar = Linear(flat, config.latent_dim, rng=rng)

        self.fc_dec = Linear(config.latent_dim, flat, rng=rng)
        self.decoder = []
        for c_in, c_out in zip(chans[::-1], chans[::-1][1:]):
            self.decoder.append(_Block(ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False, rng=rng), c_out, slope))
        self.decoder.append(_Block(ConvTranspose2d(chans[0], chans[0], 4, 2, 1, bias=False, rng=rng),
                                   chans[0], slope))
        self.out_conv = Conv2d(chans[0], config.in_channels, 3, 1, 1, rng=rng)

    def encode_t(self, x: Tensor):
        """Posterior parameters ``(mu, logvar)`` for a [N,C,H,W] batch."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise ShapeError(
                f"encode: expected [N,{cfg.in_channels},{cfg.image_size},{cfg.image_size}], got {x.shape}")
        h = x
        for block in self.encoder:
            h = block(h)
        h = h.reshape(h.shape[0], -1)
        return self.fc_mu(h), self.fc_logvar(h)

    def decode_t(self, z: Tensor):
        cfg = self.config
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeError(f"decode: expected [N,{cfg.latent_dim}] latents, got {z.shape}")
        s = cfg.bottleneck_size
        h = self.fc_dec(z).reshape(z.shape[0], cfg.channel_schedule[-1], s, s)
        for block in self.decoder:
            h = block(h)
        return sigmoid(self.out_conv(h))

    def encode_batch(self, images, batch_size=64):
        """Inference-mode ``(mu, logvar)`` arrays for a stack of images."""
        images = np.asarray(images)
        was_training = self.training
        self.eval()
        mus, logvars = [], []
        try:
            with no_grad():
                for i in range(0, len(images), batch_size):
                    mu, lv = self.encode_t(Tensor(images[i:i + batch_size]))
                    mus.append(mu.data)
                    logvars.append(lv.data)
        finally:
            self.train(was_training)
        if not mus:
            d = self.config.latent_dim
            return np.zeros((0, d), np.float32), np.zeros((0, d), np.float32)
        return np.concatenate(mus), np.concatenate(logvars)

    def decode_batch(self, z):
        z = np.asarray(z)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                return self.decode_t(Tensor(z)).data
        finally:
            self.train(was_training)


def encode(image, model: VAE) -> LatentCode:
    """Descriptor for one [C,H,W] image in [0, 1]; ``z`` is the posterior mean."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"encode: expected a [C,H,W] image, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("encode: pixel values must lie in [0, 1]")
    mu, logvar = model.encode_batch(image[None])
    return LatentCode(mu=mu[0], logvar=logvar[0], z=mu[0].copy())


def decode(z, model: VAE) -> np.ndarray:
    z = np.asarray(z)
    if z.ndim != 1 or z.shape[0] != model.config.latent_dim:
        raise ShapeError(f"decode: expected latent of length {model.config.latent_dim}, got shape {z.shape}")
    return model.decode_batch(z[None].astype(np.float32))[0]


# ---------------------------------------------------------------------------
# loss terms


def kl_standard_normal(mu: Tensor, logvar: Tensor) -> Tensor:
    """Batch-mean of ``0.5 * sum_d(mu^2 + exp(logvar) - 1 - logvar)``."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"kl: mu {mu.shape} and logvar {logvar.shape} differ")
    n = mu.shape[0] if mu.ndim > 1 else 1
    per = square(mu) + exp(logvar) - logvar - 1.0
    return tsum(per) * (0.5 / n)


def batch_covariance(mu: Tensor) -> Tensor:
    """Covariance of the rows of ``mu`` [N,D], normalized by N."""
    centered = mu - mean(mu, axis=0)
    return matmul(transpose(centered), centered) * (1.0 / mu.shape[0])


def dip_penalty(mu: Tensor, lambda_d: float, lambda_od: float) -> Tensor:
    """``lambda_od * sum_{i!=j} C_ij^2 + lambda_d * sum_i (C_ii - 1)^2`` with C = Cov(mu)."""
    if mu.ndim != 2 or mu.shape[0] < 2:
        raise ShapeError(f"dip_penalty: need a [N>=2, D] batch, got {mu.shape}")
    d = mu.shape[1]
    cov = batch_covariance(mu)
    eye = np.eye(d, dtype=mu.dtype)
    off = cov * (1.0 - eye)
    diag = tsum(cov * eye, axis=0)
    return tsum(square(off)) * float(lambda_od) + tsum(square(diag - 1.0)) * float(lambda_d)


def recon_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"recon: input {x.shape} and reconstruction {x_hat.shape} differ")
    return tsum(square(x_hat - x)) * (1.0 / x.shape[0])


def vae_loss(x, model: VAE, rng: Rng):
    """Total loss tensor and its :class:`LossBreakdown` for batch ``x``."""
    cfg = model.config
    x = x if isinstance(x, Tensor) else Tensor(x)
    mu, logvar = model.encode_t(x)
    recon = None
    for _ in range(cfg.n_samples):
        eps = rng.normal(mu.shape, dtype=mu.dtype)
        term = recon_loss(x, model.decode_t(reparameterize(mu, logvar, eps)))
        recon = term if recon is None else recon + term
    if cfg.n_samples > 1:
        recon = recon * (1.0 / cfg.n_samples)
    kl = kl_standard_normal(mu, logvar)
    total = recon * float(cfg.recon_weight) + kl
    dip_val = 0.0
    if cfg.variant == "dip":
        dip = dip_penalty(mu, cfg.lambda_d, cfg.lambda_od)
        total = total + dip
        dip_val = dip.item()
    parts = LossBreakdown(recon=recon.item(), kl=kl.item(), dip=dip_val, total=total.item())
    return total, parts


# ---------------------------------------------------------------------------
# training


class TrainingError(RuntimeError):
    pass


class EarlyStopping:
    """Stop once ``patience`` epochs have passed without a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0

    def step(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience

    @property
    def improved(self):
        return self.best_epoch == self.epoch


@dataclass
class TrainResult:
    model: VAE
    history: list = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    best_val: float = math.inf


def fit(train_epoch, validate, max_epochs, patience, on_improve=None):
    """Generic epoch loop with early stopping on validation loss.

    ``train_epoch(epoch)`` returns the mean training loss, ``validate(epoch)``
    the validation loss. Returns ``(history, stopper)``.
    """
    stopper = EarlyStopping(patience)
    history = []
    for epoch in range(1, max_epochs + 1):
        train_loss = train_epoch(epoch)
        val_loss = validate(epoch)
        history.append({"epoch": epoch, "train": float(train_loss), "val": float(val_loss)})
        stop = stopper.step(val_loss)
        if stopper.improved and on_improve is not None:
            on_improve(epoch)
        if stop:
            break
    return history, stopper


def _batches(order, batch_size):
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def split_validation(n, fraction, seed):
    """Seeded (train_idx, val_idx) hold-out with at least two validation images."""
    if n < 4:
        raise TrainingError(f"need at least 4 images to hold out validation data, got {n}")
    n_val = min(n - 2, max(2, int(round(n * fraction))))
    perm = Rng(seed, "val-split").permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train_vae(images, vae_config: VaeConfig, train_config: TrainConfig, val_images=None, model=None):
    """Train on a [N,C,H,W] float array in [0, 1].

    Without ``val_images`` a seeded ``val_fraction`` of ``images`` is held
    out. The returned model carries the best-validation weights.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or len(images) == 0:
        raise TrainingError("empty or malformed training set")
    tc = train_config
    if val_images is None:
        tr_idx, va_idx = split_validation(len(images), tc.val_fraction, tc.seed)
        train_x, val_x = images[tr_idx], images[va_idx]
    else:
        train_x, val_x = images, np.asarray(val_images, dtype=np.float32)
    if len(train_x) < 2 or len(val_x) < 2:
        raise TrainingError("need at least two training and two validation images")

    model = model or VAE(vae_config, seed=tc.seed)
    model.train()
    opt = Adam(model.parameters(), lr=tc.learning_rate, beta1=tc.beta1, beta2=tc.beta2, eps=tc.eps)
    shuffle_rng = Rng(tc.seed, "shuffle")
    noise_rng = Rng(tc.seed, "reparam")
    best = {}

    def train_epoch(epoch):
        order = shuffle_rng.permutation(len(train_x))
        total, count = 0.0, 0
        for bi, idx in enumerate(_batches(order, tc.batch_size)):
            opt.zero_grad()
            try:
                loss, parts = vae_loss(train_x[idx], model, noise_rng)
                loss.backward()
            except NumericError as exc:
                reset_tape()
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}: {exc}") from exc
            if not math.isfinite(parts.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            opt.step()
            total += parts.total * len(idx)
            count += len(idx)
        return total / count

    def validate(epoch):
        model.eval()
        try:
            with no_grad():
                _, parts = vae_loss(val_x, model, Rng(tc.seed, "val-noise"))
        finally:
            model.train()
        log.info("epoch %d val %.4f", epoch, parts.total)
        return parts.total

    def on_improve(epoch):
        best["state"] = copy.deepcopy(model.state_dict())

    history, stopper = fit(train_epoch, validate, tc.max_epochs, tc.patience, on_improve)
    model.load_state_dict(best["state"])
    model.eval()
    return TrainResult(model=model, history=history, best_epoch=stopper.best_epoch,
                       epochs_run=len(history), best_val=stopper.best)


def latent_traverse(z, dim: int, values, model: VAE, path=None) -> np.ndarray:
    """Decode copies of ``z`` with ``z[dim]`` set to each value; tiles left to right.

    Returns a [C, H, W * len(values)] image, also written to ``path`` if given.
    """
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 1 or z.shape[0] != model.config.latent_dim:
        raise ShapeError(f"latent_traverse: latent must have length {model.config.latent_dim}")
    if not 0 <= dim < z.shape[0]:
        raise IndexError(f"latent_traverse: dim {dim} out of range [0, {z.shape[0]})")
    values = list(values)
    if not values:
        raise ValueError("latent_traverse: no values")
    zs = np.repeat(z[None], len(values), axis=0)
    zs[:, dim] = values
    tiles = model.decode_batch(zs)
    grid = np.concatenate(list(tiles), axis=2)
    if path is not None:
        from .dataset import write_image
        write_image(path, grid)
    return grid


# ---------------------------------------------------------------------------
# persistence


def save_vae(model: VAE, path, extra=None):
    meta = {"kind": "vae", "config": asdict(model.config)}
    if extra:
        meta.update(extra)
    checkpoint.save(path, model.state_dict(), meta)


def load_vae(path) -> VAE:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "vae":
        raise checkpoint.FormatError(f"{path}: not a VAE checkpoint (kind={meta.get('kind')!r})")
    model = VAE(VaeConfig(**meta["config"]))
    model.load_state_dict(tensors)
    model.eval()
    return model
