"""Self-supervised denoiser: network, two-term subsampling loss, training loop.

For a noisy image y with neighbour pair (g1, g2) and recorded cell choices:

    out     = f(g1)
    loss1   = mean((out - g2)^2)
    sub*    = s1(f(y)) - s2(f(y))          # same choices, no gradient
    loss2   = mean((out - g2 - sub*)^2)
    total   = loss1 + gamma * loss2

Means run over sub-grid pixels whose two source pixels are both valid.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, NumericError
from .image import ImageF
from .subsampler import CellChoices, draw_choices

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADNCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    levels: int = 3
    channels: int = 32
    kernel: int = 3
    slope: float = 0.1

    def __post_init__(self):
        if self.levels < 1 or self.channels < 1:
            raise DataError("levels and channels must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise DataError("kernel size must be odd")


@dataclass
class TrainConfig:
    split_ratio: float = 0.8
    epochs: int = 10
    steps_per_epoch: int = 100
    lr: float = 3e-4
    batch_size: int = 4
    gamma: float = 1.0
    gamma_ramp: bool = False
    seed: int = 0
    patch_size: int = 128
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.5 <= self.split_ratio <= 1.0:
            raise DataError(f"split ratio M must lie in [0.5, 1], got {self.split_ratio}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise DataError("epochs must be >= 0; steps per epoch and batch size >= 1")
        if self.lr <= 0:
            raise DataError("learning rate must be > 0")
        if self.gamma < 0:
            raise DataError("gamma must be >= 0")
        if self.patch_size < 2:
            raise DataError("patch size must be >= 2")

    def gamma_at(self, step: int) -> float:
        """Constant gamma, or a linear 0 -> gamma ramp over the first half."""
        if not self.gamma_ramp:
            return self.gamma
        half = 0.5 * self.epochs * self.steps_per_epoch
        return self.gamma * min(1.0, step / half) if half > 0 else self.gamma


@dataclass
class LossBreakdown:
    loss1: float
    loss2: float
    total: float
    gamma: float
    sub_star: ImageF | None = None


class UNet(nn.Module):
    """Encoder-decoder with skip concatenations and a linear 1x1 head.

    Level i (0 = full resolution) has ``channels * 2**i`` feature maps and two
    convolutions; decoding upsamples by nearest neighbour and concatenates the
    matching encoder output.
    """

    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        c, k = arch.channels, arch.kernel

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, k, padding=k // 2),
                nn.LeakyReLU(arch.slope),
                nn.Conv2d(cout, cout, k, padding=k // 2),
                nn.LeakyReLU(arch.slope),
            )

        widths = [c * 2**i for i in range(arch.levels + 1)]
        self.encoders = nn.ModuleList(
            block(1 if i == 0 else widths[i - 1], widths[i]) for i in range(arch.levels + 1)
        )
        self.decoders = nn.ModuleList(
            block(widths[i + 1] + widths[i], widths[i]) for i in range(arch.levels)
        )
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        skips = []
        for i, enc in enumerate(self.encoders):
            if i:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        for i in reversed(range(self.arch.levels)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.decoders[i](torch.cat([x, skips[i]], dim=1))
        return self.head(x)


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


@dataclass
class DenoiserModel:
    arch: ArchSpec
    net: nn.Module
    optimizer: torch.optim.Optimizer | None
    gamma: float = 1.0
    seed: int = 0
    dtype: torch.dtype = torch.float32
    meta: dict = field(default_factory=dict)

    @property
    def multiple(self) -> int:
        return 2**self.arch.levels

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    def parameters_vector(self) -> np.ndarray:
        parts = [p.detach().cpu().numpy().ravel() for p in self.net.parameters()]
        return np.concatenate(parts).astype(np.float64) if parts else np.zeros(0)


def _init_weights(net: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                std = np.sqrt(2.0 / fan_in)
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) * std)
                if mod.bias is not None:
                    mod.bias.zero_()


def build_model(
    arch: ArchSpec | None = None,
    seed: int = 0,
    gamma: float = 1.0,
    lr: float = 3e-4,
    dtype: torch.dtype = torch.float32,
) -> DenoiserModel:
    arch = arch or ArchSpec()
    net = UNet(arch)
    _init_weights(net, seed)
    net = net.to(dtype)
    opt = torch.optim.Adam(net.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    return DenoiserModel(arch, net, opt, gamma=gamma, seed=seed, dtype=dtype, meta={"step": 0})


def run_net(model: DenoiserModel, x: torch.Tensor) -> torch.Tensor:
    """Apply the network to an (N, 1, H, W) tensor of any size >= 1x1.

    Input is padded at the bottom/right to a multiple of 2**levels (reflect
    where the image is large enough, replicate otherwise) and cropped back.
    """
    h, w = x.shape[-2:]
    m = model.multiple
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(x, (0, pw, 0, ph), mode=mode)
    y = model.net(x)
    return y[..., :h, :w]


def _to_tensor(model: DenoiserModel, arrays: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.as_tensor(np.stack(arrays)[:, None], dtype=model.dtype)


def forward(model: DenoiserModel, img: ImageF, train: bool = False) -> ImageF:
    """Denoise one single-channel image.

    In inference mode (default) gradients are off and the output is clamped to
    [0, 1]. ``train=True`` returns the raw (unclamped) head output.
    """
    if img.channels != 1:
        raise DataError("the denoiser expects a single-channel image")
    x = _to_tensor(model, [img.data])
    with torch.no_grad():
        y = run_net(model, x)[0, 0].double().numpy()
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite activations in forward pass")
    if not train:
        y = np.clip(y, 0.0, 1.0)
    return img.with_data(y)


def denoise(model: DenoiserModel, img: ImageF) -> ImageF:
    """Full-image inference; output has the input's size and mask."""
    if img.height < 2 or img.width < 2:
        raise DataError("image must be at least 2x2")
    was_training = model.net.training
    model.net.eval()
    try:
        return forward(model, img)
    finally:
        model.net.train(was_training)


# ------------------------------------------------------------------ loss


def _gather(x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    """x (N, 1, H, W), pos (N, H//2, W//2) in 0..3 -> (N, 1, H//2, W//2)."""
    n, _, h, w = x.shape
    h2, w2 = h // 2, w // 2
    c = x[:, 0, : 2 * h2, : 2 * w2].reshape(n, h2, 2, w2, 2).permute(0, 1, 3, 2, 4)
    c = c.reshape(n, h2, w2, 4)
    return torch.gather(c, 3, pos.long().unsqueeze(-1)).squeeze(-1).unsqueeze(1)


def _batch_loss(
    model: DenoiserModel,
    noisy: torch.Tensor,
    valid: torch.Tensor,
    choices: Sequence[CellChoices],
    gamma: float,
    sub_star: torch.Tensor | None = None,
):
    first = torch.as_tensor(np.stack([c.first for c in choices]))
    second = torch.as_tensor(np.stack([c.second for c in choices]))
    g1 = _gather(noisy, first)
    g2 = _gather(noisy, second)
    vmask = (_gather(valid, first) * _gather(valid, second)).to(noisy.dtype)
    counts = vmask.sum(dim=(1, 2, 3))
    if torch.any(counts == 0):
        raise DataError("a training sample has no valid pixel pairs")

    out = run_net(model, g1)
    if sub_star is None:
        with torch.no_grad():
            fy = run_net(model, noisy)
            sub_star = _gather(fy, first) - _gather(fy, second)

    r1 = out - g2
    r2 = r1 - sub_star
    loss1 = ((r1**2) * vmask).sum(dim=(1, 2, 3)) / counts
    loss2 = ((r2**2) * vmask).sum(dim=(1, 2, 3)) / counts
    total = (loss1 + gamma * loss2).mean()
    return total, loss1.mean(), loss2.mean(), sub_star


def loss_terms(
    model: DenoiserModel,
    noisy: ImageF,
    choices: CellChoices,
    gamma: float,
    sub_star: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable (total, loss1, loss2, sub*) for one image and fixed choices.

    Passing ``sub_star`` pins the regulariser target instead of recomputing it
    from the current parameters.
    """
    x = _to_tensor(model, [noisy.data])
    v = _to_tensor(model, [noisy.valid.astype(np.float64)])
    return _batch_loss(model, x, v, [choices], gamma, sub_star)


def compute_loss(model: DenoiserModel, noisy: ImageF, gamma: float, seed: int) -> LossBreakdown:
    """Loss terms for one image, pair drawn as ``make_pair(noisy, seed)``."""
    if noisy.channels != 1:
        raise DataError("the denoiser expects a single-channel image")
    choices = draw_choices(noisy.height, noisy.width, np.random.default_rng(seed))
    x = _to_tensor(model, [noisy.data])
    v = _to_tensor(model, [noisy.valid.astype(np.float64)])
    with torch.no_grad():
        total, l1, l2, star = _batch_loss(model, x, v, [choices], gamma)
    l1, l2 = float(l1), float(l2)
    return LossBreakdown(l1, l2, l1 + gamma * l2, gamma, ImageF(star[0, 0].double().numpy()))


def child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _check_finite(model: DenoiserModel, what: str, grads: bool = False) -> None:
    for name, p in model.net.named_parameters():
        t = p.grad if grads else p
        if t is not None and not torch.all(torch.isfinite(t)):
            raise NumericError(f"non-finite {what} in parameter {name} at step {model.step}")


def train_step(
    model: DenoiserModel, batch: Sequence[ImageF], gamma: float, seed: int
) -> LossBreakdown:
    """One Adam update on a batch of noisy patches; returns batch-mean losses.

    Patch i draws its cell choices with ``child_seed(seed, i)``. Gradients
    flow through both loss terms with sub* held constant.
    """
    if not batch:
        raise DataError("empty training batch")
    if model.optimizer is None:
        raise DataError("model has no optimizer state")
    model.net.train()
    shapes = {b.shape for b in batch}
    groups = [list(batch)] if len(shapes) == 1 else [[b] for b in batch]
    model.optimizer.zero_grad(set_to_none=False)
    l1_sum = l2_sum = 0.0
    k = 0
    for group in groups:
        choices = []
        for b in group:
            choices.append(draw_choices(b.height, b.width, np.random.default_rng(child_seed(seed, k))))
            k += 1
        x = _to_tensor(model, [b.data for b in group])
        v = _to_tensor(model, [b.valid.astype(np.float64) for b in group])
        total, l1, l2, _ = _batch_loss(model, x, v, choices, gamma)
        (total * (len(group) / len(batch))).backward()
        l1_sum += float(l1.detach()) * len(group)
        l2_sum += float(l2.detach()) * len(group)
    _check_finite(model, "gradient", grads=True)
    model.optimizer.step()
    _check_finite(model, "value")
    model.meta["step"] = model.step + 1
    l1m, l2m = l1_sum / len(batch), l2_sum / len(batch)
    return LossBreakdown(l1m, l2m, l1m + gamma * l2m, gamma)


def sample_patches(
    dataset: Sequence[ImageF], count: int, size: int, rng: np.random.Generator
) -> list[ImageF]:
    """Random crops (with replacement); images smaller than ``size`` are used whole."""
    out = []
    for _ in range(count):
        img = dataset[int(rng.integers(len(dataset)))]
        ph = min(size, img.height) // 2 * 2
        pw = min(size, img.width) // 2 * 2
        y = int(rng.integers(0, img.height - ph + 1))
        x = int(rng.integers(0, img.width - pw + 1))
        mask = None if img.mask is None else img.mask[y : y + ph, x : x + pw]
        out.append(ImageF(img.data[y : y + ph, x : x + pw], mask))
    return out


def train(
    model: DenoiserModel,
    dataset: Sequence[ImageF],
    cfg: TrainConfig,
    on_checkpoint: Callable[[DenoiserModel, int], None] | None = None,
) -> tuple[DenoiserModel, list[LossBreakdown]]:
    """Train in place; returns the model and per-epoch mean losses."""
    if not dataset:
        raise DataError("empty training dataset")
    if any(img.channels != 1 for img in dataset):
        raise DataError("training images must be single-channel")
    history: list[LossBreakdown] = []
    if cfg.epochs == 0:
        return model, history
    for group in model.optimizer.param_groups:
        group["lr"] = cfg.lr
    model.gamma = cfg.gamma
    rng = np.random.default_rng([cfg.seed, 1])
    step = 0
    for epoch in range(cfg.epochs):
        acc = np.zeros(3)
        for _ in range(cfg.steps_per_epoch):
            gamma = cfg.gamma_at(step)
            patches = sample_patches(dataset, cfg.batch_size, cfg.patch_size, rng)
            res = train_step(model, patches, gamma, child_seed(cfg.seed, step))
            acc += (res.loss1, res.loss2, res.gamma)
            step += 1
        l1, l2, g = (float(v) for v in acc / cfg.steps_per_epoch)
        history.append(LossBreakdown(l1, l2, l1 + g * l2, g))
        log.info("epoch %d loss1=%.6g loss2=%.6g gamma=%.3g", epoch + 1, l1, l2, g)
        if on_checkpoint and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(model, epoch + 1)
    return model, history


def fine_tune(model: DenoiserModel, img: ImageF, steps: int, seed: int = 0) -> DenoiserModel:
    """Copy of ``model`` further trained on a single image."""
    tuned = copy.deepcopy(model)
    if steps <= 0:
        return tuned
    cfg = TrainConfig(
        epochs=1, steps_per_epoch=steps, lr=tuned.optimizer.param_groups[0]["lr"],
        batch_size=1, gamma=tuned.gamma, seed=seed, patch_size=max(img.height, img.width),
    )
    train(tuned, [img], cfg)
    return tuned


def write_train_log(history: Sequence[LossBreakdown], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["epoch", "loss1", "loss2", "total", "gamma"])
        for i, h in enumerate(history, 1):
            out.writerow([i, f"{h.loss1:.10g}", f"{h.loss2:.10g}", f"{h.total:.10g}", f"{h.gamma:.10g}"])


# ------------------------------------------------------------ checkpoint


def save_checkpoint(model: DenoiserModel, path: str | Path) -> None:
    """magic | u32 version | u32 header length | JSON header | npz blob."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.net.state_dict().items()}
    names = [n for n, _ in model.net.named_parameters()]
    if model.optimizer is not None:
        state = model.optimizer.state
        for name, p in zip(names, model.net.parameters()):
            if p in state and "exp_avg" in state[p]:
                arrays[f"m1/{name}"] = state[p]["exp_avg"].cpu().numpy()
                arrays[f"m2/{name}"] = state[p]["exp_avg_sq"].cpu().numpy()
                arrays[f"t/{name}"] = np.asarray(float(state[p]["step"]))
    header = {
        "arch": asdict(model.arch),
        "gamma": model.gamma,
        "seed": model.seed,
        "step": model.step,
        "dtype": str(model.dtype).replace("torch.", ""),
        "lr": model.optimizer.param_groups[0]["lr"] if model.optimizer else None,
    }
    blob = io.BytesIO()
    np.savez(blob, **arrays)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        fh.write(blob.getvalue())


def load_checkpoint(path: str | Path) -> DenoiserModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path} is not a denoiser checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    arrays = np.load(io.BytesIO(raw[16 + hlen :]))
    dtype = getattr(torch, header["dtype"])
    model = build_model(
        ArchSpec(**header["arch"]), seed=header["seed"], gamma=header["gamma"],
        lr=header["lr"] or 3e-4, dtype=dtype,
    )
    state = {k[len("param/"):]: torch.as_tensor(arrays[k]) for k in arrays.files if k.startswith("param/")}
    model.net.load_state_dict(state)
    for name, p in model.net.named_parameters():
        if f"m1/{name}" in arrays.files:
            model.optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"t/{name}"])),
                "exp_avg": torch.as_tensor(arrays[f"m1/{name}"]).to(dtype),
                "exp_avg_sq": torch.as_tensor(arrays[f"m2/{name}"]).to(dtype),
            }
    model.meta["step"] = header["step"]
    return model
