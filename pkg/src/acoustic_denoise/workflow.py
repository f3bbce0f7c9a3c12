"""End-to-end experiment helpers shared by the command line and the tests."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baselines import BaselineSpec, apply_baseline
from .denoiser import ArchSpec, DenoiserModel, TrainConfig, build_model, denoise, train
from .errors import DataError
from .guided import GuidedParams, refine
from .image import ImageF, NoiseSpec, add_synthetic_noise
from .matching import MatchEval, SiftParams, evaluate_pair, gen_translated_pair
from .metrics import BlindModel, blind_quality, epi, fit_blind_model, psnr, ssim, tv
from .selection import METRICS, ModelScoreTable
from .synthetic import particle_scene

Pair = tuple[ImageF, ImageF, int, int]


def split_dataset(images: Sequence, ratio: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle; the first ceil(ratio * N) items train, the rest test."""
    if not 0.5 <= ratio <= 1.0:
        raise DataError(f"split ratio M must lie in [0.5, 1], got {ratio}")
    if len(images) < 2:
        raise DataError("need at least 2 images to split")
    order = np.random.default_rng(seed).permutation(len(images))
    n_train = math.ceil(ratio * len(images))
    train_set = [images[i] for i in order[:n_train]]
    test_set = [images[i] for i in order[n_train:]]
    if not test_set:
        warnings.warn("split ratio leaves the test set empty", UserWarning, stacklevel=2)
    return train_set, test_set


def dihedral_variants(img: ImageF) -> list[ImageF]:
    """The 8 flips/rotations of an image (mask transformed alongside)."""
    out = []
    for k in range(4):
        for flip in (False, True):
            d = np.rot90(img.data, k)
            m = None if img.mask is None else np.rot90(img.mask, k)
            if flip:
                d = d[:, ::-1]
                m = None if m is None else m[:, ::-1]
            out.append(ImageF(d, m))
    return out


def blind_corpus(images: Sequence[ImageF], minimum: int = 20) -> list[ImageF]:
    """``images`` padded with dihedral variants until at least ``minimum`` long."""
    corpus = list(images)
    variants = [v for img in images for v in dihedral_variants(img)[1:]]
    i = 0
    while len(corpus) < minimum and i < len(variants):
        corpus.append(variants[i])
        i += 1
    if len(corpus) < minimum:
        raise DataError("not enough images to build a blind-quality corpus")
    return corpus


def synthetic_pairs(count: int, size: int, max_shift: int, noise: NoiseSpec, seed: int) -> list[Pair]:
    """Translated particle-scene pairs with independent noise on each member."""
    pairs = []
    for i in range(count):
        img = particle_scene(size, size, seed=seed * 1009 + i)
        a, b, tx, ty = gen_translated_pair(img, max_shift, seed * 1009 + i)
        pairs.append((
            add_synthetic_noise(a, noise, seed * 1009 + 2 * i + 1),
            add_synthetic_noise(b, noise, seed * 1009 + 2 * i + 2),
            tx, ty,
        ))
    return pairs


def two_stage(model: DenoiserModel, raw: ImageF, guided: GuidedParams = GuidedParams()) -> tuple[ImageF, ImageF]:
    """First-stage network output and the refined final image."""
    stage1 = denoise(model, raw)
    return stage1, refine(raw, stage1, guided)


# ------------------------------------------------------------ study


@dataclass
class StudyConfig:
    """Randomised training draws for the model population.

    lr is log-uniform in ``lr_range``, gamma uniform in ``gamma_range``,
    epochs uniform over ``epoch_range`` (inclusive) and the patch size is
    picked from ``patch_sizes``.
    """

    models: int = 100
    arch: ArchSpec = field(default_factory=lambda: ArchSpec(levels=2, channels=8))
    lr_range: tuple[float, float] = (1e-4, 3e-3)
    gamma_range: tuple[float, float] = (0.0, 2.0)
    epoch_range: tuple[int, int] = (1, 4)
    patch_sizes: tuple[int, ...] = (32, 48, 64)
    steps_per_epoch: int = 25
    batch_size: int = 4
    guided: GuidedParams = field(default_factory=GuidedParams)
    sift: SiftParams = field(default_factory=SiftParams)
    seed: int = 0

    def draw(self, index: int) -> TrainConfig:
        rng = np.random.default_rng([self.seed, index, 17])
        lo, hi = np.log(self.lr_range[0]), np.log(self.lr_range[1])
        return TrainConfig(
            epochs=int(rng.integers(self.epoch_range[0], self.epoch_range[1] + 1)),
            steps_per_epoch=self.steps_per_epoch,
            lr=float(np.exp(rng.uniform(lo, hi))),
            batch_size=self.batch_size,
            gamma=float(rng.uniform(*self.gamma_range)),
            seed=int(rng.integers(0, 2**31 - 1)),
            patch_size=int(rng.choice(self.patch_sizes)),
        )


@dataclass
class StudyModel:
    model_id: str
    cfg: TrainConfig
    metrics: dict[str, float]
    matches: list[MatchEval]


def evaluate_outputs(
    outputs: Sequence[ImageF], refs: Sequence[ImageF | None], blind: BlindModel | None
) -> dict[str, float]:
    """Mean of each metric over a test set (reference metrics need refs)."""
    rows = {m: [] for m in METRICS}
    for out, ref in zip(outputs, refs):
        rows["tv"].append(tv(out))
        if ref is not None:
            rows["psnr"].append(psnr(out, ref))
            rows["ssim"].append(ssim(out, ref))
            rows["epi"].append(epi(out, ref))
        if blind is not None:
            rows["blind_quality"].append(blind_quality(out, blind))
    return {m: float(np.mean(v)) if v else float("nan") for m, v in rows.items()}


def run_study(
    train_images: Sequence[ImageF],
    test_images: Sequence[ImageF],
    pairs: Sequence[Pair],
    cfg: StudyConfig,
    references: Sequence[ImageF] | None = None,
    blind: BlindModel | None = None,
    on_model=None,
) -> tuple[ModelScoreTable, list[StudyModel]]:
    """Train ``cfg.models`` randomly configured denoisers and score each one.

    Every model's two-stage output on the test images is measured against
    ``references`` (the raw test images when None) and its matching
    performance is measured on ``pairs`` after two-stage denoising.
    """
    if not train_images or not test_images or not pairs:
        raise DataError("study needs training images, test images and matching pairs")
    refs = list(references) if references is not None else list(test_images)
    if blind is None:
        blind = fit_blind_model(blind_corpus(train_images))
    results = []
    for k in range(cfg.models):
        tcfg = cfg.draw(k)
        model = build_model(cfg.arch, seed=tcfg.seed, gamma=tcfg.gamma, lr=tcfg.lr)
        train(model, train_images, tcfg)
        outputs = [two_stage(model, img, cfg.guided)[1] for img in test_images]
        metrics = evaluate_outputs(outputs, refs, blind)
        matches = []
        for a, b, tx, ty in pairs:
            da, db = two_stage(model, a, cfg.guided)[1], two_stage(model, b, cfg.guided)[1]
            matches.append(evaluate_pair(da, db, tx, ty, params=cfg.sift))
        res = StudyModel(str(k), tcfg, metrics, matches)
        results.append(res)
        if on_model is not None:
            on_model(res, model)
    table = ModelScoreTable(
        [r.model_id for r in results],
        np.array([[r.metrics[m] for m in METRICS] for r in results]),
        np.array([np.mean([e.recall for e in r.matches]) for r in results]),
        np.array([np.mean([e.precision for e in r.matches]) for r in results]),
        extra={
            "lr": [f"{r.cfg.lr:.6g}" for r in results],
            "gamma": [f"{r.cfg.gamma:.6g}" for r in results],
            "epochs": [str(r.cfg.epochs) for r in results],
            "patch": [str(r.cfg.patch_size) for r in results],
        },
    )
    return table, results


# ------------------------------------------------------------ edge-driven study


def edge_driven_study(models: int = 15, pairs: int = 8, seed: int = 0, size: int = 128) -> dict[str, np.ndarray]:
    """Synthetic model population whose matching quality depends on edge sharpness.

    Each "model" blurs the clean scene with its own Gaussian width (edge
    fidelity, the only thing the matcher responds to), adds its own constant
    intensity bias (which moves PSNR/SSIM but not edges) and a small fixed
    residual noise. Returns per-model means of every metric, recall and
    precision, with the clean scene as reference.
    """
    rng = np.random.default_rng(seed)
    scenes = []
    for s in range(pairs):
        img = particle_scene(size, size, seed=seed * 7717 + s)
        scenes.append((img, *gen_translated_pair(img, 10, seed * 7717 + s)))
    cols = {k: [] for k in ("blur", "bias", *METRICS[:4], "recall", "precision")}
    for k in range(models):
        blur, bias = rng.uniform(1.8, 3.6), rng.uniform(-0.15, 0.15)
        spec = BaselineSpec("gaussian", {"sigma": blur})

        def render(x: ImageF, s: int) -> ImageF:
            y = np.clip(apply_baseline(x, spec).data + bias, 0.0, 1.0)
            return add_synthetic_noise(x.with_data(y), NoiseSpec(gaussian=4 / 255), s)

        per = []
        for i, (_, a, b, tx, ty) in enumerate(scenes):
            da = render(a, seed * 104729 + 1000 * k + 2 * i)
            db = render(b, seed * 104729 + 1000 * k + 2 * i + 1)
            e = evaluate_pair(da, db, tx, ty)
            per.append((psnr(da, a), ssim(da, a), epi(da, a), tv(da), e.recall, e.precision))
        means = np.mean(per, axis=0)
        for name, v in zip(("blur", "bias", *METRICS[:4], "recall", "precision"), (blur, bias, *means)):
            cols[name].append(float(v))
    return {k: np.array(v) for k, v in cols.items()}
