"""Acceptance criteria, each checked at its stated tolerance.

Every test prints one PASS/FAIL line; the lines are repeated together in the
pytest terminal summary.
"""

import time

import numpy as np
import pytest
import torch
import torch.nn as nn

import oracles
from acceptance_log import verdict
from acoustic_denoise.cli import main
from acoustic_denoise.denoiser import ArchSpec, DenoiserModel, TrainConfig, build_model, compute_loss, denoise, train
from acoustic_denoise.guided import guided_filter, refine_maps
from acoustic_denoise.image import ImageF, NoiseSpec, add_synthetic_noise
from acoustic_denoise.matching import evaluate_pair, recall_precision
from acoustic_denoise.metrics import epi, psnr, ssim, tv
from acoustic_denoise.selection import GAConfig, ModelScoreTable, WeightVector, correlation_matrix, ga_tune_weights, score, select_best_model
from acoustic_denoise.subsampler import ADJACENT, make_pair, resample_with
from acoustic_denoise.synthetic import noisy_scene_set, particle_scene
from acoustic_denoise.workflow import edge_driven_study, synthetic_pairs, two_stage
from gradcheck import fd_gradient_error
from planted import planted_table
from test_guided import edge_recovery_fixture


def test_01_metric_oracles():
    rng = np.random.default_rng(2024)
    fields = [(rng.random((16, 16)), rng.random((16, 16))) for _ in range(20)]
    t0 = time.perf_counter()
    ours = [(psnr(ImageF(x), ImageF(y)), ssim(ImageF(x), ImageF(y)), epi(ImageF(x), ImageF(y)), tv(ImageF(x)))
            for x, y in fields]
    elapsed = time.perf_counter() - t0
    ref = [(oracles.psnr(x, y), oracles.ssim(x, y), oracles.epi(x, y), oracles.tv(x)) for x, y in fields]
    err = float(np.max(np.abs(np.array(ours) - np.array(ref))))
    ok = err <= 1e-9 and elapsed < 1.0
    verdict(1, ok, f"metric oracle max |diff| = {err:.2e} (<= 1e-9), runtime {elapsed:.3f} s (< 1 s)")
    assert ok


def test_02_gradient_check():
    t0 = time.perf_counter()
    err, n = fd_gradient_error()
    elapsed = time.perf_counter() - t0
    ok = err <= 1e-4 and n <= 500 and elapsed < 30
    verdict(2, ok, f"gradient vs central differences over {n} parameters: max rel err {err:.2e} "
                   f"(<= 1e-4), {elapsed:.1f} s (< 30 s)")
    assert ok


def test_03_identity_cancels_regulariser():
    model = DenoiserModel(ArchSpec(levels=1, channels=2), nn.Identity(), None, dtype=torch.float64)
    rng = np.random.default_rng(3)
    worst = max(abs(compute_loss(model, ImageF(rng.random((16, 16))), 1.0, seed).loss2) for seed in range(50))
    ok = worst <= 1e-12
    verdict(3, ok, f"identity network, 50 images/seeds: max |loss2| = {worst:.1e} (<= 1e-12)")
    assert ok


OFFSETS = {0: (0, 0), 1: (0, 1), 2: (1, 0), 3: (1, 1)}


def test_04_subsampler_provenance():
    t0 = time.perf_counter()
    bad = 0
    for seed in range(1000):
        data = np.random.default_rng(seed).permutation(16).reshape(4, 4) / 16.0
        img = ImageF(data)
        pair = make_pair(img, seed)
        for r in range(2):
            for c in range(2):
                a, b = int(pair.choices.first[r, c]), int(pair.choices.second[r, c])
                (ya, xa), (yb, xb) = OFFSETS[a], OFFSETS[b]
                bad += pair.sub1.data[r, c] != data[2 * r + ya, 2 * c + xa]
                bad += pair.sub2.data[r, c] != data[2 * r + yb, 2 * c + xb]
                bad += (a, b) not in ADJACENT
        s1, s2 = resample_with(img, pair.choices)
        bad += not np.array_equal(s1.data, pair.sub1.data) or not np.array_equal(s2.data, pair.sub2.data)
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 10
    verdict(4, ok, f"4x4 provenance over 1000 seeds: {bad} violations, {elapsed:.2f} s (< 10 s)")
    assert ok


@pytest.mark.slow
def test_05_denoising_gain():
    t0 = time.perf_counter()
    clean, noisy = noisy_scene_set(24, 64, 64, 25 / 255, seed=0)
    model = build_model(ArchSpec(levels=2, channels=16), seed=0)
    cfg = TrainConfig(epochs=10, steps_per_epoch=60, lr=1e-3, batch_size=4, patch_size=48, seed=0)
    train(model, noisy[:16], cfg)
    gains = [psnr(denoise(model, n), c) - psnr(n, c) for c, n in zip(clean[16:], noisy[16:])]
    elapsed = time.perf_counter() - t0
    gain = float(np.mean(gains))
    ok = gain >= 2.0 and model.step <= 2000 and elapsed <= 900
    verdict(5, ok, f"held-out PSNR gain {gain:+.2f} dB (>= +2 dB) after {model.step} steps, {elapsed:.0f} s")
    assert ok


def test_06_guided_edge_recovery():
    clean, noisy, stage1 = edge_recovery_fixture()
    maps = refine_maps(noisy, stage1)
    before, after = epi(stage1, clean), epi(maps.output, clean)
    alpha_ok = bool(maps.alpha.data.min() >= 0 and maps.alpha.data.max() <= 1)
    rng = np.random.default_rng(6)
    guide = ImageF(rng.random((32, 32)))
    p1, p2 = rng.random((32, 32)), rng.random((32, 32))
    lin = float(np.max(np.abs(
        guided_filter(ImageF(2 * p1 - 0.5 * p2), guide, 4, 1e-4).data
        - 2 * guided_filter(ImageF(p1), guide, 4, 1e-4).data
        + 0.5 * guided_filter(ImageF(p2), guide, 4, 1e-4).data)))
    ok = after > before and alpha_ok and lin <= 1e-10
    verdict(6, ok, f"EPI stage-1 {before:.4f} -> refined {after:.4f}; alpha in [0,1]: {alpha_ok}; "
                   f"linearity err {lin:.1e} (<= 1e-10)")
    assert ok


def test_07_matching_harness():
    scene = particle_scene(128, 128, seed=11)
    e = evaluate_pair(scene, scene, 0, 0)
    recall, precision, _ = recall_precision(10, 8, 6, 3)
    ok = e.precision == 1.0 and e.putative > 0 and recall == 0.3 and precision == 0.5
    verdict(7, ok, f"identical pair precision {e.precision} over {e.putative} matches; "
                   f"hand case recall {recall}, precision {precision}")
    assert ok


@pytest.mark.slow
def test_08_denoising_improves_matching():
    sigma = 50 / 255
    training = [add_synthetic_noise(particle_scene(96, 96, 5000 + i), NoiseSpec(gaussian=sigma), i) for i in range(16)]
    model = build_model(ArchSpec(levels=2, channels=16), seed=0)
    train(model, training, TrainConfig(epochs=10, steps_per_epoch=60, lr=1e-3, batch_size=4, patch_size=48, seed=0))
    raw, done = [], []
    for a, b, tx, ty in synthetic_pairs(20, 128, 10, NoiseSpec(gaussian=sigma), seed=0):
        raw.append(evaluate_pair(a, b, tx, ty).precision)
        done.append(evaluate_pair(two_stage(model, a)[1], two_stage(model, b)[1], tx, ty).precision)
    diff = np.array(done) - np.array(raw)
    effect = float(diff.mean() / diff.std(ddof=1)) if diff.std(ddof=1) > 0 else float("inf")
    ok = np.mean(done) > np.mean(raw)
    verdict(8, ok, f"mean precision raw {np.mean(raw):.4f} -> denoised {np.mean(done):.4f} over 20 pairs "
                   f"(diff {diff.mean():+.4f}, paired effect size d = {effect:.2f})")
    assert ok


def test_09_selection_pipeline():
    t0 = time.perf_counter()
    result = ga_tune_weights(planted_table(), GAConfig(seed=0, generations=100))
    elapsed = time.perf_counter() - t0
    mass = result.weights.as_dict()["tv"]
    rng = np.random.default_rng(9)
    vals = rng.random((20, 5)) + 0.1
    moved = vals * np.array([3.0, 1.0, 1.0, 1.0, 1.0])
    moved[:, 1] = np.log(moved[:, 1])
    moved[:, 4] = moved[:, 4] ** 3
    ids = [str(i) for i in range(20)]
    w = WeightVector(rng.dirichlet(np.ones(5)))
    a, b = ModelScoreTable(ids, vals), ModelScoreTable(ids, moved)
    invariant = (np.array_equal(a.ranks, b.ranks) and np.array_equal(score(a, w), score(b, w))
                 and select_best_model(a, w) == select_best_model(b, w))
    ok = mass >= 0.8 and result.fitness >= 0.99 and elapsed < 60 and invariant
    verdict(9, ok, f"GA: {mass:.3f} weight on planted metric (>= 0.8), Spearman {result.fitness:.4f} "
                   f"(>= 0.99), {elapsed:.1f} s; rank invariance exact: {invariant}")
    assert ok


@pytest.mark.slow
def test_10_correlation_analytics():
    rng = np.random.default_rng(10)
    x = rng.random(30)
    names, m = correlation_matrix({"x": x, "neg": -x, **{f"r{i}": rng.random(30) for i in range(5)}})
    ident = abs(m[0, 0] - 1) <= 1e-12 and abs(m[0, 1] + 1) <= 1e-12
    psd = float(np.linalg.eigvalsh(m).min())
    study = edge_driven_study(models=15, pairs=8, seed=0)
    _, c = correlation_matrix({k: study[k] for k in ("precision", "psnr", "ssim", "epi", "tv")})
    c_psnr, c_ssim, c_epi, c_tv = c[0, 1:]
    ordering = c_epi > c_psnr and c_tv > c_psnr
    ok = ident and psd >= -1e-9 and ordering
    verdict(10, ok, f"corr identities: {ident}; min eigenvalue {psd:.1e} (>= -1e-9); edge-driven study "
                    f"corr(prec, .) psnr {c_psnr:.2f} ssim {c_ssim:.2f} epi {c_epi:.2f} tv {c_tv:.2f}")
    assert ok


@pytest.mark.slow
def test_11_study_determinism(tmp_path, capsys):
    args = ["study", "--models", "5", "--synthetic", "12", "--size", "64", "--pairs", "5",
            "--steps-per-epoch", "25", "--seed", "11", "--out", str(tmp_path)]
    t0 = time.perf_counter()
    codes = [main(args + ["--run-id", rid]) for rid in ("first", "second")]
    elapsed = time.perf_counter() - t0
    capsys.readouterr()
    names = ("score_table.csv", "study_matches.csv")
    same = all(codes[i] == 0 for i in range(2)) and all(
        (tmp_path / "first" / n).read_bytes() == (tmp_path / "second" / n).read_bytes() for n in names)
    rows = len((tmp_path / "first" / "score_table.csv").read_text().splitlines()) - 1 if codes[0] == 0 else 0
    ok = same and rows == 5 and elapsed <= 1800
    verdict(11, ok, f"study --models 5 twice: CSVs byte-identical {same}, {rows} rows, {elapsed:.0f} s")
    assert ok
