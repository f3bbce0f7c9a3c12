"""Central finite-difference check of the training loss gradient."""

import numpy as np
import torch

from acoustic_denoise.denoiser import ArchSpec, build_model, loss_terms
from acoustic_denoise.image import ImageF
from acoustic_denoise.subsampler import draw_choices

TINY = ArchSpec(levels=1, channels=2)


def fd_gradient_error(seed=0, size=8, h=1e-6):
    """Max relative error between autograd and central differences, sub* pinned."""
    model = build_model(TINY, seed=seed, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    img = ImageF(rng.random((size, size)))
    choices = draw_choices(size, size, np.random.default_rng(seed + 1))
    model.net.zero_grad()
    total, _, _, star = loss_terms(model, img, choices, gamma=0.7)
    total.backward()
    params = list(model.net.parameters())
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()
    numeric = np.zeros_like(analytic)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_terms(model, img, choices, 0.7, star)[0].item()
                flat[i] = old - h
                down = loss_terms(model, img, choices, 0.7, star)[0].item()
                flat[i] = old
                numeric[k] = (up - down) / (2 * h)
                k += 1
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale)), analytic.size
