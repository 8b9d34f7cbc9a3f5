"""Mutual-information estimator bench on correlated Gaussians with a closed-form answer."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional

import torch

from .ftre import Critic, infonce_lower, nce_club_upper
from .numcore import init_uniform_fan_in, make_generator


def gaussian_mi(rho: float, dim: int) -> float:
    """``I(X; Y)`` for ``dim`` independent coordinate pairs with correlation ``rho``."""
    if not -1 < rho < 1:
        raise ValueError(f"rho={rho} must lie in (-1, 1)")
    return -0.5 * dim * math.log(1.0 - rho * rho)


def sample_pairs(rho: float, dim: int, n: int, gen: torch.Generator, dtype=torch.float32):
    x = torch.randn(n, dim, generator=gen, dtype=torch.float64)
    eps = torch.randn(n, dim, generator=gen, dtype=torch.float64)
    y = rho * x + math.sqrt(1.0 - rho * rho) * eps
    return x.to(dtype), y.to(dtype)


@dataclass
class BenchRow:
    rho: float
    dim: int
    true_mi: float
    infonce: float
    nce_club: float
    steps: int
    seconds: float

    def as_dict(self) -> dict:
        return asdict(self)


def bench_cell(rho: float, dim: int, steps: int = 2000, batch_size: int = 256, lr: float = 5e-3,
               critic_dim: int = 64, temperature: float = 0.1, eval_batches: int = 50,
               seed: int = 0) -> BenchRow:
    """Train one fresh critic by InfoNCE, then average both estimates over ``eval_batches`` batches."""
    t0 = time.perf_counter()
    gen = make_generator(seed)
    critic = Critic(dim, dim, critic_dim, temperature)
    init_uniform_fan_in(critic, gen)
    opt = torch.optim.Adam(critic.parameters(), lr=lr)
    for _ in range(steps):
        x, y = sample_pairs(rho, dim, batch_size, gen)
        loss = -infonce_lower(x, y, critic)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    nce, club = [], []
    with torch.no_grad():
        for _ in range(eval_batches):
            x, y = sample_pairs(rho, dim, batch_size, gen)
            nce.append(float(infonce_lower(x, y, critic, shift=True)))
            club.append(float(nce_club_upper(x, y, critic)))
    return BenchRow(rho, dim, gaussian_mi(rho, dim), sum(nce) / len(nce), sum(club) / len(club), steps,
                    time.perf_counter() - t0)


def mi_bench(rho_list: Iterable[float], dims: Iterable[int], steps: int = 2000, batch_size: int = 256,
             lr: float = 5e-3, seed: int = 0, cells: Optional[Iterable[tuple]] = None) -> List[BenchRow]:
    """Every ``(rho, dim)`` combination, or just ``cells`` when given."""
    grid = list(cells) if cells is not None else [(r, d) for r in rho_list for d in dims]
    return [bench_cell(float(r), int(d), steps, batch_size, lr, seed=seed) for r, d in grid]
