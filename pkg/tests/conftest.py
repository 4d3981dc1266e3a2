import numpy as np
import pytest
import torch


def random_psd(rng, n, rank=None, scale=1.0):
    rank = n if rank is None else rank
    f = rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank))
    return scale * (f @ f.conj().T) / rank


def kkt_mvdr(phi, gamma):
    """Minimise w^H phi w subject to gamma^H w = 1 via the Lagrange system
    [[phi, -gamma], [gamma^H, 0]] [w; mu] = [0; 1]."""
    n = phi.shape[0]
    kkt = np.zeros((n + 1, n + 1), dtype=complex)
    kkt[:n, :n] = phi
    kkt[:n, n] = -gamma
    kkt[n, :n] = gamma.conj()
    rhs = np.zeros(n + 1, dtype=complex)
    rhs[n] = 1.0
    return np.linalg.solve(kkt, rhs)[:n]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
