import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from handmim.errors import InvariantError
from handmim.recon import PyramidDecoder, pixel_mask, recon_loss
from oracles import analytic_gradient, central_difference, max_relative_error


def test_toy_stage_sizes():
    dec = PyramidDecoder(64, 4)
    taps = [torch.randn(2, 16, 64) for _ in range(4)]
    T = dec.tokens_to_grid(dec.seed(taps[0]))
    sizes = [T.shape[-1]]
    T = dec.fuse_upsample(0, T)
    sizes.append(T.shape[-1])
    for i in range(1, 4):
        T = dec.fuse_upsample(i, T, taps[i])
        sizes.append(T.shape[-1])
    assert sizes == [4, 8, 16, 32, 64]
    assert dec(taps).shape == (2, 64, 64, 3)


def test_full_size_output():
    dec = PyramidDecoder(16, 14)
    out = dec([torch.randn(1, 196, 16) for _ in range(4)])
    assert out.shape == (1, 224, 224, 3)


def test_zero_in_zero_out():
    dec = PyramidDecoder(16, 4)
    with torch.no_grad():
        for p in dec.parameters():
            if p.dim() == 1:
                p.zero_()
    T = torch.zeros(1, dec.widths[1], 8, 8)
    out = dec.fuse_upsample(1, T, torch.zeros(1, 16, 16))
    assert torch.count_nonzero(out) == 0


def test_wrong_tap_count():
    with pytest.raises(InvariantError):
        PyramidDecoder(16, 4)([torch.zeros(1, 16, 16)] * 3)


def test_pixel_mask_blocks():
    pm = pixel_mask(np.array([True, False, False, True]), 2, 3)
    assert pm.shape == (6, 6)
    assert pm[:3, :3].all() and pm[3:, 3:].all()
    assert not pm[:3, 3:].any() and not pm[3:, :3].any()


def test_recon_loss_examples():
    x = torch.rand(2, 2, 3, dtype=torch.float64)
    assert float(recon_loss(x, x, np.array([True, True, False, True]), 1)) == 0.0
    assert float(recon_loss(x + 1, x, np.zeros(4, bool), 1)) == 0.0
    T4 = x.clone()
    T4[0, 0] += 0.3
    T4[1, 1] -= 5.0  # unmasked pixel, ignored
    loss = recon_loss(T4, x, np.array([True, False, False, False]), 1)
    assert float(loss) == pytest.approx(0.3, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_unmasked_perturbation_invariance(seed):
    r = np.random.default_rng(seed)
    mask = r.random(16) < 0.4
    x = torch.from_numpy(r.random((16, 16, 3)))
    T4 = torch.from_numpy(r.random((16, 16, 3)))
    pm = pixel_mask(mask, 4, 4).numpy()
    delta = torch.from_numpy(r.normal(size=(16, 16, 3)) * (~pm)[..., None])
    assert recon_loss(T4 + delta, x, mask, 4).item() == recon_loss(T4, x, mask, 4).item()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_recon_lipschitz(seed):
    r = np.random.default_rng(seed)
    mask = r.random(16) < 0.5
    x, T4 = (torch.from_numpy(r.random((16, 16, 3))) for _ in range(2))
    delta = torch.from_numpy(r.normal(size=(16, 16, 3)))
    pm = pixel_mask(mask, 4, 4)
    bound = float(delta.abs()[pm].mean()) if pm.any() else 0.0
    change = abs(float(recon_loss(T4 + delta, x, mask, 4)) - float(recon_loss(T4, x, mask, 4)))
    assert change <= bound + 1e-12


def test_decoder_chain_gradient(rng):
    dec = PyramidDecoder(8, 2).double()
    taps = [torch.from_numpy(rng.normal(size=(1, 4, 8))) for _ in range(4)]
    x = torch.from_numpy(rng.random((1, 32, 32, 3)))
    mask = np.array([[True, False, True, True]])

    def f(t1):
        return recon_loss(dec([taps[0], t1, taps[2], taps[3]]), x, mask, 16)

    err = max_relative_error(analytic_gradient(f, taps[1]), central_difference(f, taps[1], 1e-5))
    assert err < 1e-3
