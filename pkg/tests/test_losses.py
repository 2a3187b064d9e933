import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lipsplat.errors import InvalidArgumentError, ShapeError
from lipsplat.losses import (SSIM_C1, SSIM_C2, loss_dssim, loss_l1, loss_perceptual_proxy, sample_patches,
                             ssim)
from lipsplat.nn import gradcheck


def naive_ssim(x, y, size=11, sigma=1.5):
    """Loop SSIM with an explicit 2D window and zero padding."""
    r = size // 2
    k = np.array([[np.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma ** 2)) for j in range(size)]
                  for i in range(size)])
    k /= k.sum()
    H, W, C = x.shape
    vals = []
    for c in range(C):
        for i in range(H):
            for j in range(W):
                mx = my = exx = eyy = exy = 0.0
                for a in range(size):
                    for b in range(size):
                        p, q = i + a - r, j + b - r
                        if 0 <= p < H and 0 <= q < W:
                            w = k[a, b]
                            u, v = x[p, q, c], y[p, q, c]
                            mx += w * u
                            my += w * v
                            exx += w * u * u
                            eyy += w * v * v
                            exy += w * u * v
                sx, sy, sxy = exx - mx * mx, eyy - my * my, exy - mx * my
                vals.append((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
                            / ((mx * mx + my * my + SSIM_C1) * (sx + sy + SSIM_C2)))
    return float(np.mean(vals))


def naive_proxy(img, ref, patches, levels):
    total = 0.0
    for y, x, s in patches:
        a, b = img[y:y + s, x:x + s], ref[y:y + s, x:x + s]
        for _ in range(levels):
            total += np.abs(a - b).mean()
            h, w = a.shape[0] // 2, a.shape[1] // 2
            a = np.array([[a[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1)) for j in range(w)] for i in range(h)])
            b = np.array([[b[2 * i:2 * i + 2, 2 * j:2 * j + 2].mean(axis=(0, 1)) for j in range(w)] for i in range(h)])
    return total / (len(patches) * levels)


def test_l1_cases(rng):
    x = rng.uniform(size=(5, 6, 3))
    assert loss_l1(x, x) == 0.0
    assert loss_l1(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 1.0
    y = rng.uniform(size=(5, 6, 3))
    ref = sum(abs(x[i, j, c] - y[i, j, c]) for i in range(5) for j in range(6) for c in range(3)) / 90
    assert loss_l1(x, y) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ShapeError):
        loss_l1(x, y[:4])


def test_dssim_identical_and_constant():
    x = np.full((12, 12, 3), 0.3)
    assert loss_dssim(x, x) == pytest.approx(0.0, abs=1e-15)
    a, b = 0.2, 0.7
    # zero padding makes border means shrink, so compare against the
    # variance-free formula away from the border only
    from lipsplat.losses import ssim_map
    S, _ = ssim_map(np.full((24, 24, 1), a), np.full((24, 24, 1), b))
    expect = (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    np.testing.assert_allclose(S[5:-5, 5:-5], expect, rtol=1e-12)


def test_ssim_matches_naive_oracle(rng):
    x = rng.uniform(size=(13, 12, 2))
    y = 1.0 - x + 0.1 * rng.normal(size=x.shape)
    assert ssim(x, y) == pytest.approx(naive_ssim(x, y), rel=1e-12, abs=1e-13)


def test_dssim_window_too_large():
    with pytest.raises(InvalidArgumentError):
        loss_dssim(np.zeros((8, 20, 3)), np.zeros((8, 20, 3)))


@pytest.mark.parametrize("fn", ["dssim", "proxy", "l1"])
def test_loss_gradients(fn, rng):
    x = rng.uniform(0.1, 0.9, size=(16, 16, 3))
    # differences of one sign on aligned 4x4 blocks keep every pooled
    # difference away from the |.| kink
    sign = np.kron(rng.choice([-1.0, 1.0], size=(4, 4, 3)), np.ones((4, 4, 1)))
    y = x + sign * rng.uniform(0.02, 0.1, size=x.shape)
    patches = [(0, 0, 8), (4, 8, 8), (8, 4, 8)]
    f = {"dssim": lambda: loss_dssim(x, y, with_grad=True),
         "proxy": lambda: loss_perceptual_proxy(x, y, patches, 3, with_grad=True),
         "l1": lambda: loss_l1(x, y, with_grad=True)}[fn]
    _, g = f()
    # L1 and the proxy are piecewise linear: a larger step only cuts roundoff
    rep = gradcheck(lambda: f()[0], {"x": x}, {"x": g}, h=1e-6 if fn == "dssim" else 1e-4)
    assert rep.passed(1e-5), str(rep)


def test_proxy_cases(rng):
    x = rng.uniform(size=(32, 32, 3))
    y = rng.uniform(size=(32, 32, 3))
    patches = sample_patches(rng, 32, 32, 16, 5)
    assert loss_perceptual_proxy(x, x, patches) == 0.0
    one = loss_perceptual_proxy(x, y, patches, levels=1)
    assert one == pytest.approx(np.mean([np.abs(x[a:a + s, b:b + s] - y[a:a + s, b:b + s]).mean()
                                         for a, b, s in patches]), rel=1e-14)
    assert loss_perceptual_proxy(x, y, patches, 3) == pytest.approx(naive_proxy(x, y, patches, 3), rel=1e-13)
    with pytest.raises(InvalidArgumentError):
        loss_perceptual_proxy(x, y, [(20, 20, 16)])


@given(st.integers(0, 2 ** 32 - 1))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=(2, 12, 12, 3))
    assert loss_l1(x, y) >= 0
    assert loss_dssim(x, y) >= 0
    assert loss_perceptual_proxy(x, y, sample_patches(rng, 12, 12, 8, 3)) >= 0


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 12), st.integers(1, 30))
def test_patches_in_bounds(seed, size, count):
    rng = np.random.default_rng(seed)
    for y, x, s in sample_patches(rng, 12, 15, size, count):
        assert 0 <= y and y + s <= 12 and 0 <= x and x + s <= 15
