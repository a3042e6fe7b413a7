import numpy as np
import pytest

from mghf.config import DfeConfig
from mghf.dfe import init_model
from mghf.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def random_model():
    return init_model(DfeConfig(n_channels=4), identity=False, seed=11)


def conv_oracle(x, kernel, bias, padding):
    """Direct quadruple loop over output channel, row, column and kernel window."""
    c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = bias[oc]
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            r, q = i + di - padding, j + dj - padding
                            if 0 <= r < h and 0 <= q < w:
                                acc += kernel[oc, ic, di, dj] * x[ic, r, q]
                out[oc, i, j] = acc
    return out
