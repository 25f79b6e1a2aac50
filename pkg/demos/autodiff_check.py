"""Backpropagate through a small MLP and compare with central differences."""

import numpy as np

from eghn import autodiff as ad
from eghn.autodiff import Tensor
from eghn.nn import MLP


def main():
    rng = np.random.default_rng(2)
    net = MLP([3, 16, 1], rng)
    x = Tensor(rng.normal(size=(5, 3)))

    def loss():
        return (net(x) ** 2).mean()

    grads = ad.backward(loss())
    w = net.layers[0].weight
    num = np.zeros_like(w.data)
    with ad.no_grad():
        for idx in np.ndindex(w.shape):
            orig = w.data[idx]
            w.data[idx] = orig + 1e-6
            up = loss().item()
            w.data[idx] = orig - 1e-6
            down = loss().item()
            w.data[idx] = orig
            num[idx] = (up - down) / 2e-6
    print(f"max |analytic - numeric| on the first weight matrix: {np.abs(grads[w] - num).max():.2e}")


if __name__ == "__main__":
    main()
