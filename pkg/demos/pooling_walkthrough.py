"""E-Pool with saturated scores on a 4-node path: clusters {0,1} and {2,3}."""

import numpy as np

from eghn import autodiff as ad
from eghn.autodiff import Tensor
from eghn.pooling import EPoolLayer, EUpPoolLayer
from eghn.system import SystemGraph


def main():
    rng = np.random.default_rng(1)
    A = np.diag(np.ones(3), 1)
    A = A + A.T
    Z = rng.normal(size=(4, 3, 2))
    sys = SystemGraph(Z, rng.normal(size=(4, 4)), A, np.ones((4, 4)) - np.eye(4), None)
    pool = EPoolLayer(4, 8, 2, ("position", "velocity"), rng)
    # pin the assignment so the arithmetic is easy to follow
    logits = np.array([[1e6, 0], [1e6, 0], [0, 1e6], [0, 1e6]])
    pool.score = lambda h: ad.softmax(Tensor(logits), axis=-1)
    high, S = pool(sys)
    print("S =\n", S.data)
    print("S^T A S =\n", high.A_local.data)
    print("re-scored global adjacency =\n", np.round(high.A_global.data, 4))
    up = EUpPoolLayer(4, 8, ("position", "velocity"), rng)
    out = up(high, S, sys)
    print("up-pooled node count:", out.Z.shape[0])


if __name__ == "__main__":
    main()
