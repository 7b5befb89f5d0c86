"""A short tour of the tape-based autodiff engine.

Builds a two-layer scoring function by hand, records it on a tape,
pulls gradients back, and cross-checks one coordinate against a central
difference.  Run with: python3 demos/autodiff_primer.py
"""

import numpy as np

from vq360 import engine as eng
from vq360.engine import Parameter, Tape, Tensor


def forward(x, w1, b1, w2, b2):
    hidden = eng.relu(eng.fully_connected(x, w1, b1))
    return eng.mean_all(eng.fully_connected(hidden, w2, b2))


def main():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 6)))
    w1 = Parameter("w1", rng.standard_normal((8, 6)) * 0.4)
    b1 = Parameter("b1", np.zeros(8))
    w2 = Parameter("w2", rng.standard_normal((1, 8)) * 0.4)
    b2 = Parameter("b2", np.zeros(1))

    with Tape() as tape:
        loss = forward(x, w1, b1, w2, b2)
    print(f"loss = {float(loss.data):.6f}")

    grads = tape.backward()
    for name, grad in sorted(grads.items()):
        print(f"d loss / d {name}: shape {grad.shape}, norm {np.linalg.norm(grad):.4f}")

    # finite-difference spot check of one weight
    h = 1e-6
    saved = w1.data[2, 3]
    w1.data[2, 3] = saved + h
    hi = float(forward(x, w1, b1, w2, b2).data)
    w1.data[2, 3] = saved - h
    lo = float(forward(x, w1, b1, w2, b2).data)
    w1.data[2, 3] = saved
    numeric = (hi - lo) / (2 * h)
    analytic = grads["w1"][2, 3]
    print(f"w1[2,3]: analytic {analytic:+.8f}, numeric {numeric:+.8f}")

    # a second tape sees a fresh recording; the first is consumed
    with Tape() as tape2:
        loss2 = eng.mean_all(eng.mul(w2, w2))
    print("sum of squares grad ok:",
          np.allclose(tape2.backward()["w2"], 2 * w2.data / w2.data.size))


if __name__ == "__main__":
    main()
