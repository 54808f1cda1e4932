"""Tape autodiff in five minutes.

Fits a two-layer network to a toy regression target, checking one gradient
against central finite differences along the way. Everything runs on the
float64 tape engine that powers the rest of the package.
"""
import numpy as np

from ttaswitch import autodiff as ad
from ttaswitch.autodiff import Optimizer, Tensor
from ttaswitch.params import ParamStore

rng = np.random.default_rng(0)
x = rng.normal(size=(64, 3))
target = np.sin(x @ np.array([[1.0], [-2.0], [0.5]]))

w1 = Tensor(rng.normal(scale=0.5, size=(3, 16)), requires_grad=True)
b1 = Tensor(np.zeros(16), requires_grad=True)
w2 = Tensor(rng.normal(scale=0.5, size=(16, 1)), requires_grad=True)
b2 = Tensor(np.zeros(1), requires_grad=True)
params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}


def forward():
    h = ad.gelu(ad.add(ad.matmul(Tensor(x), w1), b1))
    pred = ad.add(ad.matmul(h, w2), b2)
    err = ad.add(pred, ad.scalar_mul(Tensor(target), -1.0))
    return ad.mean(ad.mul(err, err))


# one gradient, checked against finite differences before any training
with ad.recording():
    ad.backward(forward())
analytic = b2.grad.copy()
h = 1e-6
for t in params.values():
    t.grad = None
b2.data[0] += h
up = forward().data.item()
b2.data[0] -= 2 * h
down = forward().data.item()
b2.data[0] += h
fd = (up - down) / (2 * h)
print(f"analytic d(loss)/d(b2) = {analytic[0]:+.8f}")
print(f"finite-difference     = {fd:+.8f}")
assert abs(analytic[0] - fd) < 1e-6

# a short training run, with parameters housed in the package's named store
store = ParamStore()
for name, tensor in params.items():
    store.add(name, tensor, group="backbone")

opt = Optimizer("adam")
for step in range(200):
    with ad.recording():
        loss = forward()
        ad.backward(loss)
    opt.step(store, group_filter=("backbone",), lr=3e-3)
    if step % 50 == 0 or step == 199:
        print(f"step {step:3d}  mse {loss.data.item():.5f}")
print("done: the tape differentiates and the optimizer descends.")
