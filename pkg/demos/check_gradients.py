"""Verify a few operator gradients against central differences.

Run: python3 demos/check_gradients.py
"""
import numpy as np

from monotakd import autodiff as ad
from monotakd.gradcheck import grad_check
from monotakd.nn import conv2d, softmax_axis

rng = np.random.default_rng(0)
x = rng.normal(size=(6, 7, 3))
w = rng.normal(size=(3, 3, 3, 2))

# dilated conv, checked through a smooth scalar readout
rep = grad_check(lambda t: ad.sum_(ad.square(conv2d(t, w, dilation=2))), x)
print(f"conv2d dilation 2    passed={rep.passed} max_rel_err={rep.max_rel_err:.1e} over {rep.n_checked} elements")

# softmax over depth bins
logits = rng.normal(size=(4, 5, 8))
weights = rng.normal(size=logits.shape)
rep = grad_check(lambda t: ad.sum_(ad.mul(softmax_axis(t, -1), weights)), logits)
print(f"softmax over bins    passed={rep.passed} max_abs_err={rep.max_abs_err:.1e}")

# relu sampled right at its kink: the element is reported, not failed
z = np.array([0.0, 1.0, -2.0])
rep = grad_check(lambda t: ad.sum_(ad.relu(t)), z)
print(f"relu at zero         passed={rep.passed} kink elements {rep.kink_elements}")
