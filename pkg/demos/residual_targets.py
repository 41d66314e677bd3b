"""What the second student branch is asked to learn.

The LiDAR teacher sees geometry the camera-based assistant cannot, for
example the far side of an object. Their feature difference, kept only
where it is large, becomes the target for the student's residual branch.

Run: python3 demos/residual_targets.py
"""
import numpy as np

from monotakd import distill as dl

rng = np.random.default_rng(3)
H, W, C = 8, 8, 4

# shared content both models see, plus a patch only the teacher resolves
shared = rng.normal(0.0, 0.05, (H, W, C))
f_ta = shared + rng.normal(0.0, 0.02, (H, W, C))  # the assistant's own small errors
f_t = shared.copy()
f_t[2:4, 5:7] += 1.0

for q in (0.1, 0.3, 1.0):
    res = dl.residual_features(f_t, f_ta, dl.MaskConfig(q))
    kept = res.any(axis=-1)
    print(f"keep quantile {q}: {kept.sum()} of {H * W} cells kept, "
          f"patch kept: {kept[2:4, 5:7].all()}")

res = dl.residual_features(f_t, f_ta, dl.MaskConfig(0.1))
# the patch takes four of the seven slots; the noisiest other cells take the rest
print("\nkept cells at q=0.1 (channel-mean of the residual):")
for row in res.mean(axis=-1):
    print("  " + " ".join(f"{v:4.2f}" if v else "  . " for v in row))

# identical features leave nothing to distill
print("\nF_T == F_TA gives an all-zero residual:", not dl.residual_features(f_t, f_t).any())
