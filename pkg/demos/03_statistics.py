"""AUC with a subsample-bootstrap CI, a paired model comparison and score densities."""
import numpy as np

from gonscreen import statlab

rng = np.random.default_rng(0)
y = rng.integers(0, 2, 400)
strong = 1 / (1 + np.exp(-(rng.normal(size=400) + 2.0 * y - 1.0)))
weak = 1 / (1 + np.exp(-(rng.normal(size=400) + 0.8 * y - 0.4)))

for name, s in (("strong", strong), ("weak", weak)):
    print(statlab.evaluate(s, y, name, "demo", iterations=500).cell(), name,
          f"Brier {statlab.brier(s, y):.3f}")

res = statlab.compare_models(strong, weak, y, iterations=500, model_a="strong", model_b="weak")
print(f"strong - weak: median dAUC {res.median_difference:.3f}, Wilcoxon p = {res.p_value:.2g}")

print("exact signed-rank p for d=[1..5]:", statlab.wilcoxon_signed_rank([1, 2, 3, 4, 5]))

grid, dens = statlab.kde(strong[y == 1])
print(f"positive-class density peaks at {grid[np.argmax(dens)]:.2f}, integrates to {np.trapezoid(dens, grid):.3f}")
