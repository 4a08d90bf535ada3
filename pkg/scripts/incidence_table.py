"""Print false-negative incidence for several class counts and batch sizes."""
import numpy as np

from fnac.synthdata import fn_incidence

CLASSES = (10, 64, 309)
BATCHES = (8, 16, 64, 128, 256)

print("classes " + " ".join(f"b={b:>4}" for b in BATCHES))
for c in CLASSES:
    row = [fn_incidence(np.ones(c), b)[0] for b in BATCHES]
    print(f"{c:>7} " + " ".join(f"{v:6.3f}" for v in row))
