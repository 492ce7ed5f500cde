"""Lower bounds on calibration accuracy and how they scale with measurement noise.

Run: python3 demos/crlb.py
"""

import numpy as np

from micarray_calib import load_bundled
from micarray_calib.calibrate import crlb
from micarray_calib.jacobian import parameter_names

sc, nm = load_bundled("observable_a")
names = parameter_names(sc.n_arrays, sc.n_steps)

for alpha in (1.0, 1e-2, 1e-6):
    std = np.sqrt(np.diag(crlb(sc, nm.scaled(alpha))))
    worst = int(np.argmax(std[:8 * (sc.n_arrays - 1)]))
    print(f"noise covariance x{alpha:g}: worst array parameter {names[worst]} std {std[worst]:.3e}")

# the bound grows without limit as the track approaches a degenerate shape
try:
    crlb(load_bundled("coplanar_origin")[0], nm)
except Exception as exc:
    print(f"coplanar track: {type(exc).__name__}: {exc}")
