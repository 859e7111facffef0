"""exitlab: a small-noise diffusion exit-problem laboratory.

Simulation of exit times and exit points for small-noise SDEs near
saddles, under the Levinson condition, through heteroclinic networks,
and against Freidlin-Wentzell action minimization, with the predicted
limit laws implemented as sampleable/evaluable objects and a Monte Carlo
harness that tests each prediction.
"""

from ._accel import default_backend

__version__ = "0.1.0"

__all__ = ["default_backend", "__version__"]
