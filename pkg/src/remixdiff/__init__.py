"""remixdiff: desk-scale multi-expert diffusion denoising.

N timestep-specialized experts are crafted by weighted-averaging the
parameters of K (< N) jointly trained basis models, with learnable softmax
mixing coefficients, an annealed one-hot prior, and precomputed experts at
inference time.
"""

from . import denoiser, diffusion, evalbench, numerics, remix, training

__version__ = "0.1.0"

__all__ = ["denoiser", "diffusion", "evalbench", "numerics", "remix", "training", "__version__"]
