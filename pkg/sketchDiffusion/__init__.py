################################################################################
# Module: __init__.py
# Description: sketchDiffusion - a package for generating vector sketches with a
#               stroke autoencoder and a permutation-invariant latent diffusion model.
# License: MIT, see full license in LICENSE.txt
################################################################################

from .utilities import *
from .config import *
from .tensor_engine import *
from .layers import *
from .sketch_io import *
from .geometry import *
from .stroke_autoencoder import *
from .latent_diffusion import *
from .generation import *
from .metrics import *
from .plot import *
from .cli import dispatch, main

__version__ = '0.1'
