"""Progressive compression of a multimodal diffusion transformer."""

from . import analysis, compress, flow, mmdit, numkit, ptd, textdistill

__version__ = "0.1.0"
