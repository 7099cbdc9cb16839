"""Subspace-based signal and image decomposition.

Smooth background models (DCT, polynomial, learned) separate overlaid text
and graphics from pictorial content; masked two-component models extend the
idea to low-rank video backgrounds and global camera motion.
"""

__version__ = "0.1.0"

from .bases import BasisSet, make_dct2d, make_hadamard, make_polynomial2d, make_sinusoid1d
from .errors import DataError, DegeneracyError, NumericalError, ParameterError, SubsegError
from .evaluate import additive_baseline, run_benchmark, score_mask
from .imageio import BlockSignal, MaskImage, load_image, save_mask
from .maskeddecomp import MdConfig, md_solve
from .maskedrpca import MrConfig, mr_solve
from .motionseg import FlowField, MotionConfig, fit_global_lsq, motion_masked_segment
from .pipeline import PipelineConfig, segment_block, segment_image
from .robustfit import RansacConfig, fit_lad, fit_lsf, ransac_segment
from .sparsedecomp import SdConfig, sd_solve
from .subspacelearn import LearnedSubspace, SlConfig, sl_segment, sl_train
