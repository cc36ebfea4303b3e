"""Instance-optimization deformable registration for longitudinal brain MRI.

Subpackages by layer: :mod:`volume` and :mod:`nifti` (grids and I/O),
:mod:`transforms`, :mod:`objectives`, :mod:`registration`,
:mod:`evaluation`, :mod:`cohort`, :mod:`phantom` and :mod:`cli`.
"""

from .errors import (
    DegenerateInputError,
    DivergenceError,
    InputError,
    NiftiFormatError,
    NonInvertibleFieldError,
    RegistrationError,
    ShapeError,
)
from .evaluation import RegionTable, default_region_table, evaluate
from .nifti import load_nifti, save_nifti
from .phantom import PhantomSpec, generate_phantom, make_pair, simulate_growth
from .registration import (
    DeformableConfig,
    LinearStageConfig,
    PresetConfigs,
    register_deformable,
    register_linear,
    run_preset,
)
from .transforms import (
    AffineMatrix,
    DisplacementField,
    integrate_svf,
    jacobian_determinant,
    warp_image,
    warp_labels,
)
from .volume import GridGeometry, ImageVolume, LabelVolume

__version__ = "0.1.0"
