"""Mass univariate statistical parametric mapping on triangle meshes.

Per-vertex linear models, threshold-free cluster enhancement, Freedman-Lane
permutation inference and FDR or max-statistic correction, plus a
synthetic benchmark and a command-line front end.
"""

__version__ = "0.1.0"

from .correction import bh_fdr, fwer_maxstat, pooled_fdr, two_stage_bh
from .errors import (InputOutputError, MeshSPMError, NumericalError,
                     ValidationError)
from .glm import DesignMatrix, PhenotypeMatrix, mass_univariate
from .inference import (PermutationPlan, cluster_extent_inference,
                        freedman_lane, infer_models)
from .mesh import TriangleMesh, make_ventricle_mesh
from .tfce import TfceParams, tfce_transform

__all__ = [
    "__version__",
    "TriangleMesh", "make_ventricle_mesh",
    "DesignMatrix", "PhenotypeMatrix", "mass_univariate",
    "TfceParams", "tfce_transform",
    "PermutationPlan", "freedman_lane", "infer_models",
    "cluster_extent_inference",
    "bh_fdr", "two_stage_bh", "fwer_maxstat", "pooled_fdr",
    "MeshSPMError", "ValidationError", "NumericalError", "InputOutputError",
]
