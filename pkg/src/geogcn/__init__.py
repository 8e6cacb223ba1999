"""Point cloud denoising with dual-domain graph convolutions.

A position network regresses per-patch displacements, a normal network
refines PCA normal estimates, and a normal-guided bilateral filter
produces the final cloud. Training couples an assignment (earth mover)
loss, a virtual-normal loss over sampled triangles, and a sign-free
real-normal loss.
"""

from .bilateral import FilterConfig, bilateral_weight, filter_step, final_denoise
from .cloud import (KnnGraph, Normal, Patch, PointCloud, build_knn_graph,
                    estimate_all_normals, extract_patch, pca_directions,
                    pca_normal)
from .errors import (CoverageError, DataError, DegenerateInputError,
                     GeoGcnError, InvalidArgumentError, InvalidManifestError,
                     ParseError, SamplingExhaustedError,
                     TrainingDivergenceError, ValidationError)
from .io import read_cloud, write_cloud
from .losses import (Assignment, LossWeights, chamfer_distance, emd_assignment,
                     emd_loss, mse_to_reference, rn_loss, total_loss)
from .network import (NetworkParams, forward_ngcn, forward_sgcn,
                      load_checkpoint, lr_schedule, save_checkpoint, sgd_step)
from .pipeline import (AblationStage, PipelineConfig, ablate, denoise,
                       denoise_cloud, evaluate, evaluate_clouds, train)
from .shapes import (ManifestEntry, NoisySample, ShapeSpec, build_manifest,
                     corrupt, default_shape_specs, generate_shape,
                     load_manifest)
from .vnormal import (TriangleSample, VnSampleSet, sample_vn_set,
                      triangle_is_valid, virtual_normal, vn_loss)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
