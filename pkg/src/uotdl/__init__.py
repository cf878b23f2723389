"""Unbalanced optimal-transport dictionary learning for hyperspectral images.

Pixels are treated as discrete measures over the wavelength grid; a
dictionary of atoms and simplex weights is learned so that unbalanced
Wasserstein barycenters of the atoms reconstruct the pixels, and
spectral clustering of the weights yields unsupervised labels.
"""

from .barycenter import (
    BarycenterConfig,
    balanced_barycenter,
    barycenter,
    barycenter_batch,
    barycenter_objective,
)
from .clustering import (
    ClusterResult,
    accuracy,
    apply_mapping,
    confusion_counts,
    hungarian_match,
    inpaint,
    knn_graph,
    match_to_truth,
    normalized_laplacian,
    purity,
    spectral_cluster,
    spectral_embedding,
)
from .measures import (
    HsiCube,
    LabelMap,
    build_cost,
    load_cube,
    load_labels,
    normalize_global,
    rescale_cost,
    sample_pixels,
    save_cube,
    save_labels,
    uniform_grid,
)
from .pipeline import (
    RunConfig,
    RunReport,
    SweepGrid,
    demo_gaussians,
    evaluate_maps,
    render_labels,
    run_sweep,
    run_ubcsc,
)
from .transport import (
    SinkhornConfig,
    TransportResult,
    kl_div,
    primal_cost,
    relative_entropy_cost,
    solve_balanced,
    solve_unbalanced,
)
from .wdl import (
    AdamParams,
    TrainConfig,
    TrainResult,
    adam_step,
    gradients,
    init_state,
    load_checkpoint,
    reconstruction_loss,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
