"""rectilab: dyadic-grid projection maps and a variational rectifiability
test bench for weighted point clouds."""

from .grid import CellComplex, DyadicCell, EverythingOracle, RootCube, faces, skeleton_contains, subdivide
from .lab import (
    Certificate,
    PerturbationSequence,
    PsiResult,
    Verdict,
    build_psi_epsilon,
    semi_regularity_estimate,
    semicontinuity_test,
    tangent_shadow_check,
)
from .measure import BallSystem, MeasureEstimate, density, find_ball_system, measure_at_scale
from .projections import (
    MapConfig,
    PiecewiseMap,
    bf_direction_search,
    choose_center,
    compose,
    federer_fleming_map,
    identity_map,
    lipschitz_estimate,
    ortho_project,
    radial_project_in_cell,
    sample_directions,
    shadow_measure,
    translation_map,
)
from .setmodels import (
    CurveSpec,
    IFSSpec,
    Similarity,
    WeightedCloud,
    circle_polyline,
    discretize_curve,
    four_corner_ifs,
    generate_prefractal,
    mix,
    read_cloud_csv,
    segment_polyline,
    write_cloud_csv,
)

__version__ = "0.1.0"
