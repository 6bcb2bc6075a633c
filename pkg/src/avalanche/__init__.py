"""Dissipative abelian avalanche model on finite boxes of Z^d."""

__version__ = "0.1.0"

from .lattice import (  # noqa: E402
    OMEGA,
    SPECIAL,
    LatticeSpec,
    TopplingMatrix,
    WiredGraph,
    make_box,
    rect_box,
    toppling_matrix,
    wired_graph,
)
from .engine import (  # noqa: E402
    AvalancheRecord,
    DiscreteConfig,
    HeightConfig,
    RationalConfig,
    add,
    add_rational,
    discretize,
    from_rational,
    stabilize,
    stabilize_rational,
    to_rational,
    topple,
)
from .allowed import SpanningTree, burn, config_to_tree, enumerate_allowed, is_allowed, tree_to_config  # noqa: E402
from .sampler import RngStream, loop_erase, network_walk_step, sample_m, sample_nu, wilson_sample  # noqa: E402

__all__ = [
    "OMEGA", "SPECIAL", "LatticeSpec", "TopplingMatrix", "WiredGraph", "make_box", "rect_box",
    "toppling_matrix", "wired_graph", "AvalancheRecord", "DiscreteConfig", "HeightConfig",
    "RationalConfig", "add", "add_rational", "discretize", "from_rational", "stabilize",
    "stabilize_rational", "to_rational", "topple", "SpanningTree", "burn", "config_to_tree",
    "enumerate_allowed", "is_allowed", "tree_to_config", "RngStream", "loop_erase",
    "network_walk_step", "sample_m", "sample_nu", "wilson_sample",
]
