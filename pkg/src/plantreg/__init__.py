"""Level-aware multi-view multi-task regression for plant phenotyping.

The toolkit ingests cached 512-d image embeddings, averages rotational
views into angle-invariant representations, conditions them on camera
height-level text priors, trains shared two-headed age/leaf-count
regressors from scratch, and evaluates accuracy plus robustness to
missing viewpoints.
"""

from . import evaluate, fileio, fusion, nn, priors, store, synth

__version__ = "0.1.0"

__all__ = [
    "evaluate",
    "fileio",
    "fusion",
    "nn",
    "priors",
    "store",
    "synth",
    "__version__",
]
