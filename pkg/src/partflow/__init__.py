"""partflow: joint correspondence, deformation flow, and rigid-part
discovery for articulated point-cloud pairs."""

__version__ = "0.1.0"

from . import (cli, corr, data, evaluate, flow, geom, graphcut, nn, pipeline,
               refine, report, seg, selfcheck, tensor, train)

__all__ = ["cli", "corr", "data", "evaluate", "flow", "geom", "graphcut", "nn",
           "pipeline", "refine", "report", "seg", "selfcheck", "tensor", "train",
           "__version__"]
