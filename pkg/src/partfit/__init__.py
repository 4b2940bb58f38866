"""partfit: context-based retrieval of replacement parts for point-cloud objects.

A part encoder trained with chamfer-kernel soft similarity targets plus a
shallow relation transformer score how well every part in a pre-encoded
warehouse completes a damaged object. The package covers the whole
lifecycle: synthetic data generation, dataset preparation, two-stage
training, warehouse indexing, ranking, baselines, evaluation reports, and an
HTTP service for interactive repair sessions.
"""

__version__ = "0.1.0"
