"""mvflow: a finite-volume laboratory for measure-valued compressible flow.

Pieces: pressure laws with non-monotone bumps and convexity certificates,
a 1D viscous solver with discrete energy bookkeeping, empirical Young
measures with weak-form residual evaluators and defect estimators,
relative-energy stability reports, and a CLI driving reproducible
experiments.
"""

__version__ = "0.1.0"
