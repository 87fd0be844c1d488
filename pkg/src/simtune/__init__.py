"""Oracle-based autotuning of reservoir-simulator numerical controls inside
ensemble history matching.

Subpackages and modules:

``simkernel``
    two-phase oil-water finite-volume simulator with a deterministic run clock
``logfeat``
    run logs and the fixed-order feature vector extracted from them
``searchspace``
    numerical-control search space, LHS / one-at-a-time sampling, encoding
``oracle``
    datasets, preprocessing, tree / forest / k-NN regressors, LOGO-CV
``esmda``
    ensemble smoother with multiple data assimilation
``tunaflow``
    the coupled loop: refit, query, simulate, update; campaigns and reports
``cli``
    the ``simtune`` command
"""
__version__ = "0.1.0"
