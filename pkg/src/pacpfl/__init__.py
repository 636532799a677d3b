"""Federated learning of Gaussian-process priors with particle hyper-posteriors.

Modules: ``nn`` (tiny tanh networks), ``gp`` (deep-mean deep-kernel GPs),
``svgd`` (Stein variational updates), ``fed`` (the simulated protocol and
baselines), ``pacbayes`` (bound arithmetic), ``data`` (synthetic tasks and
CSV), ``metrics`` (RSMSE, calibration), ``config``/``experiment``/``cli``
(runnable experiments).
"""

__version__ = "0.1.0"
