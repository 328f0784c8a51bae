"""Inter-domain distribution matching (IDM) for domain generalization.

Submodules: ``infotheory`` (exact discrete measures and the Gaussian
construction), ``distmatch`` (PDM and kernel-divergence oracles), ``nn`` (the
MLP), ``penalties``, ``data``, ``trainer``, ``checks`` and ``cli``.
"""

__version__ = "0.1.0"
