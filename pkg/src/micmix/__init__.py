"""Censored Gaussian mixture modelling of MIC dilution data.

Fits Bayesian mixtures with a prior on the number of components to
doubly-censored MIC data, estimates resistance levels, compares against
uncensored-mixture / Dirichlet-process / ECOFF baselines and feeds the
resulting labels into a spike-and-slab multinomial GWAS.
"""

__version__ = "0.1.0"
