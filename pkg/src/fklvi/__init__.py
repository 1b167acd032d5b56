"""Amortized variational inference with the expected forward KL divergence.

Modules
-------
expfam      exponential-family variational distributions
genmodels   toy rotation model and amortized clustering model
net         two-layer ReLU network, its linearization, deep-set encoders
objectives  forward-KL gradients, ELBO/IWBO, Adam, training loop
ntk         empirical and limiting neural tangent kernels
kgf         kernel gradient flows and moment matching
evalrpt     evaluation metrics
experiments desk-scale experiment runners used by the CLI
"""

__version__ = "0.1.0"
