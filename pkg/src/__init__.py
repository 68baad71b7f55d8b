# Noisy EK-FAC - Eigenvalue-corrected noisy natural gradient
# Variational training of Bayesian MLPs with Kronecker-factored curvature

__version__ = "1.0.0"
__author__ = "Noisy EK-FAC Team"
