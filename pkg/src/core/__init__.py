# Curvature, posteriors, optimizers and training
