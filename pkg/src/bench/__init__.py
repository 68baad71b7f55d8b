# Regression benchmark: datasets, splits and evaluation
