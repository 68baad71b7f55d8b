# Test suite for noisy EK-FAC
