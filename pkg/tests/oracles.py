"""Frozen reference values computed independently of the package."""

# warmup from 0.05e-3 to the 0.2e-3 plateau, then x0.25 at each decay epoch (12, 14..18)
GOLDEN_LR = [
    5e-05, 1e-04, 1.5e-04, 2e-04, 2e-04, 2e-04, 2e-04, 2e-04, 2e-04, 2e-04, 2e-04,
    5e-05, 5e-05, 1.25e-05, 3.125e-06, 7.8125e-07, 1.953125e-07, 4.8828125e-08,
]

# Adamax from theta=1 with grads 1, -2, 0.5; lr 0.1, betas (0.9, 0.999), eps 1e-8; worked in exact rationals
ADAMAX_GRADS = [1.0, -2.0, 0.5]
ADAMAX_FIXTURE = [0.900000001, 0.9289473692763158, 0.9379970092769723]
