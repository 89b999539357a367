"""Untargeted backdoor watermarks for dataset ownership verification.

Subpackages are plain modules:

``tensor``          reverse-mode autodiff over numpy arrays
``nn``              MLP / small CNN, losses, SGD, projected gradient ascent
``data``            datasets, IDX / CIFAR readers, synthetic data, seeding
``watermark``       triggers, UBW-P, UBW-C and targeted baselines
``dispersibility``  D_p, D_s, D_c
``stats``           Student-t and the margin paired T-test
``verify``          black-box ownership verification
``defense``         fine-tuning and channel pruning
``cli``             the ``ubw`` command
"""

__version__ = "0.1.0"
