"""Adaptive Siamese tracker with motion-estimation proposals.

Library layout: nnet (layers/losses/optimizer with hand-written
backwards), geometry (boxes, sampling, patches), matcher (the Siamese
branch and template buffer), motion (search-window scoring network),
weighting (sequence-specific candidate reweighting), tracking (the online
loop), sequences (synthetic data), evaluation (OPE curves), cli.
"""

__version__ = "0.1.0"
