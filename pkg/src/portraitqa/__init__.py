"""Portrait image quality assessment toolkit.

Dual-branch quality model (full image + facial crop + prompt-probability
auxiliary features) trained with a pairwise fidelity ranking loss over
within-scene image pairs, evaluated with per-scene SRCC/PLCC/KRCC/MAE and
four-parameter logistic mapping.
"""

__version__ = "0.1.0"
