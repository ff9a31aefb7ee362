"""Generative random-walk deviation losses for zero-shot feature generation.

The package is organised as a small numerical laboratory:

- ``autograd``: dense-matrix reverse-mode differentiation on a tape
- ``walk``: similarity graph, transition matrices, deviation/attraction losses
- ``nets``: conditional generator, two-headed critic, feature extractor
- ``train``: adversarial training loop with gradient penalty
- ``data``: synthetic benchmarks and CSV feature bundles
- ``evaluate``: nearest-neighbour zero-shot metrics (Top-1, SU-AUC, H)
- ``cli``: command-line front end over all of the above
"""

from grawd.autograd import Mat, Parameter, Tape, backward, finite_diff_check

__all__ = ["Mat", "Parameter", "Tape", "backward", "finite_diff_check"]
__version__ = "0.1.0"
