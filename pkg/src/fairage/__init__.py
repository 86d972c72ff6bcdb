"""Race-preserving face age transformation toolkit.

Library layout:

- ``core``      shared domain types, configuration, image/age primitives
- ``weights``   portable named-array weight container
- ``backbones`` frozen feature extractors (race, face pyramid, identity, age)
- ``encoders``  age style encoder and race-aware face encoder
- ``synthesis`` style-code mixer, style generator, full aging pipeline
- ``losses``    pixel/identity/aging/style-norm/race losses and the weighted objective
- ``training``  two-phase training loop with dual optimizers and checkpointing
- ``datakit``   balanced dataset construction, mirror padding, kinship pair loading
- ``evalkit``   fairness/identity/age metrics and the kinship verification protocol
- ``report``    delimited reports plus rendered figures
- ``cli``       command-line entry point
"""

__version__ = "0.1.0"
