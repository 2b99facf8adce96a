"""Tools for rotation regression from images with partial labels.

Subpackages are organized by concern: `so3` holds rotation-group
primitives, `fisher` the orientation distribution used as the regression
head, `curriculum`/`augment`/`trainer` the semi-supervised training loop,
`data` the synthetic benchmark generator, `metrics` the evaluation
report, and `cli` the command-line entry points.
"""

__version__ = "0.1.0"
