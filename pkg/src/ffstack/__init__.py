"""ffstack: stacked ensembles of surrogate force fields.

Train a diverse suite of small force fields on analytic reference
potentials, fuse their predictions with graph meta-models (a direct-fitting
variant and a chain-rule conservative variant), and validate the result
with molecular-dynamics stability and structural-distribution metrics.
"""

__version__ = "0.1.0"
