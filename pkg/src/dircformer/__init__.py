"""Split-vocabulary autoregressive transformer for DIRC (pixel, time) hit sequences.

Subpackages and modules:

- :mod:`dircformer.tokenizer` -- pixel / time vocabularies and sequence pairs
- :mod:`dircformer.tensor_core` -- numerical kernels and the finite-difference checker
- :mod:`dircformer.model` -- the transformer, its modes and checkpoint files
- :mod:`dircformer.training` -- losses, training loops, fine-tuning
- :mod:`dircformer.generation` -- nucleus / temperature sampling of tracks
- :mod:`dircformer.data` -- dataset files, batching, the toy detector in :mod:`dircformer.toy`
- :mod:`dircformer.evaluation` -- marginals, yields, occupancy, KDE likelihoods
- :mod:`dircformer.cli` -- the ``dircformer`` command
"""

__version__ = "0.1.0"
