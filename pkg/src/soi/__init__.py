"""Self-supervised pretraining on web-ingested images, with few-shot evaluation.

Subpackages/modules:

* ``soi.tensor``       reverse-mode differentiable arrays
* ``soi._kernels``     conv kernels (compiled core + numpy fallback)
* ``soi.nn``           normalization layers, conv encoder, projection head
* ``soi.augment``      stochastic two-view augmentation
* ``soi.contrastive``  dual-encoder training loop, queue, InfoNCE
* ``soi.data``         fetching, quality checks, pools, checkpoints
* ``soi.diversity``    dataset entropy analyzer
* ``soi.fewshot``      episodic evaluation with five classifier heads
* ``soi.shapes``       procedural shape corpus generator
* ``soi.cli``          the ``soi`` command
"""

__version__ = "0.1.0"
