"""Astrocyte-modulated linear attention with segment-recurrent memory.

The package has three layers:

* a neuron-astrocyte dynamical system (``neuroglia``) whose slow plasticity
  trace yields a memory retention schedule (``retention``);
* a linear-cost attention mechanism built from write/read phases
  (``attention``) on top of a small tape autodiff engine (``autodiff``);
* a segment-recurrent classifier (``model``) trained with a replay-based
  rollout whose gradients match full backpropagation through time
  (``trainer``), plus synthetic tasks, a training harness, and a CLI.
"""

__version__ = "0.1.0"
