"""Few-shot representation transfer laboratory.

Pre-train feature extractors with supervised, self-supervised, multi-task, or
last-layer meta-learning objectives; adapt frozen features to n-way k-shot
episodes with a linear probe, auxiliary-class augmentation, and transform-copy
voting; evaluate with the episodic median-of-trials protocol.
"""

__version__ = "0.1.0"
