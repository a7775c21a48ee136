"""Few-shot image classification via relatedness distillation.

A global learner is pretrained on all base categories (with an auxiliary
rotation-prediction task), then a meta learner is trained episodically by
distilling the teacher's query-support cosine relatedness, one support row
at a time.
"""

__version__ = "0.1.0"
