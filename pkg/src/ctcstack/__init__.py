"""ctcstack: training and evaluation for online character-level CTC models.

Train an offline bidirectional teacher, distill it frame-by-frame into a
streaming unidirectional student, then fine-tune with CTC plus label
smoothing and curriculum learning — all on deterministic desk-scale
synthetic corpora.
"""

__version__ = "0.1.0"
