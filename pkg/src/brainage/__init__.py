"""Two-stage multi-modal lifespan brain-age prediction on synthetic phantoms.

Stage 1 classifies each subject into one of six lifespan stages by
aggregating per-modality stage distributions; Stage 2 regresses age with
stage-routed experts, fused across modalities at inference.
"""

__version__ = "0.1.0"
