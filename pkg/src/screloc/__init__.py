"""Scene coordinate regression with latent map codes.

A scene-agnostic cross-attention regressor maps patch embeddings plus a
learnable per-scene map code to 3D scene coordinates with calibrated
uncertainty. The package covers the full desk-scale pipeline: synthetic
worlds with controllable mapping/query condition shift, alternating
mapping/query pre-training, novel-scene map-code optimization from posed
views, and uncertainty-aware PnP+RANSAC relocalization.
"""

__version__ = "0.1.0"
