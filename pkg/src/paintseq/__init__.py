"""Painting-process sequence synthesis, temporal diffusion training, and
reference-conditioned generation.

Subpackages
-----------
strokes    stroke-based sequence synthesis (dataset factory)
diffusion  noise schedule, forward process, DDIM sampling/inversion
codec      image <-> latent mapping (identity or learned autoencoder)
model      frame-sequence denoiser UNet with temporal attention
lora       low-rank adapters over attention projections
arn        reference-frame conditioning side network
pipeline   training stages and generation tasks
evalkit    metrics, process-shape statistics, strategy classifier
"""

__version__ = "0.1.0"
