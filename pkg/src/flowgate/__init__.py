"""flowgate: a two-stream flow-gated video classifier with a regularized
self-supervised pretraining pipeline.

Submodules
----------
data      clip decoding, segment sampling, synthetic clips, tensor container
flowroi   dense optical flow, motion-intensity maps, ROI extraction
augment   photometric jitter, flips, the aggressive zoom crop, SSL views
model     the gated two-stream network plus parameter/MAC accounting
vicreg    the three-term regularized SSL loss and the auxiliary model
train     supervised/SSL trainers, scheduler, transfer, checkpoints
metrics   confusion/AUC/ROC computation and report emission
cli       operator surface chaining the pipeline from one JSON config
"""

__version__ = "0.1.0"
