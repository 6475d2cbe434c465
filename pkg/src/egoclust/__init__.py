"""Self-supervised event clustering for egocentric image streams.

Pipeline: augment + mask image views, pretrain a shared transformer
encoder with a joint reconstruction + contrastive objective, then encode
long frame sequences and segment them into temporally contiguous events.
"""

__version__ = "0.1.0"
