"""Text-conditioned protein sequence generation, desk scale.

A decoder-only stack whose layers fuse a text branch, a learned
cross-modality bottleneck and a causal sequence branch through shared
multi-head attention, plus the training loop, sampling stack and
sequence-level evaluation harness around it.
"""

__version__ = "0.1.0"
