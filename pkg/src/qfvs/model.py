"""The full summarizer: feature network plus scoring head."""

from __future__ import annotations

import numpy as np

from .backbone import BackboneConfig, FeatureNet
from .layers import Module
from .scoring import ScoringConfig, ScoringHead, score_shots
from .segmentation import MAX_SEGMENTS, build_segmented, kts_segment
from .tensor import Rng


class QFVSModel(Module):
    def __init__(self, backbone: BackboneConfig, scoring: ScoringConfig, seed=0, stream=0):
        rng = Rng(seed, stream)
        self.backbone_cfg = backbone
        self.scoring_cfg = scoring
        self.net = FeatureNet(backbone, rng.child(10))
        self.head = ScoringHead(backbone.out_channels, backbone.query_dim, scoring, rng.child(20))

    def features(self, segmented, h_q, training=False, rng=None):
        return self.net(segmented.features, segmented.mask, h_q, training, rng)

    def __call__(self, segmented, h_q, training=False, rng=None):
        """ShotScores for the valid shots of ``segmented``, in chronological order."""
        learned = self.features(segmented, h_q, training, rng)
        return score_shots(learned, np.asarray(h_q, dtype=np.float64), self.head)


def segment_video(video, T, max_segments=MAX_SEGMENTS, penalty=1.0):
    bounds = kts_segment(video.features, max_segments=max_segments, max_shots=T, penalty=penalty)
    return build_segmented(video.features, bounds, T)
