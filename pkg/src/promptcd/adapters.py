"""Per-scale adapters refining the two temporal pyramids before fusion.

Each scale owns one adapter (1x1 conv + BN + ReLU) that is applied to
both temporal feature maps; weights are shared across time, not across
scales.  The two adapted streams are concatenated along channels, so
every fused level carries 2*width channels.
"""

from . import nn
from . import tensor as T
from .errors import TemporalPairError
from .encoders import PYRAMID_LEVELS


class Adapter(nn.Module):
    def __init__(self, in_ch, width, rng):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, width, 1, rng)
        self.bn = nn.BatchNorm2d(width)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class AdapterStack(nn.Module):
    def __init__(self, base, width, rng):
        super().__init__()
        self.width = width
        self.channels = [base * 2**i for i in range(PYRAMID_LEVELS)]
        for i, ch in enumerate(self.channels):
            setattr(self, f"scale{i}", Adapter(ch, width, rng))

    def parameter_count(self, scale):
        """width*C_i weights + width biases + 2*width BN affine terms."""
        return self.width * self.channels[scale] + self.width + 2 * self.width

    def forward(self, pyramid_a, pyramid_b):
        """Fuse two temporal pyramids into per-scale (B, 2*width, h, w) maps."""
        sa, sb = pyramid_a.shapes(), pyramid_b.shapes()
        if sa != sb:
            raise TemporalPairError(f"temporal pyramids disagree: {sa} vs {sb}")
        if len(pyramid_a.levels) != PYRAMID_LEVELS:
            raise TemporalPairError(
                f"expected {PYRAMID_LEVELS} pyramid levels, got {len(pyramid_a.levels)}")
        fused = []
        for i in range(PYRAMID_LEVELS):
            adapter = getattr(self, f"scale{i}")
            fused.append(T.concat([adapter(pyramid_a.levels[i]), adapter(pyramid_b.levels[i])], axis=1))
        return fused
