import torch.nn as nn


class SequenceClassifier(nn.Module):
    """3 x (Conv3d -> GroupNorm -> ReLU -> spatial MaxPool) -> global pool -> linear head."""

    def __init__(self, in_channels, num_classes, channels=(16, 32, 64)):
        super().__init__()
        layers, prev = [], in_channels
        for ch in channels:
            layers += [
                nn.Conv3d(prev, ch, kernel_size=3, padding=1),
                nn.GroupNorm(min(4, ch), ch),
                nn.ReLU(),
                nn.MaxPool3d(kernel_size=(1, 2, 2)),
            ]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.head = nn.Linear(prev, num_classes)
        self.num_classes = num_classes

    def forward(self, x):
        # (B, F, C, H, W) -> (B, C, F, H, W)
        h = self.features(x.transpose(1, 2))
        return self.head(self.pool(h).flatten(1))
