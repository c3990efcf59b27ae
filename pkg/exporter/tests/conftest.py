import numpy as np
import pytest

torch = pytest.importorskip("torch")
pytest.importorskip("capguard_exporter")

from torch import nn

from capguard.micronet import MicroNet


class TwinNet(nn.Module):
    """Torch re-implementation of the micro net for hook-path testing.

    conv (valid) -> ReLU -> global average pool -> dense, returning logits.
    The target layer for export is "act", whose output matches the micro
    net's stored activations.
    """

    def __init__(self, net: MicroNet):
        super().__init__()
        num_filters = net.conv_w.shape[0]
        num_classes = net.dense_w.shape[0]
        self.conv = nn.Conv2d(1, num_filters, kernel_size=3)
        self.act = nn.ReLU()
        self.head = nn.Linear(num_filters, num_classes)
        with torch.no_grad():
            self.conv.weight.copy_(
                torch.from_numpy(np.ascontiguousarray(net.conv_w[:, None])).float()
            )
            self.conv.bias.copy_(torch.from_numpy(net.conv_b).float())
            self.head.weight.copy_(torch.from_numpy(net.dense_w).float())
            self.head.bias.copy_(torch.from_numpy(net.dense_b).float())

    def forward(self, x):
        a = self.act(self.conv(x))
        return self.head(a.mean(dim=(2, 3)))
