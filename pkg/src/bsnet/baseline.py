"""A standalone single-similarity relation network.

Written independently of the multi-head engine (no head list, no weights,
no score averaging) so that the engine's H=1 relation configuration can be
checked against it. Parameters are drawn in the same order as
``build_model("conv4", ["relation"], seed=seed)``.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Adam, BatchNorm2d, Conv2d, DiffArray, Linear, Module
from .autodiff import functional as F
from .backbones import Backbone, backbone_spec
from .data import Episode


class RelationNetwork(Module):
    def __init__(self, seed: int = 0, hidden: int = 8):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.features = Backbone(backbone_spec("conv4"), rng)
        self.conv1 = Conv2d(128, 64, 3, 0, rng)
        self.bn1 = BatchNorm2d(64)
        self.conv2 = Conv2d(64, 64, 3, 0, rng)
        self.bn2 = BatchNorm2d(64)
        self.fc1 = Linear(576, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self.assign_names()

    def relation(self, protos: DiffArray, query: DiffArray) -> DiffArray:
        """Relation scores (Q, C) of every query against every class prototype.

        The first convolution over the 128-channel pair is evaluated as the
        sum of its two 64-channel halves.
        """
        c, q = protos.shape[0], query.shape[0]
        w = self.conv1.weight
        a = F.conv2d(protos, w[:, :64], None, padding=0)
        b = F.conv2d(query, w[:, 64:], self.conv1.bias, padding=0)
        h, wd = b.shape[2:]
        x = (b.reshape(q, 1, 64, h, wd) + a.reshape(1, c, 64, h, wd)).reshape(q * c, 64, h, wd)
        x = F.maxpool2d(F.relu(self.bn1(x)), 2)
        x = F.maxpool2d(F.relu(self.bn2(self.conv2(x))), 2)
        x = F.relu(self.fc1(x.reshape(x.shape[0], -1)))
        return F.sigmoid(self.fc2(x)).reshape(-1).reshape(q, c)

    def forward(self, episode: Episode) -> DiffArray:
        c, k = episode.support.shape[:2]
        images = np.concatenate([episode.support.reshape(c * k, 3, 84, 84), episode.query])
        feats = self.features(images)
        support = feats[:c * k].reshape(c, k, *feats.shape[1:])
        return self.relation(support.mean(axis=1), feats[c * k:])


def relation_loss(scores: DiffArray, labels: np.ndarray) -> DiffArray:
    """Mean squared error to one-hot targets, averaged over C * |Q|."""
    q, c = scores.shape
    diff = scores - np.eye(c)[labels]
    return (diff * diff).sum(axis=-1).sum() / float(c * q)


def relation_predict(scores: np.ndarray) -> np.ndarray:
    return np.argmax(np.asarray(scores), axis=1)


def relation_train_step(net: RelationNetwork, optimizer: Adam, episode: Episode) -> float:
    net.train()
    optimizer.zero_grad()
    loss = relation_loss(net(episode), episode.query_labels)
    loss.backward()
    optimizer.step()
    return float(loss.item())
