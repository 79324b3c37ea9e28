"""DuSCN-FusionNet: SCN-CNN encoder, auxiliary MLP and fused prediction head."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nn.layers import (
    AdaptiveAvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dropout,
    Flatten,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
    softmax,
)


@dataclass(frozen=True)
class ModelConfig:
    n_rois: int = 116
    n_aux: int = 119
    conv_channels: tuple = (64, 128, 256)
    kernel_size: int = 3
    scn_fc: tuple = (128, 64)
    aux_fc: tuple = (64, 32)
    fusion_fc: tuple = (64,)
    n_classes: int = 2
    dropout_scn: float = 0.2
    dropout_aux: float = 0.3

    def __post_init__(self):
        for name in ("conv_channels", "scn_fc", "aux_fc", "fusion_fc"):
            value = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if not value or min(value) < 1:
                raise ValueError(f"{name} must be a non-empty list of positive widths")
        if len(self.conv_channels) != 3:
            raise ValueError("the encoder has exactly three convolutional blocks")
        if len(self.scn_fc) != 2 or len(self.aux_fc) != 2:
            raise ValueError("each branch has exactly two fully connected layers")
        for rate in (self.dropout_scn, self.dropout_aux):
            if not 0.0 <= rate < 1.0:
                raise ValueError("dropout rates must be in [0, 1)")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd to keep spatial size")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class DuScnFusionNet(Module):
    """Two-branch classifier over a (B, 2, R, R) SCN tensor and a (B, n_aux) vector.

    Layout::

        encoder   conv-BN-ReLU-pool, conv-BN-ReLU-pool, conv-BN-ReLU
        scn_head  adaptive avg pool 1x1, FC, ReLU, dropout, FC      -> z_scn
        aux       FC, ReLU, dropout, FC                             -> z_aux
        fusion    [z_scn || z_aux] -> FC, ReLU, FC                  -> logits

    With ``use_aux=False`` the auxiliary branch is bypassed and ``z_aux`` is
    replaced by zeros so the fusion widths are unchanged.
    """

    def __init__(self, config: ModelConfig | None = None, seed=0, use_aux=True):
        self.config = config = config or ModelConfig()
        self.seed = seed
        self.use_aux = use_aux
        rng = np.random.default_rng(seed)
        c1, c2, c3 = config.conv_channels
        k = config.kernel_size
        pad = k // 2
        self.encoder = Sequential(
            Conv2d(2, c1, k, 1, pad, rng, bias=False), BatchNorm2d(c1), ReLU(), MaxPool2d(2),
            Conv2d(c1, c2, k, 1, pad, rng, bias=False), BatchNorm2d(c2), ReLU(), MaxPool2d(2),
            Conv2d(c2, c3, k, 1, pad, rng, bias=False), BatchNorm2d(c3), ReLU(),
        )  # fmt: skip
        h1, h2 = config.scn_fc
        self.scn_head = Sequential(
            AdaptiveAvgPool2d(1), Flatten(),
            Linear(c3, h1, rng), ReLU(), Dropout(config.dropout_scn), Linear(h1, h2, rng),
        )  # fmt: skip
        a1, a2 = config.aux_fc
        self.aux_branch = Sequential(
            Linear(config.n_aux, a1, rng), ReLU(), Dropout(config.dropout_aux), Linear(a1, a2, rng)
        )
        fusion = []
        width = h2 + a2
        for w in config.fusion_fc:
            fusion += [Linear(width, w, rng), ReLU()]
            width = w
        fusion.append(Linear(width, config.n_classes, rng))
        self.fusion_head = Sequential(*fusion)
        self._aux_width = a2
        self.activations = None

    def named_children(self):
        return [
            ("encoder", self.encoder),
            ("scn_head", self.scn_head),
            ("aux_branch", self.aux_branch),
            ("fusion_head", self.fusion_head),
        ]

    def children(self):
        return [c for _, c in self.named_children()]

    def n_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def _check_inputs(self, scn, aux):
        r = self.config.n_rois
        if scn.ndim != 4 or scn.shape[1:] != (2, r, r):
            raise ValueError(f"SCN input must be (B, 2, {r}, {r}), got {scn.shape}")
        if aux is not None and (aux.ndim != 2 or aux.shape != (scn.shape[0], self.config.n_aux)):
            raise ValueError(f"auxiliary input must be (B, {self.config.n_aux}), got {aux.shape}")

    def forward(self, scn, aux=None, rng=None):
        """Return logits of shape (B, n_classes)."""
        scn = np.asarray(scn, dtype=np.float64)
        if self.use_aux and aux is None:
            raise ValueError("auxiliary features are required unless the aux branch is ablated")
        self._check_inputs(scn, aux if self.use_aux else None)
        self.activations = self.encoder.forward(scn, rng)
        z_scn = self.scn_head.forward(self.activations, rng)
        if self.use_aux:
            z_aux = self.aux_branch.forward(np.asarray(aux, dtype=np.float64), rng)
        else:
            z_aux = np.zeros((scn.shape[0], self._aux_width))
        self._split = z_scn.shape[1]
        return self.fusion_head.forward(np.concatenate([z_scn, z_aux], axis=1), rng)

    def backward(self, dlogits, to_input=True):
        """Backpropagate ``dlogits``; returns the gradient at the encoder output.

        The gradient with respect to the SCN input is computed only when
        ``to_input`` is true and is then stored in ``self.input_grad``.
        """
        dz = self.fusion_head.backward(dlogits)
        d_act = self.scn_head.backward(dz[:, : self._split])
        if self.use_aux:
            self.aux_branch.backward(dz[:, self._split :])
        self.encoder[0].skip_input_grad = not to_input
        self.input_grad = self.encoder.backward(d_act)
        return d_act

    def predict_proba(self, scn, aux=None):
        was = self.training
        self.eval()
        try:
            return softmax(self.forward(scn, aux))
        finally:
            self.train(was)

    def forward_no_aux(self, scn):
        """Probabilities with the auxiliary branch replaced by zeros."""
        use = self.use_aux
        self.use_aux = False
        try:
            return self.predict_proba(scn)
        finally:
            self.use_aux = use
