"""
DINO network g = h o f: backbone plus projection head over one shared ParamSet
"""
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import head as head_module
from . import vit
from .head import HeadConfig
from .ndtensor import Tensor
from .rng import STREAM_INIT, derive_rng
from .vit import BackboneOutput, ParamSet, ViTConfig


@dataclass
class DinoModel:
    """Configs plus the parameters used when a call passes none"""
    vit_config: ViTConfig = field(default_factory=ViTConfig)
    head_config: HeadConfig = field(default_factory=HeadConfig)
    params: Optional[ParamSet] = None

    @classmethod
    def create(cls, vit_config: ViTConfig, head_config: HeadConfig, seed: int,
               requires_grad: bool = True) -> 'DinoModel':
        """Backbone and head initialized from the init stream of `seed`"""
        rng = derive_rng(seed, STREAM_INIT)
        backbone = vit.init_params(vit_config, rng, requires_grad)
        projection = head_module.init_params(head_config, vit_config.dim, rng, requires_grad)
        return cls(vit_config, head_config, backbone.merged(projection))

    def _resolve(self, params: Optional[ParamSet]) -> ParamSet:
        return self.params if params is None else params

    def backbone(self, images: Union[Tensor, np.ndarray], params: Optional[ParamSet] = None,
                 collect_attn: bool = False) -> BackboneOutput:
        return vit.vit_forward(images, self.vit_config, self._resolve(params), collect_attn)

    def head(self, features: Tensor, params: Optional[ParamSet] = None) -> Tensor:
        return head_module.head_forward(features, self.head_config, self._resolve(params))

    def forward(self, images: Union[Tensor, np.ndarray], params: Optional[ParamSet] = None) -> Tensor:
        """Prototype logits of the final CLS token"""
        params = self._resolve(params)
        return self.head(self.backbone(images, params).cls_out, params)

    __call__ = forward
