from .checkpoint import VERSION, load_checkpoint, save_checkpoint
from .grids import RbfGrid, SplineGrid, bspline_basis, bspline_values, rbf_basis
from .layers import (
    ConvLayer, ConvStack, FastKanLayer, KanLayer, MlpBlock, conv_apply,
    fastkan_layer_forward, kan_layer_forward, mlp_block_forward, rmsnorm,
)
from .spec import (
    KINDS, BackboneSpec, backbone_forward, frozen_names, init_backbone,
    param_count, param_layout,
)
