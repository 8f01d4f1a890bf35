"""PDFNet semantic segmentation family on a small numpy autodiff engine."""
from .tensor import ConfigurationError, DimensionError, Tensor
from .network import ArchOptions, Network, VariantSpec, build_network, parse_variant, stage_channel_table

__version__ = "0.1.0"
