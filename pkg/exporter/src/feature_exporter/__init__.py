"""Frozen vision-backbone token export in the SSMP feature format."""

__version__ = "0.1.0"

from .backbones import BACKBONES, Backbone, build_backbone
from .export import ExportSpec, discover_images, export
from .writer import FeatureWriter
