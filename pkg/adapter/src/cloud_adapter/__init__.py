"""Cloud export adapter: feed-forward 3D model predictions -> cloud files."""

from .export import ExportManifest, discover_images, export_cloud, load_intrinsics
from .models import BACKENDS, ModelUnavailable, STUB_TRUE_SCALE, get_backend

__version__ = "0.1.0"
