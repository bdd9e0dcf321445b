from .exporter import (ExportManifest, UnsupportedArchitectureError,
                       engine_config_from_source, export, map_tensors)
from .rfwt_writer import EngineConfig, schema_names, write_rfwt

__version__ = "0.1.0"
