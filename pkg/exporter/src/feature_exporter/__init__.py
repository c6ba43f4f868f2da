"""Feature exporter: videos + captions -> UCFA v1 containers."""

from .exporter import ClipEncoder, ExportJob, ExportSummary, HashEncoder, export, load_frames, sample_indices, write_ucfa

__version__ = "0.1.0"
