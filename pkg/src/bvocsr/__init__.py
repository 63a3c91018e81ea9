"""Super-resolution of gridded isoprene emission maps with emission-driver channels."""

__version__ = "0.1.0"
