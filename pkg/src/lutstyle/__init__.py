"""LUT-based color style transfer."""

from .lut import (ClutBank, CubeParseError, Lut3d, apply_lut, compose_luts, identity_lut,
                  materialize_clut, parse_cube, write_cube)

__version__ = "0.1.0"
