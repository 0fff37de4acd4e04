"""3D object localization on synthetic radiance fields with a two-stream set-prediction transformer."""

__version__ = "0.1.0"
