"""Reference-guided image editing toolkit on a numpy autodiff core."""

__version__ = "0.1.0"
