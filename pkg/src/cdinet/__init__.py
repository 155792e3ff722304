"""CDI-Net: joint denoising, limited-angle completion and mu-map prediction
for emission tomography, built on a small numpy autodiff engine."""

__version__ = "0.1.0"
