"""Patch-based deep-prior quantitative susceptibility mapping.

Modules: ``volume`` (grids and file I/O), ``spectral`` (dipole operator),
``phantom`` (synthetic objects), ``patchwork`` (patch extraction and
overlap-add), ``neural`` (3D UNet with hand-written backpropagation and
Adam), ``baselines`` (TKD, TV, TGV), ``pdip`` (the alternating solver),
``metrics`` (RMSE, SSIM, PSNR), ``config`` and ``cli``.
"""

__version__ = "0.1.0"
