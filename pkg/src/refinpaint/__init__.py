"""Reference-guided texture/structure inpainting, built on a small
rank-4 autodiff engine.

Layout:
  tensor     autodiff engine (conv, resize, pointwise primitives)
  optim      Adam
  align      deformable conv, offset estimator, partial conv, equalization
  rtv        structure image extraction (relative total variation)
  network    encoder/decoder assembly and discriminator
  losses     reconstruction / perceptual / style / relativistic LS / branch
  sift       keypoint detection and descriptor matching
  data       pair mining, masks, reference modes, PNG I/O
  metrics    PSNR / SSIM
  checkpoint tensor archive persistence
  train      training loop
  evaluate   bucketed evaluation and timing
  gradcheck  finite-difference verification
  cli        command line surface
"""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
