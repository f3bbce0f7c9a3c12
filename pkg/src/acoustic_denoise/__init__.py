"""Two-stage self-supervised denoising for acoustic camera images.

A U-Net trained by neighbour subsampling gives a first estimate; a guided
filter pass restores detail around salient edges. Quality metrics, a
keypoint-matching harness and a rank-weighted model selector support
choosing a denoiser for downstream matching.
"""

from .errors import DataError, NumericError
from .image import ImageF, load_image, save_image

__all__ = ["DataError", "NumericError", "ImageF", "load_image", "save_image"]
__version__ = "0.1.0"
