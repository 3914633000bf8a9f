"""U-Net stain normalization trained from a stain-transform teacher, with hand-written backprop."""

from .data import Teacher, TeacherParams, TileGrid, assemble_pairs, stitch, teacher_transform, tile_image
from .metrics import frechet_distance, psnr, ssim
from .models import ModelSpec, build_model, build_pixelmapper, build_unet, infer
from .optim import TrainConfig, cosine_lr, sgd_step

__version__ = "0.1.0"
