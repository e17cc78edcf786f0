from src.losses.image_losses import (
    LossWeights,
    StageLoss,
    dssim_loss,
    l1_loss,
    loss_finetune,
    loss_motion,
    loss_static,
    perceptual_loss,
)
from src.losses.metrics import masked_psnr, psnr, ssim
