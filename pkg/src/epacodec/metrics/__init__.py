from .bd import RDCurve, RDPoint, bd_psnr, bd_rate
from .quality import MetricError, ms_ssim, psnr

__all__ = ["MetricError", "RDCurve", "RDPoint", "bd_psnr", "bd_rate", "ms_ssim", "psnr"]
