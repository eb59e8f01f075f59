"""Desk-scale diffusion policy: numpy network, DDPM training and sampling."""
from .diffusion import Adam, DivergenceError, NoiseSchedule, SGDMomentum, forward_diffuse, sample_chunk, train_step
from .gradcheck import GradCheckReport, grad_check
from .model import ABLATIONS, DiffusionPolicy, ObservationBundle, PolicyConfig

__all__ = ["ABLATIONS", "Adam", "DiffusionPolicy", "DivergenceError", "GradCheckReport", "NoiseSchedule",
           "ObservationBundle", "PolicyConfig", "SGDMomentum", "forward_diffuse", "grad_check",
           "sample_chunk", "train_step"]
