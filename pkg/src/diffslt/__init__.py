"""Toy-scale latent-diffusion sign language translation in numpy."""

from diffslt.config import RunConfig
from diffslt.diffusion import build_schedule, forward_noise
from diffslt.metrics import bleu_n, corpus_bleu, rouge_l
from diffslt.sampling import cfg_combine, mbr_select, oracle_select

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "bleu_n",
    "build_schedule",
    "cfg_combine",
    "corpus_bleu",
    "forward_noise",
    "mbr_select",
    "oracle_select",
    "rouge_l",
]
