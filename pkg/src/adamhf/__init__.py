"""Adaptive multimodal hierarchical fusion for survival prediction.

Pathology patch bags and genomic group tokens pass through expert-routed
transformer units, adaptive token selection, cross attention and a
low-rank plus global fusion head that outputs discrete-time hazards.
"""
from .config import RunConfig, load_config, parse_config
from .model import AdaMHF, assemble_model, forward

__version__ = "0.1.0"

__all__ = ["AdaMHF", "RunConfig", "assemble_model", "forward", "load_config", "parse_config"]
