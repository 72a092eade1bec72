"""Memory-efficient clip diffusion for long talking-avatar generation, at desk scale."""
from .config import RunConfig, desk_preset, load_config

__version__ = "0.1.0"
__all__ = ["RunConfig", "desk_preset", "load_config", "__version__"]
