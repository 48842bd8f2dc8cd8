"""The four cooperating services and their shared runtime plumbing."""

from .config import ServiceConfig, DepRegistryEntry, parse_config, parse_config_file
from .pasp import PaspService
from .aasp import AaspService
from .pdp import PdpService
from .dep import DepService

__all__ = [
    "AaspService",
    "DepRegistryEntry",
    "DepService",
    "PaspService",
    "PdpService",
    "ServiceConfig",
    "parse_config",
    "parse_config_file",
]
