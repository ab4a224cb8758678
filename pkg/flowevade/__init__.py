from .config import PROJECT_ROOT, Settings, derive_seed, get_settings

__version__ = "0.1.0"

__all__ = ["PROJECT_ROOT", "Settings", "derive_seed", "get_settings", "__version__"]
