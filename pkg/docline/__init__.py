"""
docline - textline-level document pre-training at desk scale
"""

from .version import __version__, VERSION_SHORT, VERSION_MAJOR, VERSION_MINOR, VERSION_PATCH

__all__ = ['__version__', 'VERSION_SHORT', 'VERSION_MAJOR', 'VERSION_MINOR', 'VERSION_PATCH']
