"""Package version, reported by `docline --version`."""

__version__ = '0.3.0'

VERSION_MAJOR, VERSION_MINOR, VERSION_PATCH = (int(part) for part in __version__.split('.'))
VERSION_SHORT = f"{VERSION_MAJOR}.{VERSION_MINOR}"
