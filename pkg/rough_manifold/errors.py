from __future__ import annotations

from typing import Any, Dict, Optional


class RoughManifoldError(Exception):
    pass


class InvalidArgumentError(RoughManifoldError, ValueError):
    pass


class SpectrumViolationError(RoughManifoldError):
    pass


class InvalidSplitError(RoughManifoldError):
    pass


class ConfigError(RoughManifoldError):
    pass


class NumericalFailure(RoughManifoldError):
    pass


class ConvergenceFailure(RoughManifoldError):
    def __init__(self, reason: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(reason)
        self.reason = reason
        self.diagnostics = dict(diagnostics or {})


class GapViolationError(ConvergenceFailure):
    pass


class BoundViolationError(RoughManifoldError):
    pass
