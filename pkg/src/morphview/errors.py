"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, dimensions, or arguments. CLI exit code 2."""


class DegenerateNormalizerError(ValueError):
    """Keypoint normalizer (intercanthal distance) collapsed below tolerance."""


class TrainingFault(RuntimeError):
    """Non-finite loss or other unrecoverable fault during optimization.

    Carries a diagnostics dict (timestep, input norms, step, item ids)
    so the failure can be reported without re-running.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})

    def __str__(self):
        base = super().__str__()
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in sorted(self.diagnostics.items()))
            return f"{base} [{details}]"
        return base
