"""Exception types raised across the toolkit."""


class ConfigError(ValueError):
    """Invalid architecture, plan, or experiment configuration."""


class NumericError(RuntimeError):
    """A tensor or loss term became non-finite.

    ``stage`` and ``step`` identify where the failure happened when known.
    """

    def __init__(self, message, stage=None, step=None, term=None):
        context = []
        if stage is not None:
            context.append(f"stage={stage}")
        if step is not None:
            context.append(f"step={step}")
        if term is not None:
            context.append(f"term={term}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.stage = stage
        self.step = step
        self.term = term


class CheckpointError(RuntimeError):
    """Checkpoint is missing, corrupted, or incompatible with the requested config."""
