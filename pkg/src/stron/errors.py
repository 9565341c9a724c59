"""Exception types shared across the solver stack."""


class NumericError(RuntimeError):
    """A computation produced non-finite values; message carries context."""
