"""Guard that keeps target-domain labels out of every training path."""

from __future__ import annotations

import contextlib
import contextvars

_TRAINING: contextvars.ContextVar[str | None] = contextvars.ContextVar("bwuda_training", default=None)


class TargetLabelAccessError(RuntimeError):
    """Raised when code running inside a training context reads target labels."""


@contextlib.contextmanager
def sealed(what: str = "training"):
    """Mark the enclosed block as a training path; target labels become unreadable."""
    token = _TRAINING.set(what)
    try:
        yield
    finally:
        _TRAINING.reset(token)


def active() -> str | None:
    return _TRAINING.get()


def check_access() -> None:
    what = _TRAINING.get()
    if what is not None:
        raise TargetLabelAccessError(f"target evaluation labels were read during {what}")
