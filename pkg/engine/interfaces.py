"""Protocol interfaces for engine backends."""

from __future__ import annotations

from typing import TYPE_CHECKING, Protocol, runtime_checkable

if TYPE_CHECKING:  # pragma: no cover - typing only
    import numpy as np

    from .trajectory import MavSimState


@runtime_checkable
class IOBackend(Protocol):
    """Interface for the console the pipeline reports to."""

    def output(self, text: str) -> None:  # pragma: no cover - interface
        """Display ``text`` to the user."""
        ...


@runtime_checkable
class OdometrySource(Protocol):
    """Interface for the position/velocity feedback used by the tracker."""

    def reset(self, sim: MavSimState) -> None:  # pragma: no cover - interface
        """Start a new flight from the given simulator state."""
        ...

    def step(self, sim: MavSimState, accel: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:  # pragma: no cover - interface
        """Return the estimated ``(position, velocity)`` after the simulator advanced by ``dt``."""
        ...


__all__ = ["IOBackend", "OdometrySource"]
