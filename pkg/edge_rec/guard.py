"""Read/write guard around a model's parameters."""

import threading
import time
from contextlib import contextmanager
from typing import Generic, Optional, TypeVar

ModelT = TypeVar("ModelT")


class ModelGuard(Generic[ModelT]):
    """
    Shares one model between inference threads and a single updater.

    Any number of inference sections (sampling, evaluation, tile workers) may
    hold the model at once; an update section (optimizer step, checkpoint load)
    waits for them to finish and holds it exclusively. Waiting updaters block
    new inference sections, so training is never starved by a sampler.

    ``version`` counts completed updates; inference results can record the
    version they were computed with.
    """

    def __init__(self, model: ModelT):
        self._model = model
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)
        self._readers = 0
        self._updaters_waiting = 0
        self._updating = False
        self._version = 0

    @property
    def model(self) -> ModelT:
        return self._model

    @property
    def version(self) -> int:
        with self._lock:
            return self._version

    @property
    def active_readers(self) -> int:
        with self._lock:
            return self._readers

    def _wait(self, blocked, deadline: Optional[float]) -> bool:
        while blocked():
            if deadline is None:
                self._changed.wait()
                continue
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not self._changed.wait(timeout=remaining):
                if blocked():
                    return False
        return True

    def acquire_inference(self, timeout: Optional[float] = None) -> bool:
        """Enter an inference section. Blocks while an update is active or waiting."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            if not self._wait(lambda: self._updating or self._updaters_waiting > 0, deadline):
                return False
            self._readers += 1
            return True

    def release_inference(self) -> None:
        with self._lock:
            self._readers -= 1
            if self._readers == 0:
                self._changed.notify_all()

    def acquire_update(self, timeout: Optional[float] = None) -> bool:
        """Enter the update section. Blocks until all inference sections and updates finish."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            self._updaters_waiting += 1
            try:
                if not self._wait(lambda: self._readers > 0 or self._updating, deadline):
                    return False
                self._updating = True
                return True
            finally:
                self._updaters_waiting -= 1
                if not self._updating:
                    self._changed.notify_all()

    def release_update(self) -> None:
        with self._lock:
            self._updating = False
            self._version += 1
            self._changed.notify_all()

    @contextmanager
    def inference(self):
        """Context manager yielding the model for read-only use."""
        self.acquire_inference()
        try:
            yield self._model
        finally:
            self.release_inference()

    @contextmanager
    def update(self):
        """Context manager yielding the model for exclusive modification."""
        self.acquire_update()
        try:
            yield self._model
        finally:
            self.release_update()
