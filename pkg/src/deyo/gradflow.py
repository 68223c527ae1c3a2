"""Deliberate stop-gradient points, with a record/replay switch for gradient checks.

Outside a tape ``stop_gradient`` is ``detach``. Inside ``replay_stop_gradients``
the first pass records every stopped value and later passes get those values
back in the same order, so a finite-difference probe sees the stopped
quantities as the constants autograd treats them as.
"""
from __future__ import annotations

from contextlib import contextmanager

import torch

_active: "StopGradientTape | None" = None


class StopGradientTape:
    def __init__(self):
        self.values: list[torch.Tensor] = []
        self.replaying = False
        self._cursor = 0

    def visit(self, x: torch.Tensor) -> torch.Tensor:
        if not self.replaying:
            v = x.detach().clone()
            self.values.append(v)
            return v
        if self._cursor >= len(self.values) or self.values[self._cursor].shape != x.shape:
            raise RuntimeError("stop-gradient replay diverged from the recorded pass")
        v = self.values[self._cursor]
        self._cursor += 1
        return v

    def rewind(self) -> None:
        self.replaying = True
        self._cursor = 0


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach() if _active is None else _active.visit(x)


@contextmanager
def replay_stop_gradients(tape: StopGradientTape):
    global _active
    prev, _active = _active, tape
    try:
        yield tape
    finally:
        _active = prev
