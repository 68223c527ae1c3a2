import pytest
import torch

from deyo.gradflow import StopGradientTape, replay_stop_gradients, stop_gradient


def f(x):
    return (x * stop_gradient(x)).sum()


def test_plain_stop_gradient_is_detach():
    x = torch.tensor([2.0], requires_grad=True)
    f(x).backward()
    assert x.grad.item() == 2.0


def test_replay_freezes_stopped_values():
    x = torch.tensor([2.0], requires_grad=True)
    tape = StopGradientTape()
    with replay_stop_gradients(tape):
        f(x).backward()
        tape.rewind()
        with torch.no_grad():
            # with the stopped factor held at 2, the function is linear with slope 2
            moved = f(torch.tensor([3.0])).item()
    assert moved == 6.0 and x.grad.item() == 2.0


def test_replay_out_of_step_raises():
    tape = StopGradientTape()
    with replay_stop_gradients(tape):
        stop_gradient(torch.zeros(2))
        tape.rewind()
        with pytest.raises(RuntimeError, match="diverged"):
            stop_gradient(torch.zeros(3))
    assert stop_gradient(torch.ones(1)).item() == 1.0  # the tape is gone outside the context
