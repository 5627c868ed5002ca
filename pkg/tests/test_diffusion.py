import math

import numpy as np
import pytest

from tempoflow import tensor as tt
from tempoflow.diffusion import (
    CountingGenerator,
    DiffusionSchedule,
    GeneratorSpec,
    ddim_denoise,
    diffuse,
    frame_decode,
    generator_weights,
    make_schedule,
    renoise_to_level,
    toy_generator,
)
from tempoflow.errors import ContractError
from tempoflow.tensor import Tensor, backward, numeric_grad


def fixed_eps(eps):
    return lambda z, c, level: Tensor(eps)


def test_schedule_endpoints_and_linearity():
    s = make_schedule(10, 1e-3)
    assert s.alpha_bar[0] == 1.0
    assert math.isclose(s.alpha_bar[10], 1e-3, rel_tol=0, abs_tol=1e-15)
    steps = np.diff(s.alpha_bar)
    assert np.allclose(steps, steps[0])


@pytest.mark.parametrize("kw", [dict(L=0), dict(L=2.5), dict(alpha_min=0.0), dict(alpha_min=1.0)])
def test_schedule_rejects_bad_ranges(kw):
    with pytest.raises(ContractError):
        make_schedule(**{"L": 10, "alpha_min": 1e-3, **kw})


def test_schedule_rejects_nonzero_eta():
    with pytest.raises(ContractError):
        DiffusionSchedule(1, (1.0, 0.5), eta=0.5)


def test_diffuse_examples():
    s = make_schedule(10, 1e-3)
    z0 = Tensor(np.random.default_rng(0).normal(size=(3, 2, 2)))
    zL = Tensor(np.random.default_rng(1).normal(size=(3, 2, 2)))
    assert np.array_equal(diffuse(z0, zL, 0, s).data, z0.data)
    quarter = DiffusionSchedule(1, (1.0, 0.25))
    assert diffuse(Tensor(1.0), Tensor(0.0), 1, quarter).item() == 0.5
    out = diffuse(z0, zL, 10, s).data
    assert np.allclose(out, math.sqrt(1e-3) * z0.data + math.sqrt(0.999) * zL.data, atol=1e-15, rtol=0)
    with pytest.raises(ContractError):
        diffuse(z0, zL, 11, s)


def test_diffuse_weights_move_monotonically():
    # the weights sum to more than one, so distances can overshoot; the weights
    # themselves shift monotonically from z0 to zL
    s = make_schedule(10)
    on_z0 = [diffuse(Tensor(1.0), Tensor(0.0), l, s).item() for l in range(11)]
    on_zL = [diffuse(Tensor(0.0), Tensor(1.0), l, s).item() for l in range(11)]
    assert on_z0[0] == 1.0 and on_zL[0] == 0.0
    assert all(b < a for a, b in zip(on_z0, on_z0[1:]))
    assert all(b > a for a, b in zip(on_zL, on_zL[1:]))


def test_generator_is_deterministic_and_checks_dims():
    s = make_schedule(10)
    rng = np.random.default_rng(0)
    z, c = Tensor(rng.normal(size=(3, 5, 6))), Tensor(rng.uniform(size=(1, 5, 6)))
    spec = GeneratorSpec(seed=3)
    a = toy_generator(z, c, 4, spec, s).data
    generator_weights.cache_clear()
    b = toy_generator(z, c, 4, spec, s).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, toy_generator(z, c, 4, GeneratorSpec(seed=4), s).data)
    with pytest.raises(ContractError):
        toy_generator(z, Tensor(np.zeros((1, 5, 5))), 4, spec, s)
    with pytest.raises(ContractError):
        toy_generator(z, c, 0, spec, s)


def test_generator_weights_are_read_only():
    w1, _ = generator_weights(GeneratorSpec(), 1)
    with pytest.raises(ValueError):
        w1[0, 0, 0, 0] = 1.0


@pytest.mark.parametrize("level", [1, 4, 10])
def test_single_step_with_fixed_eps(level):
    s = make_schedule(10)
    rng = np.random.default_rng(level)
    eps, zl = rng.normal(size=(3, 3, 3)), rng.normal(size=(3, 3, 3))
    # with a constant noise estimate every step reproduces the same clean estimate
    expect = (zl - math.sqrt(1 - s.alpha_bar[level]) * eps) / math.sqrt(s.alpha_bar[level])
    out = ddim_denoise(Tensor(zl), level, Tensor(np.zeros((1, 3, 3))), fixed_eps(eps), s).data
    assert np.allclose(out, expect, atol=1e-12, rtol=0)


@pytest.mark.parametrize("level", [1, 3, 7, 10])
def test_exact_inversion(level):
    s = make_schedule(10)
    rng = np.random.default_rng(level)
    z0, eps = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    zl = diffuse(Tensor(z0), Tensor(eps), level, s)
    out = ddim_denoise(zl, level, Tensor(np.zeros((1, 4, 4))), fixed_eps(eps), s).data
    assert np.max(np.abs(out - z0)) < 1e-10


@pytest.mark.parametrize("gamma", [1, 2, 10])
def test_renoise_round_trip(gamma):
    s = make_schedule(10)
    rng = np.random.default_rng(gamma)
    z0, zL = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    zg = renoise_to_level(Tensor(z0), Tensor(zL), gamma, s)
    out = ddim_denoise(zg, gamma, Tensor(np.zeros((1, 4, 4))), fixed_eps(zL), s).data
    assert np.max(np.abs(out - z0)) < 1e-10


def test_renoise_levels():
    s = make_schedule(10)
    z0, zL = Tensor(np.ones(3)), Tensor(np.full(3, 2.0))
    assert np.array_equal(renoise_to_level(z0, zL, 10, s).data, diffuse(z0, zL, 10, s).data)
    with pytest.raises(ContractError):
        renoise_to_level(z0, zL, 0, s)


@pytest.mark.parametrize("start", [1, 5, 10])
def test_call_count_equals_start_level(start):
    s = make_schedule(10)
    gen = CountingGenerator(lambda z, c, level: toy_generator(z, c, level, GeneratorSpec(), s))
    z = Tensor(np.random.default_rng(0).normal(size=(3, 4, 4)))
    ddim_denoise(z, start, Tensor(np.zeros((1, 4, 4))), gen, s)
    assert gen.calls == start
    with pytest.raises(ContractError):
        ddim_denoise(z, 0, Tensor(np.zeros((1, 4, 4))), gen, s)


def test_frame_decode_examples():
    assert np.all(frame_decode(Tensor(np.zeros((3, 2, 2)))).data == 0.5)
    assert np.all(frame_decode(Tensor(np.ones((3, 2, 2)))).data == 1.0)
    x = Tensor(np.array([-1.5, -0.99, 0.0, 0.99, 1.5]), requires_grad=True)
    backward(tt.sum_all(frame_decode(x)))
    assert x.grad.tolist() == [0.0, 0.5, 0.5, 0.5, 0.0]


@pytest.mark.parametrize("prediction", ["sample", "epsilon"])
def test_generator_gradient_finite_differences(prediction):
    s = make_schedule(10)
    spec = GeneratorSpec(seed=1, prediction=prediction)
    rng = np.random.default_rng(2)
    z0, c = rng.uniform(-1, 1, size=(3, 4, 4)), Tensor(rng.uniform(size=(1, 4, 4)))
    w = rng.normal(size=(3, 4, 4))
    z = Tensor(z0, requires_grad=True)
    backward(tt.dot(toy_generator(z, c, 6, spec, s), Tensor(w)))
    fd = numeric_grad(lambda v: float((toy_generator(Tensor(v), c, 6, spec, s).data * w).sum()), z0)
    assert np.max(np.abs(z.grad - fd)) / np.max(np.abs(fd)) < 1e-4


def test_end_to_end_gradient():
    s = make_schedule(3)
    spec = GeneratorSpec(seed=0)
    rng = np.random.default_rng(0)
    zL, c = rng.normal(size=(3, 4, 4)) * 0.3, Tensor(rng.uniform(size=(1, 4, 4)))

    def f(v):
        return tt.sum_all(frame_decode(ddim_denoise(v, 3, c, spec, s)))

    z = Tensor(zL, requires_grad=True)
    backward(f(z))
    fd = numeric_grad(lambda v: f(Tensor(v)).item(), zL)
    assert np.max(np.abs(z.grad - fd)) / np.max(np.abs(fd)) < 1e-3
