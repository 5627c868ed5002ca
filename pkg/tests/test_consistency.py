import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tempoflow import tensor as tt
from tempoflow.consistency import (
    LatentSequence,
    OptimConfig,
    _latent_builder,
    accumulate_gradients_framewise,
    discrepancy,
    expand_keyframes,
    frame0_loss,
    frame0_references,
    init_noise,
    keyframe_indices,
    objective,
    optimize,
    render,
    slerp,
    window_discrepancy,
)
from tempoflow.diffusion import GeneratorSpec, ddim_denoise, frame_decode, make_schedule
from tempoflow.errors import ContractError, NumericalError
from tempoflow.flow import FlowField, OcclusionMask
from tempoflow.scene import Sprite, SceneSpec, condition_stack, generate
from tempoflow.tensor import Tape, Tensor, backward


def random_clip(rng, T, h=6, w=6, spread=2):
    frames = [rng.uniform(0, 1, size=(3, h, w)) for _ in range(T)]
    flows = [FlowField(rng.integers(-spread, spread + 1, size=(h, w, 2)).astype(float)) for _ in range(T - 1)]
    occs = [OcclusionMask(rng.random((h, w)) < 0.2) for _ in range(T - 1)]
    return frames, flows, occs


def tiny_scene(T=3, size=8):
    spec = SceneSpec(width=size, height=size, T=T, sprites=[Sprite(w=3, h=3, x=1, y=2, vx=1)])
    return generate(spec)


# objective ------------------------------------------------------------------


def test_constant_video_has_zero_discrepancy():
    f = np.random.default_rng(0).uniform(size=(3, 4, 4))
    flows = [FlowField.zeros(4, 4)] * 3
    occs = [OcclusionMask.clear(4, 4)] * 3
    for t in range(4):
        assert discrepancy([f] * 4, flows, occs, t, 4).item() == 0.0
    assert objective([f] * 4, flows, occs).item() == 0.0


def test_two_frame_hand_instantiation():
    a, b = 0.3, 0.8
    frames = [np.full((1, 1, 1), a), np.full((1, 1, 1), b)]
    flows, occs = [FlowField.zeros(1, 1)], [OcclusionMask.clear(1, 1)]
    assert discrepancy(frames, flows, occs, 0, 1).item() == 0.0
    assert math.isclose(discrepancy(frames, flows, occs, 1, 1).item(), (a - b) ** 2, rel_tol=1e-15)
    assert math.isclose(objective(frames, flows, occs, 1).item(), (a - b) ** 2 / 2, rel_tol=1e-15)


def test_discrepancy_index_range():
    frames, flows, occs = random_clip(np.random.default_rng(0), 3)
    with pytest.raises(ContractError):
        discrepancy(frames, flows, occs, 3, 2)
    with pytest.raises(ContractError):
        objective(frames, flows[:1], occs)


@pytest.mark.parametrize("seed", range(6))
def test_objective_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 5))
    frames, flows, occs = random_clip(rng, T)
    for S in range(1, T + 1):
        ref = oracles.objective(frames, [f.vectors for f in flows], [o.occluded for o in occs], S)
        assert math.isclose(objective(frames, flows, occs, S).item(), ref, rel_tol=1e-12, abs_tol=1e-15)


def test_objective_saturates_in_window():
    frames, flows, occs = random_clip(np.random.default_rng(3), 5)
    vals = [objective(frames, flows, occs, S).item() for S in (4, 5, 9)]
    assert vals[0] == vals[1] == vals[2]
    assert objective(frames, flows, occs, 1).item() != vals[0]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_objective_non_negative(seed):
    rng = np.random.default_rng(seed)
    frames, flows, occs = random_clip(rng, int(rng.integers(2, 5)))
    assert objective(frames, flows, occs).item() >= 0.0


def test_scene_objective_is_zero():
    b = tiny_scene(T=5)
    assert objective(b.frames, b.flows, b.occlusions).item() == 0.0


# initial noise ----------------------------------------------------------------


def test_init_noise():
    shared = init_noise(OptimConfig(T=4), (3, 4, 4))
    assert all(np.array_equal(shared.latents[0], z) for z in shared.latents)
    assert shared.level == 10
    indep = init_noise(OptimConfig(T=2, shared_init=False), (3, 4, 4))
    assert not np.array_equal(indep.latents[0], indep.latents[1])
    again = init_noise(OptimConfig(T=2, shared_init=False), (3, 4, 4))
    assert all(np.array_equal(a, b) for a, b in zip(indep.latents, again.latents))


def test_config_validation():
    for kw in (dict(gamma=0), dict(gamma=11), dict(k=0), dict(S=0), dict(lr=0.0)):
        with pytest.raises(ContractError):
            OptimConfig(T=3, **kw)
    cfg = OptimConfig(T=5)
    assert (cfg.S, cfg.gamma, cfg.lr, cfg.epochs) == (5, 10, 1e-3, 300)


# framewise accumulation --------------------------------------------------------


def full_graph_grads(variables, k, T, conds, flows, occs, S, spec, sched, level, prev_frames):
    """One graph over all frames with detached references: the cached-reference objective."""
    latent_of = _latent_builder(variables, k, T)
    frames = [frame_decode(ddim_denoise(latent_of(t), level, conds[t], spec, sched)) for t in range(T)]
    refs = [f.detach() for f in frames]
    loss = Tensor(0.0)
    for t in range(1, T):
        loss = tt.add(loss, tt.mul(window_discrepancy(frames[t], refs, flows, occs, t, S), 1.0 / (min(S, t) + 1)))
    if prev_frames is not None:
        loss = tt.add(loss, frame0_loss(frames[0], frame0_references(prev_frames, flows, occs, S)))
    backward(loss)
    return {t: np.zeros(v.shape) if v.grad is None else v.grad.copy() for t, v in variables.items()}


@pytest.mark.parametrize("T,k,S", [(2, 1, 2), (3, 1, 1), (4, 1, 4), (4, 2, 2), (4, 3, 4)])
def test_framewise_equals_full_graph(T, k, S):
    rng = np.random.default_rng(T * 10 + k)
    sched = make_schedule(3)
    spec = GeneratorSpec(seed=1)
    _, flows, occs = random_clip(rng, T, 5, 5, 1)
    conds = [Tensor(rng.uniform(size=(1, 5, 5))) for _ in range(T)]
    idx = keyframe_indices(T, k)
    init = {t: rng.normal(size=(3, 5, 5)) for t in idx}
    prev = [Tensor(rng.uniform(size=(3, 5, 5))) for _ in range(T)]
    for prev_frames in (None, prev):
        a = {t: Tensor(z, requires_grad=True) for t, z in init.items()}
        Tape.reset_stats()
        accumulate_gradients_framewise(_latent_builder(a, k, T), conds, flows, occs, S, spec, sched, 2, prev_frames)
        assert Tape.peak == 1 and Tape.live == 0
        b = {t: Tensor(z, requires_grad=True) for t, z in init.items()}
        ref = full_graph_grads(b, k, T, conds, flows, occs, S, spec, sched, 2, prev_frames)
        for t in idx:
            ga = a[t].grad if a[t].grad is not None else np.zeros((3, 5, 5))
            assert np.max(np.abs(ga - ref[t])) < 1e-10


def test_frame0_gradient_only_from_second_pass():
    b = tiny_scene(T=3)
    conds = [Tensor(c) for c in condition_stack(b)]
    sched = make_schedule(3)
    rng = np.random.default_rng(0)
    v = {t: Tensor(rng.normal(size=(3, 8, 8)), requires_grad=True) for t in range(3)}
    latent_of = _latent_builder(v, 1, 3)
    frames = accumulate_gradients_framewise(latent_of, conds, b.flows, b.occlusions, 3, GeneratorSpec(), sched, 3)
    assert v[0].grad is None
    assert v[1].grad is not None and np.abs(v[1].grad).sum() > 0
    for z in v.values():
        z.zero_grad()
    accumulate_gradients_framewise(latent_of, conds, b.flows, b.occlusions, 3, GeneratorSpec(), sched, 3, frames)
    assert v[0].grad is not None and np.abs(v[0].grad).sum() > 0


def test_objective_gradient_finite_differences():
    rng = np.random.default_rng(4)
    sched = make_schedule(3)
    spec = GeneratorSpec(seed=2)
    _, flows, occs = random_clip(rng, 3, 4, 4, 1)
    conds = [Tensor(rng.uniform(size=(1, 4, 4))) for _ in range(3)]
    z0 = [rng.normal(size=(3, 4, 4)) for _ in range(3)]

    def loss(zs):
        frames = [frame_decode(ddim_denoise(z, 2, c, spec, sched)) for z, c in zip(zs, conds)]
        return objective(frames, flows, occs)

    zs = [Tensor(z, requires_grad=True) for z in z0]
    backward(loss(zs))
    for i in range(3):
        def f(v, i=i):
            return loss([Tensor(v) if j == i else Tensor(z0[j]) for j in range(3)]).item()
        fd = tt.numeric_grad(f, z0[i])
        assert np.max(np.abs(zs[i].grad - fd)) <= 1e-3 * max(np.max(np.abs(fd)), 1e-8)


# slerp and keyframes ----------------------------------------------------------


def test_slerp_examples():
    rng = np.random.default_rng(0)
    u, v = Tensor(rng.normal(size=(3, 2, 2))), Tensor(rng.normal(size=(3, 2, 2)))
    assert np.allclose(slerp(u, v, 0.0).data, u.data, atol=1e-12)
    assert np.allclose(slerp(u, v, 1.0).data, v.data, atol=1e-12)
    e1, e2 = Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0]))
    assert np.allclose(slerp(e1, e2, 0.5).data, np.array([1.0, 1.0]) * math.sqrt(2) / 2, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0, 1))
def test_slerp_preserves_norm(seed, alpha):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=12), rng.normal(size=12)
    r = rng.uniform(0.1, 10)
    u, v = u / np.linalg.norm(u) * r, v / np.linalg.norm(v) * r
    assert abs(np.linalg.norm(slerp(Tensor(u), Tensor(v), alpha).data) - r) < 1e-9


def test_slerp_degenerate_cases():
    u = Tensor(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(slerp(u, u, 0.3).data, u.data)
    with pytest.raises(ContractError):
        slerp(u, Tensor(-u.data), 0.5)
    with pytest.raises(ContractError):
        slerp(u, Tensor(np.zeros(3)), 0.5)
    with pytest.raises(ContractError):
        slerp(u, u, 1.5)


def test_slerp_gradient():
    rng = np.random.default_rng(1)
    u0, v0, w = rng.normal(size=6), rng.normal(size=6), rng.normal(size=6)
    u, v = Tensor(u0, requires_grad=True), Tensor(v0, requires_grad=True)
    backward(tt.dot(slerp(u, v, 0.3), Tensor(w)))
    fu = tt.numeric_grad(lambda x: float(slerp(Tensor(x), Tensor(v0), 0.3).data @ w), u0)
    fv = tt.numeric_grad(lambda x: float(slerp(Tensor(u0), Tensor(x), 0.3).data @ w), v0)
    assert np.allclose(u.grad, fu, atol=1e-8) and np.allclose(v.grad, fv, atol=1e-8)


def test_keyframe_examples():
    assert keyframe_indices(5, 4) == [0, 4]
    assert keyframe_indices(6, 4) == [0, 4, 5]
    assert keyframe_indices(7, 1) == list(range(7))
    rng = np.random.default_rng(0)
    lat = [rng.normal(size=(3, 2, 2)) for _ in range(6)]
    out = expand_keyframes(lat, 1, 6)
    assert all(np.array_equal(a.data, b) for a, b in zip(out, lat))
    out = expand_keyframes({0: lat[0], 4: lat[4], 5: lat[5]}, 4, 6)
    assert np.array_equal(out[5].data, lat[5]) and np.array_equal(out[4].data, lat[4])
    for t in (1, 2, 3):
        assert np.allclose(out[t].data, slerp(Tensor(lat[0]), Tensor(lat[4]), t / 4).data)
    with pytest.raises(ContractError):
        expand_keyframes({0: lat[0], 4: lat[4]}, 4, 6)


def test_interpolation_weight_favours_near_keyframe():
    u, v = Tensor(np.array([1.0, 0.0])), Tensor(np.array([0.0, 1.0]))
    out = expand_keyframes({0: u, 4: v}, 4, 5)
    assert out[1].data[0] > out[1].data[1]
    assert out[3].data[0] < out[3].data[1]


@pytest.mark.parametrize("T", [1, 2, 5, 6, 9, 13])
def test_expand_length_invariant_to_k(T):
    rng = np.random.default_rng(T)
    lat = [rng.normal(size=(3, 2, 2)) for _ in range(T)]
    for k in range(1, T + 1):
        idx = keyframe_indices(T, k)
        assert len(expand_keyframes({t: lat[t] for t in idx}, k, T)) == T


# optimize ---------------------------------------------------------------------


def test_consistent_scene_keeps_latents():
    T, n = 3, 6
    cond = np.full((1, n, n), 0.4)
    flows = [FlowField.zeros(n, n)] * (T - 1)
    occs = [OcclusionMask.clear(n, n)] * (T - 1)
    cfg = OptimConfig(T=T, L=3, epochs=3, patience=0)
    sched = make_schedule(3)
    init = init_noise(cfg, (3, n, n))
    out, rep = optimize(cfg, [cond] * T, flows, occs, GeneratorSpec(), sched, init=init)
    assert all(v == 0.0 for v in rep.objective)
    assert all(np.array_equal(a, b) for a, b in zip(out.latents, init.latents))


def test_optimize_report_and_forward_counts():
    b = tiny_scene(T=3)
    conds = condition_stack(b)
    reports = {}
    for gamma in (2, 10):
        cfg = OptimConfig(T=3, gamma=gamma, epochs=2, patience=0)
        _, reports[gamma] = optimize(cfg, conds, b.flows, b.occlusions, GeneratorSpec(), make_schedule(10))
    assert reports[10].forwards_per_epoch == 3 * 10
    assert reports[2].forwards_per_epoch == 3 * 2
    assert reports[2].forwards_per_epoch / reports[10].forwards_per_epoch == 0.2
    r = reports[2]
    assert r.setup_forwards == 3 * 10
    assert r.generator_forwards == r.setup_forwards + 3 * r.forwards_per_epoch + 3 * 2
    assert r.peak_live_graphs == 1
    assert len(r.objective) == 3 and r.epochs_run == 2
    assert len(r.per_frame_discrepancy) == 3 and r.per_frame_discrepancy[0] == 0.0
    assert min(r.objective) == pytest.approx(r.final_objective, rel=1e-12)


def test_optimize_is_deterministic_and_improves():
    b = tiny_scene(T=3)
    conds = condition_stack(b)
    cfg = OptimConfig(T=3, L=3, epochs=15, lr=1e-2, patience=0)
    runs = [optimize(cfg, conds, b.flows, b.occlusions, GeneratorSpec(), make_schedule(3)) for _ in range(2)]
    (la, ra), (lb, rb) = runs
    assert ra.objective == rb.objective
    assert all(np.array_equal(x, y) for x, y in zip(la.latents, lb.latents))
    best = np.minimum.accumulate(ra.objective)
    assert np.all(np.diff(best) <= 0)
    assert ra.final_objective < ra.objective[0]


def test_optimize_keyframes_touch_expected_latents():
    b = tiny_scene(T=6)
    cfg = OptimConfig(T=6, L=2, k=4, epochs=1, patience=0)
    out, rep = optimize(cfg, condition_stack(b), b.flows, b.occlusions, GeneratorSpec(), make_schedule(2))
    assert rep.optimized_latents == [0, 4, 5]
    assert out.T == 6


def test_early_stop():
    T, n = 2, 4
    flows, occs = [FlowField.zeros(n, n)], [OcclusionMask.clear(n, n)]
    cfg = OptimConfig(T=T, L=2, epochs=100, patience=3)
    _, rep = optimize(cfg, [np.zeros((1, n, n))] * T, flows, occs, GeneratorSpec(), make_schedule(2))
    # a zero objective cannot improve, so the run stops after patience + 1 evaluations
    assert rep.epochs_run == 3 and len(rep.objective) == 4


def test_non_finite_latents_abort():
    b = tiny_scene(T=2)
    cfg = OptimConfig(T=2, L=2, epochs=3, lr=1e308, patience=0)
    with pytest.raises(NumericalError):
        optimize(cfg, condition_stack(b), b.flows, b.occlusions, GeneratorSpec(), make_schedule(2))


def test_render_threads_match_serial():
    b = tiny_scene(T=4)
    conds = [Tensor(c) for c in condition_stack(b)]
    sched = make_schedule(3)
    lat = init_noise(OptimConfig(T=4, L=3), (3, 8, 8)).latents
    a = render(lat, conds, GeneratorSpec(), sched, 3)
    c = render(lat, conds, GeneratorSpec(), sched, 3, workers=3)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, c))
