import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pyramidhash import tensor as T
from pyramidhash.backbone import desk_stages
from pyramidhash.errors import ConfigError, ContractError, DimensionError
from pyramidhash.pyramid import build_hashnet
from pyramidhash.tensor import Tensor
from pyramidhash.training import (
    PAPER_PROFILE,
    OptimizerState,
    TrainConfig,
    Triplet,
    balanced_batches,
    combined_loss,
    lr_at,
    sample_triplets,
    sgd_step,
    train,
    triplet_loss,
    write_trace,
)


def test_triplet_loss_satisfied_margin():
    z, o = np.zeros(4), np.ones(4)
    assert triplet_loss(Tensor(z), Tensor(z), Tensor(o), 2.0).item() == 0.0


def test_triplet_loss_partial():
    vi = np.zeros(4)
    vk = np.array([1.0, 0, 0, 0])
    assert triplet_loss(Tensor(vi), Tensor(vi), Tensor(vk), 2.0).item() == 1.0


def test_triplet_loss_equal_pos_neg_gives_margin():
    rng = np.random.default_rng(0)
    vi, vj = rng.uniform(size=8), rng.uniform(size=8)
    assert triplet_loss(Tensor(vi), Tensor(vj), Tensor(vj), 1.75).item() == 1.75


def test_triplet_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        triplet_loss(Tensor(np.zeros(4)), Tensor(np.zeros(4)), Tensor(np.zeros(5)), 1.0)


def test_triplet_loss_kink_has_zero_gradient():
    vi = Tensor(np.zeros(2), requires_grad=True)
    # margin + 0 - 1 == 0 exactly: at the kink
    T.backward(T.add_scalar(triplet_loss(vi, Tensor(np.zeros(2)), Tensor([1.0, 0.0]), 1.0), 0.0))
    np.testing.assert_array_equal(vi.grad, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(4, 32), st.floats(0.1, 10.0), st.integers(0, 2**32 - 1))
def test_triplet_loss_bounds(q, margin, seed):
    rng = np.random.default_rng(seed)
    vi, vj, vk = rng.uniform(size=(3, q))
    loss = triplet_loss(Tensor(vi), Tensor(vj), Tensor(vk), margin).item()
    assert 0.0 <= loss <= margin + q


def test_combined_loss_zero():
    v = Tensor([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    out = combined_loss(v, v, [Triplet(0, 1, 2)], 1.0)
    assert out.combined.item() == 0.0


def test_combined_loss_mean_of_per_triplet_sums():
    # margin 1.5; triplet 0 has negative at squared distance 1 in both spaces: 0.5 + 0.5 = 1.0
    # triplet 1 is all zeros: 1.5 + 1.5 = 3.0
    codes = np.zeros((6, 1))
    codes[2, 0] = 1.0
    out = combined_loss(Tensor(codes), Tensor(codes), np.array([[0, 1, 2], [3, 4, 5]]), 1.5)
    assert out.combined.item() == 2.0
    assert out.vertical == 1.0 and out.consensus == 1.0


def test_combined_loss_is_mean_of_single_triplet_losses():
    rng = np.random.default_rng(5)
    v, vc = Tensor(rng.uniform(size=(6, 8))), Tensor(rng.uniform(size=(6, 8)))
    trip = np.array([[0, 1, 2], [3, 4, 5], [2, 0, 4], [5, 3, 1]])
    whole = combined_loss(v, vc, trip, 2.0).combined.item()
    singles = [combined_loss(v, vc, trip[i : i + 1], 2.0).combined.item() for i in range(4)]
    assert whole == pytest.approx(np.mean(singles), rel=1e-14)


def test_combined_loss_empty_batch():
    with pytest.raises(ContractError):
        combined_loss(Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4))), [], 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_combined_loss_nonnegative_and_zero_iff_all_satisfied(seed):
    rng = np.random.default_rng(seed)
    v, vc = rng.uniform(size=(2, 6, 4))
    trip = np.array([[0, 1, 2], [3, 4, 5]])
    margin = 0.5
    loss = combined_loss(Tensor(v), Tensor(vc), trip, margin).combined.item()
    assert loss >= 0
    satisfied = all(
        margin + np.sum((c[i] - c[j]) ** 2) - np.sum((c[i] - c[k]) ** 2) <= 0 for c in (v, vc) for i, j, k in trip
    )
    assert (loss == 0) == satisfied


def test_sample_triplets_two_classes():
    trips = sample_triplets([0, 0, 1, 1], 1, np.random.default_rng(0))
    assert len(trips) == 4
    for t in trips:
        t.check([0, 0, 1, 1])


def test_sample_triplets_single_class_empty():
    assert sample_triplets([0, 0, 0, 0], 3, np.random.default_rng(0)) == []


def test_sample_triplets_deterministic_and_valid():
    labels = np.random.default_rng(1).integers(0, 4, 40)
    a = sample_triplets(labels, 3, np.random.default_rng(7))
    b = sample_triplets(labels, 3, np.random.default_rng(7))
    assert a == b
    for t in a:
        t.check(labels)
    per_anchor = np.bincount([t.anchor for t in a], minlength=40)
    assert per_anchor.max() <= 3


def test_triplet_check_rejects_bad_labels():
    with pytest.raises(ContractError):
        Triplet(0, 1, 2).check([0, 1, 1])
    with pytest.raises(ContractError):
        Triplet(0, 0, 2).check([0, 0, 1])


def test_balanced_batches_cover_classes():
    labels = np.repeat(np.arange(4), 10)
    batches = balanced_batches(labels, 8, np.random.default_rng(0))
    assert len(batches) == 5
    for b in batches:
        assert np.array_equal(np.bincount(labels[b], minlength=4), [2, 2, 2, 2])


def test_sgd_plain_step():
    p = {"w": Tensor([0.0])}
    cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0)
    sgd_step(p, {"w": np.array([1.0])}, OptimizerState(), cfg)
    np.testing.assert_allclose(p["w"].data, [-0.1])


def test_sgd_zero_grad_no_change():
    p = {"w": Tensor([0.7])}
    state = OptimizerState()
    cfg = TrainConfig(weight_decay=0.0)
    for _ in range(2):
        sgd_step(p, {"w": np.array([0.0])}, state, cfg)
    np.testing.assert_array_equal(p["w"].data, [0.7])
    np.testing.assert_array_equal(state.velocity["w"], [0.0])


def test_sgd_momentum_and_decay():
    p = {"w": Tensor([1.0])}
    state = OptimizerState()
    cfg = TrainConfig(lr=0.5, momentum=0.9, weight_decay=0.1)
    sgd_step(p, {"w": np.array([2.0])}, state, cfg)  # vel = 2.1, w = 1 - 1.05
    assert p["w"].data[0] == pytest.approx(-0.05)
    sgd_step(p, {"w": np.array([0.0])}, state, cfg)  # vel = 0.9*2.1 - 0.005
    assert state.velocity["w"][0] == pytest.approx(0.9 * 2.1 - 0.005)
    assert state.iteration == 2


def test_step_schedule_paper_profile():
    assert PAPER_PROFILE.lr == 0.001 and PAPER_PROFILE.momentum == 0.9 and PAPER_PROFILE.weight_decay == 0.0005
    assert PAPER_PROFILE.step_size == 1800 and PAPER_PROFILE.epochs == 4000 and PAPER_PROFILE.batch_size == 100
    assert lr_at(PAPER_PROFILE, 1799) == 0.001
    assert lr_at(PAPER_PROFILE, 1800) == pytest.approx(0.0001, rel=1e-12)
    assert lr_at(PAPER_PROFILE, 3600) == pytest.approx(0.00001, rel=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(margin=-1.0)
    assert TrainConfig().margin_for(16) == 2.0
    assert TrainConfig(margin=1.5).margin_for(16) == 1.5


def _toy_data(seed=0):
    rng = np.random.default_rng(seed)
    labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    images = rng.uniform(0, 0.2, size=(8, 3, 32, 32))
    images[labels == 1, 0, 8:24, 8:24] += 0.7
    return images, labels


def test_train_reduces_loss():
    images, labels = _toy_data()
    net = build_hashnet(desk_stages(), 32, 16, seed=0)
    res = train(images, labels, net, TrainConfig(lr=0.003, epochs=50, batch_size=8, seed=0))
    assert len(res.epoch_losses) == 50
    assert np.mean(res.epoch_losses[-5:]) < np.mean(res.epoch_losses[:5])
    assert [r["iter"] for r in res.trace] == list(range(1, len(res.trace) + 1))


def test_train_zero_lr_keeps_parameters():
    images, labels = _toy_data()
    net = build_hashnet(desk_stages(), 32, 16, seed=0)
    before = {n: p.data.copy() for n, p in net.parameters().items()}
    train(images, labels, net, TrainConfig(lr=0.0, epochs=3, batch_size=8))
    for n, p in net.parameters().items():
        np.testing.assert_array_equal(p.data, before[n])


def test_train_same_seed_same_trace(tmp_path):
    images, labels = _toy_data()
    traces = []
    for _ in range(2):
        net = build_hashnet(desk_stages(), 32, 16, seed=3)
        traces.append(train(images, labels, net, TrainConfig(epochs=4, batch_size=8, seed=3)).trace)
        write_trace(traces[-1], tmp_path / f"t{len(traces)}.csv")
    assert traces[0] == traces[1]
    assert (tmp_path / "t1.csv").read_bytes() == (tmp_path / "t2.csv").read_bytes()
    header = (tmp_path / "t1.csv").read_text().splitlines()[0]
    assert header == "epoch,iter,loss_vertical,loss_consensus,loss_combined,lr"


def test_train_one_class_rejected():
    images, _ = _toy_data()
    net = build_hashnet(desk_stages(), 32, 16, seed=0)
    with pytest.raises(ConfigError):
        train(images, np.zeros(8, dtype=int), net, TrainConfig(epochs=1))


def test_balanced_batches_small_batch_still_pairs_classes():
    labels = np.repeat(np.arange(8), 3)
    batches = balanced_batches(labels, 8, np.random.default_rng(0))
    assert len(batches) == 3
    seen = set()
    for b in batches:
        counts = np.bincount(labels[b], minlength=8)
        assert set(counts[counts > 0]) == {2} and np.count_nonzero(counts) == 4
        assert sample_triplets(labels[b], 1, np.random.default_rng(1))
        seen.update(labels[b].tolist())
    assert seen == set(range(8))


def test_iteration_schedule_unit():
    cfg = TrainConfig(lr=1.0, step_size=3, schedule_unit="iteration")
    assert [lr_at(cfg, 0, i) for i in (0, 2, 3, 6)] == pytest.approx([1.0, 1.0, 0.1, 0.01])
    assert lr_at(TrainConfig(lr=1.0, step_size=3), 0, 10) == 1.0
    with pytest.raises(ConfigError):
        TrainConfig(schedule_unit="batch")


def test_train_iteration_budget():
    images, labels = _toy_data()
    net = build_hashnet(desk_stages(), 32, 16, seed=0)
    # 8 images, batch 4: two iterations per epoch, so 5 iterations end mid-epoch
    res = train(images, labels, net, TrainConfig(epochs=5, step_size=2, batch_size=4, schedule_unit="iteration"))
    assert [r["iter"] for r in res.trace] == [1, 2, 3, 4, 5]
    assert [r["epoch"] for r in res.trace] == [0, 0, 1, 1, 2]
    assert [r["lr"] for r in res.trace] == pytest.approx([0.003, 0.003, 0.0003, 0.0003, 0.00003])
