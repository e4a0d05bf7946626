import json

import numpy as np
import pytest

from conftest import TINY
from oracles import ADAMAX_FIXTURE, ADAMAX_GRADS, GOLDEN_LR
from vqacoin.diffmath import Tensor
from vqacoin.errors import ConfigError, ContractError, NumericError
from vqacoin.model import ModelConfig, VqaCoinModel, load_checkpoint
from vqacoin.train import Adamax, TrainSchedule, clip_grad_norm, lr_at_epoch, train_loop


def quick_schedule(**kw):
    base = dict(epochs=2, warmup_epochs=1, lr_start=5e-3, lr_plateau=5e-3, plateau_until_epoch=2,
                decay_epochs=[], batch_size=8)
    return TrainSchedule(**{**base, **kw})


def test_golden_schedule_is_bit_exact():
    assert [lr_at_epoch(TrainSchedule(), e) for e in range(1, 19)] == GOLDEN_LR


def test_schedule_bounds_and_validation():
    with pytest.raises(ContractError):
        lr_at_epoch(TrainSchedule(), 0)
    with pytest.raises(ContractError):
        lr_at_epoch(TrainSchedule(), 19)
    with pytest.raises(ConfigError):
        TrainSchedule(decay_epochs=[9]).validate()
    with pytest.raises(ConfigError):
        TrainSchedule(warmup_epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainSchedule(grad_clip=0.0).validate()
    assert lr_at_epoch(TrainSchedule(warmup_epochs=1), 1) == 2e-4


def test_adamax_fixture():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adamax({"theta": p})
    for g, expect in zip(ADAMAX_GRADS, ADAMAX_FIXTURE):
        p.grad = np.array([g])
        opt.step(0.1)
        assert abs(p.data[0] - expect) <= 1e-12


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([0.3, -1.2]), requires_grad=True)
    opt = Adamax({"p": p})
    p.grad = np.zeros(2)
    opt.step(0.1)
    assert p.data.tolist() == [0.3, -1.2]


@pytest.mark.parametrize("seed", range(5))
def test_quadratic_bowl_converges(seed):
    p = Tensor(np.random.default_rng(seed).normal(size=10), requires_grad=True)
    opt = Adamax({"p": p})
    for _ in range(200):
        p.grad = p.data.copy()
        opt.step(0.1)
    assert np.linalg.norm(p.data) < 1e-3


def test_infinity_norm_is_nondecreasing_under_constant_magnitude():
    p = Tensor(np.zeros(3), requires_grad=True)
    opt = Adamax({"p": p})
    prev = np.zeros(3)
    for k in range(30):
        p.grad = np.array([1.0, -1.0, 1.0]) * (-1) ** k
        opt.step(0.01)
        assert np.all(opt.u["p"] >= prev)
        prev = opt.u["p"].copy()


def test_non_finite_gradient_names_the_parameter():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adamax({"gru_large.w": p})
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericError, match="gru_large.w"):
        opt.step(0.1)
    assert opt.t == 0 and p.data.tolist() == [0.0, 0.0]


def test_clip_grad_norm():
    rng = np.random.default_rng(0)
    params = [Tensor(np.zeros(s), requires_grad=True) for s in [(3,), (2, 4)]]
    for p in params:
        p.grad = rng.normal(size=p.shape) * 5
    before = clip_grad_norm(params, 0.25)
    after = np.sqrt(sum(np.sum(p.grad**2) for p in params))
    assert before > 0.25 and after <= 0.25 + 1e-12
    small = [Tensor(np.zeros(2), requires_grad=True)]
    small[0].grad = np.array([0.1, 0.0])
    clip_grad_norm(small, 0.25)
    assert small[0].grad.tolist() == [0.1, 0.0]


def _model(examples, **kw):
    return VqaCoinModel.build(ModelConfig(**{**TINY, **kw}), examples, 1, seed=0)


def test_one_batch_training_reduces_loss(tiny_examples):
    ex = tiny_examples[:8]
    model = _model(ex, dropout_classifier=0.0, dropout_fc=0.0)
    batch = model.collate(model.encode(ex))
    before = model.loss(model.forward(batch), batch).item()
    train_loop(model, ex, quick_schedule(epochs=3, plateau_until_epoch=3))
    assert model.loss(model.forward(batch), batch).item() < before


def test_same_seed_same_trace(tiny_examples):
    def run():
        trace = train_loop(_model(tiny_examples), tiny_examples, quick_schedule(), seed=7).trace
        return [{k: v for k, v in r.items() if k != "wall_time"} for r in trace]

    assert run() == run()


def test_resume_continues_the_exact_trace(tmp_path, tiny_examples):
    sched = quick_schedule(epochs=3, plateau_until_epoch=3)
    full = train_loop(_model(tiny_examples), tiny_examples, sched, seed=2, val_examples=tiny_examples[:10],
                      out_dir=tmp_path / "full")
    train_loop(_model(tiny_examples), tiny_examples, quick_schedule(epochs=2, plateau_until_epoch=3), seed=2,
               val_examples=tiny_examples[:10], out_dir=tmp_path / "part")
    resumed = train_loop(_model(tiny_examples), tiny_examples, sched, seed=2, val_examples=tiny_examples[:10],
                         out_dir=tmp_path / "part", resume_from=tmp_path / "part" / "last.ckpt")
    strip = lambda t: [{k: v for k, v in r.items() if k != "wall_time"} for r in t]
    assert strip(resumed.trace) == strip(full.trace)
    assert (tmp_path / "part" / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()
    a, b = load_checkpoint(tmp_path / "full" / "last.ckpt"), load_checkpoint(tmp_path / "part" / "last.ckpt")
    for (na, pa), (nb, pb) in zip(a.net.named_parameters(), b.net.named_parameters()):
        assert na == nb and pa.data.tobytes() == pb.data.tobytes()


def test_output_files(tmp_path, tiny_examples):
    train_loop(_model(tiny_examples), tiny_examples, quick_schedule(), val_examples=tiny_examples[:6], out_dir=tmp_path)
    records = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]
    assert set(records[0]) == {"epoch", "lr", "train_loss", "val_accuracy"}
    timing = [json.loads(line) for line in (tmp_path / "timing.jsonl").read_text().splitlines()]
    assert [t["epoch"] for t in timing] == [1, 2]
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()


def test_callbacks_receive_every_epoch(tiny_examples):
    seen = []
    train_loop(_model(tiny_examples), tiny_examples, quick_schedule(epochs=3, plateau_until_epoch=3),
               callbacks=[seen.append])
    assert [r["epoch"] for r in seen] == [1, 2, 3]
    assert all(r["wall_time"] >= 0 for r in seen)


def test_classifier_only_freezes_the_encoders(tiny_examples):
    model = _model(tiny_examples)
    keep = {id(p) for p in model.net.classifier_parameters()}
    frozen = {n: p.data.copy() for n, p in model.net.named_parameters() if id(p) not in keep}
    tuned = {n: p.data.copy() for n, p in model.net.named_parameters() if id(p) in keep}
    train_loop(model, tiny_examples, quick_schedule(classifier_only=True))
    params = dict(model.net.named_parameters())
    assert all(np.array_equal(params[n].data, v) for n, v in frozen.items())
    assert any(not np.array_equal(params[n].data, v) for n, v in tuned.items())


def test_empty_training_set(tiny_examples):
    with pytest.raises(ContractError):
        train_loop(_model(tiny_examples), [], quick_schedule())
