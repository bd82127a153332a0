import numpy as np
import pytest

from cov3d import ops
from cov3d.augment import AugmentConfig
from cov3d.checkpoint import Checkpoint
from cov3d.data import VolumeDataset
from cov3d.model import Module, build_model, preset
from cov3d.tensor import Tensor
from cov3d.train import History, TrainConfig, TrainingError, _batches, evaluate, train
from cov3d.volume import Volume
from oracles import cross_entropy_per_sample

SHAPE = (16, 32, 32)


def tiny_model(seed=0):
    return build_model(preset("tiny3d").with_input(*SHAPE), init_seed=seed)


def quick_cfg(**kw):
    kw.setdefault("augment", AugmentConfig.disabled(depth_crop_to=SHAPE[0]))
    return TrainConfig(**{"epochs": 2, "batch_size": 2, "seed": 0, **kw})


class ConstantLogits(Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = np.asarray(logits, dtype=np.float32)

    def forward(self, x):
        return Tensor(np.tile(self.logits, (x.shape[0], 1)))


def test_cross_entropy_examples():
    assert ops.cross_entropy(Tensor(np.zeros((3, 2))), [0, 1, 1]).item() == pytest.approx(np.log(2), abs=1e-6)
    with np.errstate(all="ignore"):
        val = ops.cross_entropy(Tensor(np.array([[10.0, -10.0]])), [0]).item()
    assert val == pytest.approx(np.log1p(np.exp(-20.0)), rel=1e-3)
    logits = np.random.default_rng(0).standard_normal((6, 3))
    labels = [0, 2, 1, 1, 0, 2]
    assert ops.cross_entropy(Tensor(logits), labels).item() == pytest.approx(
        cross_entropy_per_sample(logits.tolist(), labels), abs=1e-6)


def test_batches_merge_trailing_singleton():
    sizes = [len(b) for b in _batches(np.arange(7), 2)]
    assert sizes == [2, 2, 3]
    assert [len(b) for b in _batches(np.arange(6), 4)] == [4, 2]


def test_evaluate_counts_duplicated_scan(small_dataset):
    vol = small_dataset[0][0]
    stats = evaluate(tiny_model(), VolumeDataset([vol, vol], [0, 1]), depth_to=SHAPE[0])
    assert stats.num_samples == 2


def test_evaluate_constant_stub():
    vols = [Volume(np.zeros(SHAPE, np.float32), "unit") for _ in range(4)]
    rep = evaluate(ConstantLogits([1.0, 0.0]), VolumeDataset(vols, [0, 1, 0, 1]), depth_to=None)
    assert rep.f1[0] == pytest.approx(2 / 3)
    assert rep.macro_f1 == pytest.approx(1 / 3)


def test_evaluate_shape_mismatch(small_dataset):
    model = build_model(preset("tiny3d").with_input(16, 48, 48))
    with pytest.raises(ValueError, match="input_shape"):
        evaluate(model, small_dataset, depth_to=16)


def test_single_class_rejected(small_dataset):
    ds = VolumeDataset([small_dataset[i][0] for i in (0, 2)], [0, 0])
    with pytest.raises(ValueError, match="only class 0"):
        train(tiny_model(), ds, ds, quick_cfg())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts(small_dataset):
    model = tiny_model()
    model.head.bias.data[...] = np.array([np.inf, 0.0], dtype=np.float32)
    with pytest.raises(TrainingError, match="non-finite loss"):
        train(model, small_dataset, small_dataset, quick_cfg())


def test_zero_epochs_returns_initial_evaluation(small_dataset):
    model = tiny_model()
    before = Checkpoint.from_model(model).entries
    result = train(model, small_dataset, small_dataset, quick_cfg(epochs=0))
    best, history = result
    assert history.rows == [] and history.to_csv().strip() == "epoch,train_loss,val_macro_f1,seconds"
    assert result.best_epoch == 0
    for k, v in best.entries.items():
        assert v.tobytes() == before[k].tobytes()


def test_training_is_deterministic(small_dataset):
    cfg = quick_cfg(augment=AugmentConfig(depth_crop_to=16))
    runs = []
    for _ in range(2):
        model = tiny_model(seed=4)
        runs.append(train(model, small_dataset, small_dataset, cfg))
    a, b = runs
    assert a.history.step_losses == b.history.step_losses
    assert [(r.epoch, r.train_loss, r.val_macro_f1) for r in a.history.rows] == \
        [(r.epoch, r.train_loss, r.val_macro_f1) for r in b.history.rows]
    for k in a.best.entries:
        assert a.best.entries[k].tobytes() == b.best.entries[k].tobytes()


def test_best_checkpoint_tie_prefers_earlier_epoch(small_dataset):
    seen = []
    result = train(tiny_model(), small_dataset, small_dataset, quick_cfg(epochs=3), on_epoch=seen.append)
    f1s = [r.val_macro_f1 for r in seen]
    assert result.best_epoch == 1 + f1s.index(max(f1s))
    assert result.best.metadata["epoch"] == result.best_epoch
    assert result.steps == 9


def test_grad_accumulation_step_count(small_dataset):
    result = train(tiny_model(), small_dataset, small_dataset, quick_cfg(epochs=1, grad_accum_steps=2))
    assert result.steps == 2  # 3 micro-batches -> steps after 2 and at epoch end
    assert len(result.history.step_losses) == 3


def test_history_csv_roundtrip(tmp_path, small_dataset):
    result = train(tiny_model(), small_dataset, small_dataset, quick_cfg(epochs=1))
    path = tmp_path / "h.csv"
    result.history.write_csv(path)
    rows = History.read_csv(path)
    assert list(rows[0]) == ["epoch", "train_loss", "val_macro_f1", "seconds"]
    assert float(rows[0]["train_loss"]) == result.history.rows[0].train_loss


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    assert TrainConfig().resolved_eval_depth == 64
    assert TrainConfig(augment=AugmentConfig.disabled()).resolved_eval_depth is None
