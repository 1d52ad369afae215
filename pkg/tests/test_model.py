import numpy as np
import numpy.testing as npt
import pytest

from rccformer.core.errors import RCCError
from rccformer.core.model_config import ModelConfig
from rccformer.core.tensor import Tape, Tensor
from rccformer.enums import AblationMatrix
from rccformer.losses import composite_loss
from rccformer.nets.model import RCCFormer, count, forward
from rccformer.orchestrator import ablation_rows


@pytest.fixture
def image(rng):
    return Tensor(rng.random((2, 3, 32, 64)))


def test_density_grid_shape_and_sign(tiny_config, image):
    model = RCCFormer.from_seed(tiny_config, 0)
    dm = forward(image, model)
    assert dm.grid.shape == (2, 1, 4, 8)
    assert (dm.grid.data >= 0).all()


def test_count_is_grid_sum(tiny_config, image):
    dm = forward(image, RCCFormer.from_seed(tiny_config, 0))
    assert count(dm) == pytest.approx(dm.grid.data.sum())
    assert count(dm, 1) == pytest.approx(dm.grid.data[1].sum())


def test_same_seed_same_network(tiny_config, image):
    a = forward(image, RCCFormer.from_seed(tiny_config, 9)).grid.data
    b = forward(image, RCCFormer.from_seed(tiny_config, 9)).grid.data
    npt.assert_array_equal(a, b)
    other = RCCFormer.from_seed(tiny_config, 10)
    reseeded = RCCFormer.from_seed(tiny_config, 9)
    assert not np.array_equal(other.head.weight.data, reseeded.head.weight.data)


def test_baseline_parameters_are_a_subset(tiny_config, image):
    baseline_config = tiny_config.model_copy(
        update={"use_mffm": False, "use_deab": False, "use_asam": False})
    baseline = RCCFormer.from_seed(baseline_config, 0)
    full = RCCFormer.from_seed(tiny_config, 0)
    baseline_names = [n for n, _ in baseline.named_parameters()]
    baseline_backbone = {n for n in baseline_names if n.startswith("backbone.")}
    assert baseline_backbone <= {n for n, _ in full.named_parameters()}
    assert not any(n.startswith(("mffm.", "deab.", "asam.")) for n in baseline_names)
    assert forward(image, baseline).grid.shape == (2, 1, 4, 8)


def test_component_toggles_require_fusion():
    with pytest.raises(ValueError):
        ModelConfig(use_mffm=False, use_deab=True)


def test_eval_before_any_training_batch_fails(tiny_config, image):
    model = RCCFormer.from_seed(tiny_config, 0).eval()
    with pytest.raises(RCCError):
        forward(image, model)


def test_eval_after_calibration(tiny_config, image):
    model = RCCFormer.from_seed(tiny_config, 0)
    forward(image, model)
    model.eval()
    first = forward(image, model).grid.data
    npt.assert_array_equal(forward(image, model).grid.data, first)


def test_zeroed_head_counts_nobody(tiny_config, image):
    model = RCCFormer.from_seed(tiny_config, 0)
    model.head.weight.data[...] = 0.0
    model.head.bias.data[...] = 0.0
    dm = forward(image, model)
    npt.assert_array_equal(dm.grid.data, 0.0)
    assert count(dm) == 0.0


def test_every_parameter_receives_gradient(tiny_config, rng):
    model = RCCFormer.from_seed(tiny_config, 0)
    model.head.bias.data[...] = 1.0
    images = Tensor(rng.random((2, 3, 64, 64)))
    targets = rng.poisson(0.5, size=(2, 8, 8)).astype(np.float64)
    targets[:, 0, 0] += 1.0
    with Tape() as tape:
        loss = composite_loss(forward(images, model).grid, targets)
    tape.backward(loss)
    silent = [name for name, p in model.named_parameters()
              if p.grad is None or not np.abs(p.grad).max() > 0.0]
    assert silent == []


def test_component_rows_nest_strictly(tiny_config):
    rows = ablation_rows(AblationMatrix.TABLE3, tiny_config)
    models = [RCCFormer.from_seed(config, 0) for _, config in rows]
    names = [{n for n, _ in model.named_parameters()} for model in models]
    for smaller, larger in zip(names, names[1:]):
        assert smaller < larger
