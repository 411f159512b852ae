import numpy as np
import pytest

from aidetect.models import (
    BadChannels,
    IncompatibleSpecs,
    ModelSpec,
    build_fusion,
    build_lenet5,
    build_lstm_branch,
    build_model,
    build_resnet18,
    build_sb_resnet18,
    lenet5_features,
    param_count,
    sb_resnet18_features,
)
from aidetect.nn.layers import LSTM, Linear, SoftmaxCrossEntropy, Sequential, softmax

from oracles import lenet5_count, resnet18_count, sb_resnet18_count

# parameter counts as printed in the source table (rows x input channels)
PUBLISHED = {
    "lenet5": {1: 58_484, 3: 59_084, 5: 59_684},
    "resnet18": {1: 11_683_240, 3: 11_689_512, 5: 11_695_784},
    "sb_resnet18": {1: 151_362, 3: 157_634, 5: 163_906},
}


@pytest.mark.parametrize("c", [1, 3, 5])
def test_lenet5_count(c):
    n = param_count(build_lenet5(c))
    assert n == PUBLISHED["lenet5"][c] == lenet5_count(c)


@pytest.mark.parametrize("c", [1, 3, 5])
def test_sb_resnet18_count(c):
    n = param_count(build_sb_resnet18(c))
    assert n == PUBLISHED["sb_resnet18"][c] == sb_resnet18_count(c)


@pytest.mark.parametrize("c", [1, 3, 5])
def test_resnet18_thousand_way_count(c):
    n = param_count(build_resnet18(c, "thousand_way"))
    assert n == PUBLISHED["resnet18"][c] == resnet18_count(c, 1000)


def test_resnet18_two_way_count():
    n = param_count(build_resnet18(3, "two_way"))
    assert n == 11_177_538 == 11_689_512 - (512 * 1000 + 1000) + (512 * 2 + 2) == resnet18_count(3, 2)


@pytest.mark.parametrize("arch,k", [("lenet5", 5), ("sb_resnet18", 7), ("resnet18", 7)])
def test_channel_delta_law(arch, k):
    filters = 12 if arch == "lenet5" else 64
    counts = PUBLISHED[arch]
    assert counts[3] - counts[1] == counts[5] - counts[3] == k * k * filters * 2
    built = {c: param_count(build_model(ModelSpec(arch, c, head="thousand_way" if arch == "resnet18" else "two_way"))) for c in (1, 3)}
    assert built[3] - built[1] == k * k * filters * 2


def test_linear_count():
    assert param_count(Linear(10, 2)) == 22


def test_count_excludes_running_stats():
    model = build_sb_resnet18(1)
    buffers = sum(b.size for _, b in model.named_buffers())
    assert buffers > 0
    assert param_count(model) == sum(p.size for _, p in model.named_params())


@pytest.mark.parametrize("c", [0, 2, 4, 6])
def test_bad_channels(c):
    for build in (build_lenet5, build_sb_resnet18, build_resnet18):
        with pytest.raises(BadChannels):
            build(c)


def test_unknown_spec_values():
    with pytest.raises(ValueError):
        ModelSpec("vgg16")
    with pytest.raises(ValueError):
        ModelSpec("lenet5", head="three_way")


def test_fusion_width_and_count():
    model = build_model(ModelSpec("sb_resnet18_lstm", 5))
    fc1 = model.mlp.layers[0]
    assert fc1.in_features == 96 == 64 + 32
    lstm = 4 * 32 * 1 + 4 * 32 * 32 + 4 * 32
    expected = (163_906 - (64 * 2 + 2)) + lstm + 96 * 64 + 64 + 64 * 2 + 2
    assert param_count(model) == expected


def test_lenet_fusion_uses_penultimate_features():
    model = build_model(ModelSpec("lenet5_lstm", 3))
    assert model.mlp.layers[0].in_features == 180 + 32
    assert param_count(model) == (59_084 - 362) + 4 * 32 * 34 + 212 * 64 + 64 + 130


def test_fusion_rejects_incompatible_branches():
    image = sb_resnet18_features(1, np.random.default_rng(0))
    with pytest.raises(IncompatibleSpecs):
        build_fusion(image, (Sequential(Linear(126, 8)), 8))
    with pytest.raises(IncompatibleSpecs):
        build_fusion((Linear(3, 2), 2), build_lstm_branch())


def batch(rng, n, c):
    return rng.standard_normal((n, c, 24, 24)).astype(np.float32), np.sign(rng.standard_normal((n, 126))).astype(np.float32)


@pytest.mark.parametrize("arch", ["lenet5", "resnet18", "sb_resnet18", "lenet5_lstm", "sb_resnet18_lstm", "lstm"])
@pytest.mark.parametrize("c", [1, 5])
def test_logits_are_two_wide(arch, c, rng):
    model = build_model(ModelSpec(arch, c)).eval()
    img, ser = batch(rng, 3, c)
    logits = model.forward(img, ser)
    assert logits.shape == (3, 2)
    assert np.allclose(softmax(logits.astype(np.float64)).sum(axis=1), 1.0, atol=1e-9)


def test_eval_is_batch_order_invariant(rng):
    model = build_model(ModelSpec("sb_resnet18_lstm", 3)).eval()
    img, ser = batch(rng, 6, 3)
    out = model.forward(img, ser)
    perm = rng.permutation(6)
    assert np.allclose(model.forward(img[perm], ser[perm]), out[perm], atol=1e-6)
    single = np.concatenate([model.forward(img[i : i + 1], ser[i : i + 1]) for i in range(6)])
    assert np.allclose(single, out, atol=1e-5)


def test_zeroed_lstm_cuts_series_gradient(rng):
    model = build_model(ModelSpec("sb_resnet18_lstm", 1)).astype(np.float64)
    for _, layer in model.series.named_layers():
        if isinstance(layer, LSTM):
            for p in layer.params():
                p.data[...] = 0.0
    img, ser = batch(rng, 2, 1)
    img, ser = img.astype(np.float64), ser.astype(np.float64)
    model.train()
    ce = SoftmaxCrossEntropy()
    ce.forward(model.forward(img, ser), np.array([0, 1]))
    _, series_grad = model.backward(ce.backward())
    assert not np.any(series_grad)
    model.eval()
    assert np.array_equal(model.forward(img, ser), model.forward(img, -ser))


def test_lstm_distinguishes_constant_series():
    branch, _ = build_lstm_branch(seed=0)
    branch.eval()
    up = branch.forward(np.ones((1, 126), np.float32))
    down = branch.forward(-np.ones((1, 126), np.float32))
    assert not np.allclose(up, down)


def test_padded_suffix_only_matters_through_rollout():
    branch, _ = build_lstm_branch(seed=0)
    branch.eval()
    prefix = np.array([1, -1, -1, 1, 1], np.float32)
    a = np.zeros((1, 126), np.float32)
    a[0, :5] = prefix
    b = a.copy()
    b[0, 5] = 1.0
    assert np.array_equal(branch.forward(a), branch.forward(a.copy()))
    assert not np.array_equal(branch.forward(a), branch.forward(b))


def test_series_dropout_only_in_fusion():
    model = build_model(ModelSpec("sb_resnet18_lstm", 1, dropout=0.3))
    assert "dropout" in model.series.names
    assert "dropout" not in build_model(ModelSpec("sb_resnet18_lstm", 1)).series.names


def test_build_is_seeded():
    a = build_model(ModelSpec("lenet5_lstm", 1), seed=4)
    b = build_model(ModelSpec("lenet5_lstm", 1), seed=4)
    c = build_model(ModelSpec("lenet5_lstm", 1), seed=5)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.params(), b.params()))
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.params(), c.params()))


def test_lenet_layout():
    body, dim = lenet5_features(1, np.random.default_rng(0))
    assert dim == 180
    assert [n for n in body.names] == ["to_nhwc", "conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "flatten", "fc1", "relu3"]
