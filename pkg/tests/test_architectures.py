from fractions import Fraction

import numpy as np
import pytest

from bnlab import tensor as T
from bnlab.architectures import (GROUPS, ArchSpec, ConfigError, Network, build_cifar_resnet, build_imagenet_resnet,
                                 build_plan, build_vgg, count_params, init_weight, parse_width)
from bnlab.rng import Prng


def hand_count_cifar(n, w=1):
    """Closed-form group counts for a CIFAR ResNet-(6n+2) at integer width."""
    c = [16 * w, 32 * w, 64 * w]
    body = 3 * 9 * c[0]
    bn = 2 * c[0]
    cin = c[0]
    short = sc_bn = 0
    for s, cout in enumerate(c):
        for k in range(n):
            body += 9 * cin * cout + 9 * cout * cout
            bn += 4 * cout
            if cin != cout or (s > 0 and k == 0):
                short += cin * cout
                sc_bn += 2 * cout
            cin = cout
    out = c[2] * 10 + 10
    return {"body": body, "batchnorm": bn + sc_bn, "shortcut": short, "output": out,
            "total": body + bn + sc_bn + short + out}


@pytest.mark.parametrize("n,w", [(1, 1), (2, 1), (3, 2), (1, 4)])
def test_cifar_counts_match_closed_form(n, w):
    assert count_params(build_cifar_resnet(n, w)) == hand_count_cifar(n, w)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 18, 36, 72, 144])
def test_depth_is_6n_plus_2(n):
    assert build_cifar_resnet(n).weight_layer_depth() == 6 * n + 2


def test_resnet14_reference_counts():
    c = count_params(build_plan(ArchSpec("cifar_resnet", 14)))
    assert (c["total"], c["batchnorm"], c["output"], c["shortcut"]) == (175258, 1120, 650, 2560)


def test_resnet110_batchnorm():
    assert count_params(build_plan(ArchSpec("cifar_resnet", 110)))["batchnorm"] == 8288


def test_imagenet_resnet18_counts():
    c = count_params(build_imagenet_resnet(18))
    assert c["total"] == 11689512  # the widely published torchvision figure
    assert c["batchnorm"] == 9600 and c["output"] == 513000 and c["shortcut"] == 172032


def test_imagenet_resnet50_counts():
    assert count_params(build_imagenet_resnet(50))["total"] == 25557032


def test_groups_partition_all_params():
    plan = build_cifar_resnet(2)
    for _, _, group, _ in plan.params():
        assert group in GROUPS
    c = count_params(plan)
    assert c["total"] == sum(c[g] for g in GROUPS)


def test_shortcut_bn_counts_as_batchnorm():
    plan = build_cifar_resnet(1)
    groups = {name: g for name, _, g, _ in plan.params()}
    assert groups["stage2.block0.shortcut.bn.gamma"] == "batchnorm"
    assert groups["stage2.block0.shortcut.conv.weight"] == "shortcut"
    assert "stage1.block0.shortcut.conv.weight" not in groups  # identity where shapes agree


def test_bottleneck_stride_on_3x3():
    layers = {l.name: l for l in build_imagenet_resnet(50).layers}
    assert layers["stage2.block0.conv1"].attrs["stride"] == 1
    assert layers["stage2.block0.conv2"].attrs["stride"] == 2
    assert layers["stage1.block0.shortcut.conv"].attrs["stride"] == 1  # 64 -> 256 channels


def test_vgg_layer_count_and_no_shortcuts():
    for d in (11, 13, 16, 19):
        c = count_params(build_vgg(d))
        assert c["shortcut"] == 0 and c["output"] == 5130
        assert build_vgg(d).weight_layer_depth() == d - 2  # convs + one linear; no hidden FC layers


@pytest.mark.parametrize("depth", [15, 7, 0])
def test_bad_cifar_depth(depth):
    with pytest.raises(ConfigError, match="6N\\+2"):
        build_plan(ArchSpec("cifar_resnet", depth))


def test_bad_families_and_widths():
    with pytest.raises(ConfigError):
        build_plan(ArchSpec("densenet", 40))
    with pytest.raises(ConfigError):
        build_plan(ArchSpec("imagenet_resnet", 152))
    with pytest.raises(ConfigError):
        build_cifar_resnet(1, "1/3")
    with pytest.raises(ConfigError):
        parse_width(0)


def test_width_fraction():
    assert parse_width("1/4") == Fraction(1, 4)
    plan = build_cifar_resnet(2, "1/4")
    assert [l.attrs["out_channels"] for l in plan.layers if l.kind == "conv"][:1] == [4]


def test_manifest_round_trip_text():
    plan = build_cifar_resnet(1)
    import json
    assert json.loads(plan.manifest_text()) == json.loads(json.dumps(plan.manifest()))
    assert ArchSpec.from_dict(plan.spec.to_dict()) == plan.spec


def test_labels():
    assert ArchSpec("cifar_resnet", 14, 2).label == "WRN-14-2"
    assert ArchSpec("imagenet_resnet", 50).label == "ResNet-50"
    assert ArchSpec("vgg", 16).label == "VGG-16"


# ---- initialization

@pytest.mark.parametrize("scheme", ["he_normal", "uniform", "binarized", "orthogonal"])
def test_init_variance_is_2_over_fan_in(scheme):
    shape = (64, 16, 3, 3) if scheme != "orthogonal" else (144, 16, 3, 3)
    w = init_weight(shape, scheme, Prng(0), np.float64)
    target = 2.0 / (16 * 9)
    assert abs(w.var() / target - 1) < 0.05


def test_he_normal_large_sample():
    w = init_weight((100_000 // 144 + 1, 16, 3, 3), "he_normal", Prng(1), np.float64)
    assert abs(w.var() / (2 / 144) - 1) < 0.05


def test_binarized_two_values():
    w = init_weight((8, 4, 3, 3), "binarized", Prng(0), np.float64)
    np.testing.assert_allclose(np.unique(np.abs(w)), np.sqrt(2 / 36))


@pytest.mark.parametrize("shape", [(8, 4, 3, 3), (64, 4, 1, 1)])
def test_orthogonal_rows_or_columns(shape):
    w = init_weight(shape, "orthogonal", Prng(0), np.float64).reshape(shape[0], -1)
    g = w @ w.T if w.shape[0] <= w.shape[1] else w.T @ w
    np.testing.assert_allclose(g, np.eye(len(g)) * g[0, 0], atol=1e-10)


def test_init_streams_keyed_by_name():
    a = Network(build_cifar_resnet(1), Prng(0))
    b = Network(build_cifar_resnet(2), Prng(0))
    np.testing.assert_array_equal(a.params["stem.conv.weight"].data, b.params["stem.conv.weight"].data)
    np.testing.assert_array_equal(a.params["stage1.block0.bn1.gamma"].data, b.params["stage1.block0.bn1.gamma"].data)


def test_linear_bias_zero_and_beta_zero():
    net = Network(build_cifar_resnet(1), Prng(0))
    assert not net.params["fc.bias"].data.any()
    assert not net.params["stem.bn.beta"].data.any()


# ---- forward

@pytest.mark.parametrize("spec,size", [(ArchSpec("cifar_resnet", 8, "1/4"), 8), (ArchSpec("vgg", 11, "1/8"), 32),
                                       (ArchSpec("imagenet_resnet", 18, "1/8"), 32),
                                       (ArchSpec("imagenet_resnet", 50, "1/16"), 32)])
def test_forward_shapes(spec, size):
    net = Network.from_spec(spec, Prng(0))
    x = np.random.default_rng(0).standard_normal((2, 3, size, size)).astype(np.float32)
    y = net.forward(x, train=True)
    assert y.shape == (2, net.plan.num_classes) and np.isfinite(y.data).all()
    with T.no_grad():
        assert net.forward(x, train=False).shape == y.shape


def test_observe_sees_every_relu():
    net = Network(build_cifar_resnet(1, "1/4"), Prng(0))
    seen = []
    net.forward(np.zeros((2, 3, 8, 8), np.float32), observe=lambda n, a: seen.append(n))
    assert seen == net.relu_layers()
