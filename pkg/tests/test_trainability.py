import numpy as np
import pytest

from bnlab.architectures import ArchSpec, ConfigError, Network, build_plan
from bnlab.checkpoint import Checkpoint
from bnlab.rng import Prng
from bnlab.trainability import (GroupSelector, apply_mask, select, select_groups, select_random_per_channel,
                                verify_frozen)


@pytest.fixture(scope="module")
def r14():
    return Network(build_plan(ArchSpec("cifar_resnet", 14)), Prng(0))


def body_conv_channels(net):
    return sum(p.shape[0] for n, p in net.params.items() if net.groups[n] == "body" and p.data.ndim == 4)


def test_parse_and_render():
    assert str(GroupSelector.parse("output+batchnorm")) == "batchnorm+output"
    assert str(GroupSelector.parse("all")) == "all"
    assert str(GroupSelector.parse("random:2+output")) == "output+random:2"
    assert GroupSelector.parse("random_layer:3").random_layerwise


@pytest.mark.parametrize("bad", ["", "  ", "gamma", "random:0", "random:2+random:3", "random:x"])
def test_bad_selectors(bad):
    with pytest.raises(ConfigError):
        GroupSelector.parse(bad)


def test_batchnorm_counts(r14):
    assert select(r14, "batchnorm").trainable == 1120
    net110 = Network(build_plan(ArchSpec("cifar_resnet", 110)), Prng(0))
    m = select(net110, "batchnorm")
    assert m.trainable == 8288 and round(100 * m.fraction, 2) == 0.48


def test_union_counts(r14):
    assert select(r14, "batchnorm+output+shortcut").trainable == 1120 + 650 + 2560
    m = select(r14, "all")
    assert m.trainable == m.total == 175258


def test_group_mask_matches_labels(r14):
    m = select_groups(r14, "output")
    for n in r14.params:
        assert m[n].all() == (r14.groups[n] == "output") and m[n].any() == m[n].all()


def test_random_per_channel_cardinality(r14):
    m = select(r14, "random:2", seed=0)
    assert m.trainable == 2 * body_conv_channels(r14) == 928
    for n, p in r14.params.items():
        if r14.groups[n] == "body" and p.data.ndim == 4:
            np.testing.assert_array_equal(m[n].reshape(p.shape[0], -1).sum(axis=1), 2)
        else:
            assert not m[n].any()


def test_random_seed_determinism(r14):
    a, b, c = select(r14, "random:2", 1), select(r14, "random:2", 1), select(r14, "random:2", 2)
    name = "stage3.block1.conv2.weight"
    np.testing.assert_array_equal(a[name], b[name])
    assert not np.array_equal(a[name], c[name]) and a.trainable == c.trainable


def test_random_full_kernel_covers_body():
    net = Network(build_plan(ArchSpec("cifar_resnet", 8, "1/4")), Prng(0))
    m = select_random_per_channel(net, 27, Prng(0))  # stem kernel has 3*3*3 = 27 entries
    assert m["stem.conv.weight"].all()
    with pytest.raises(ConfigError):
        select_random_per_channel(net, 28, Prng(0))


def test_random_layerwise_same_count(r14):
    assert select(r14, "random_layer:2", 0).trainable == 928


def test_masks_are_read_only(r14):
    m = select(r14, "batchnorm")
    with pytest.raises(ValueError):
        m["stem.bn.gamma"][0] = False
    with pytest.raises(TypeError):
        m.masks["x"] = None


def test_apply_mask(r14):
    m = select(r14, "random:1", 0)
    g = {n: np.ones(p.shape, np.float32) for n, p in r14.params.items()}
    out = apply_mask(g, m)
    assert sum(int(v.sum()) for v in out.values()) == m.trainable


def test_verify_frozen_detects_corruption(r14):
    before = Checkpoint.from_network(r14)
    m = select(r14, "batchnorm")
    assert verify_frozen(before, before, m).ok
    after = before.copy()
    after.params["stem.bn.gamma"] = after.params["stem.bn.gamma"] + 1
    rep = verify_frozen(before, after, m)
    assert rep.ok and rep.changed_roles == ["gamma"]
    bad = before.copy()
    w = bad.params["stage2.block0.conv1.weight"].copy()
    w.view(np.uint32)[0, 0, 0, 0] ^= 1  # flip one mantissa bit
    bad.params["stage2.block0.conv1.weight"] = w
    rep = verify_frozen(before, bad, m)
    assert rep.violations == ["stage2.block0.conv1.weight"]
    assert "stage2.block0.conv1.weight" in rep.summary()


def test_verify_frozen_negative_zero_is_a_change(r14):
    before = Checkpoint.from_network(r14)
    after = before.copy()
    after.params["fc.bias"] = -after.params["fc.bias"]  # +0.0 -> -0.0
    assert verify_frozen(before, after, select(r14, "batchnorm")).violations == ["fc.bias"]


def test_verify_frozen_plan_mismatch(r14):
    other = Network(build_plan(ArchSpec("cifar_resnet", 8)), Prng(0))
    with pytest.raises(ValueError):
        verify_frozen(Checkpoint.from_network(r14), Checkpoint.from_network(other), select(r14, "batchnorm"))
