import struct
import subprocess
import sys

import numpy as np
import pytest

from bnlab.architectures import ArchSpec, Network, build_plan
from bnlab.checkpoint import (MAGIC, BadMagicError, Checkpoint, ShapeMismatchError, TensorCountError, TruncatedError,
                              VersionError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint)
from bnlab.rng import Prng

SPECS = [ArchSpec("cifar_resnet", 8, "1/4"), ArchSpec("cifar_resnet", 14, 2), ArchSpec("vgg", 11, "1/8"),
         ArchSpec("imagenet_resnet", 18, "1/8"), ArchSpec("imagenet_resnet", 50, "1/16")]


def make_ckpt(spec, seed=0):
    net = Network(build_plan(spec), Prng(seed))
    for st in net.bn.values():
        st.load_statistics(np.arange(st.features, dtype=np.float32), np.ones(st.features, np.float32) * 2)
    return Checkpoint.from_network(net, mask={"selector": "batchnorm", "seed": None}, hyperparams={"lr": 0.1},
                                   seeds={"init": seed}, epoch=3, meta={"note": "x"})


def assert_same(a, b):
    assert a.arch == b.arch and a.plan_manifest == b.plan_manifest
    assert (a.mask, a.hyperparams, a.seeds, a.epoch, a.meta) == (b.mask, b.hyperparams, b.seeds, b.epoch, b.meta)
    assert a.tensors().keys() == b.tensors().keys()
    for n, t in a.tensors().items():
        assert t.dtype == b.tensors()[n].dtype and t.tobytes() == b.tensors()[n].tobytes()


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.label)
def test_round_trip(tmp_path, spec):
    c = make_ckpt(spec)
    save_checkpoint(tmp_path / "c.bnck", c)
    assert_same(c, load_checkpoint(tmp_path / "c.bnck"))


def test_to_network_restores_everything():
    c = make_ckpt(SPECS[0])
    net = c.to_network()
    again = Checkpoint.from_network(net, mask=c.mask, hyperparams=c.hyperparams, seeds=c.seeds, epoch=3,
                                    meta={"note": "x"})
    assert encode_checkpoint(again) == encode_checkpoint(c)


def test_header_layout():
    buf = encode_checkpoint(make_ckpt(SPECS[0]))
    assert buf[:8] == MAGIC and struct.unpack("<I", buf[8:12]) == (1,)


def test_bad_magic():
    buf = bytearray(encode_checkpoint(make_ckpt(SPECS[0])))
    buf[0] ^= 0xFF
    with pytest.raises(BadMagicError) as e:
        decode_checkpoint(bytes(buf))
    assert e.value.code == 11


def test_bad_version():
    buf = bytearray(encode_checkpoint(make_ckpt(SPECS[0])))
    buf[8:12] = struct.pack("<I", 99)
    with pytest.raises(VersionError):
        decode_checkpoint(bytes(buf))


def test_truncated():
    buf = encode_checkpoint(make_ckpt(SPECS[0]))
    with pytest.raises(TruncatedError):
        decode_checkpoint(buf[:-5])


def test_tensor_count_mismatch():
    buf = bytearray(encode_checkpoint(make_ckpt(SPECS[0])))
    (mlen,) = struct.unpack("<Q", buf[12:20])
    pos = 20 + mlen
    (count,) = struct.unpack("<I", buf[pos:pos + 4])
    buf[pos:pos + 4] = struct.pack("<I", count - 1)
    with pytest.raises(TensorCountError):
        decode_checkpoint(bytes(buf))


def test_shape_mismatch_against_plan():
    c = make_ckpt(SPECS[0])
    c.params["fc.bias"] = np.zeros(11, np.float32)
    with pytest.raises(ShapeMismatchError):
        decode_checkpoint(encode_checkpoint(c))


def test_error_codes_distinct():
    codes = {cls.code for cls in (BadMagicError, VersionError, TensorCountError, ShapeMismatchError, TruncatedError)}
    assert len(codes) == 5


def test_identical_seed_builds_identical():
    assert encode_checkpoint(make_ckpt(SPECS[1], 7)) == encode_checkpoint(make_ckpt(SPECS[1], 7))
    assert encode_checkpoint(make_ckpt(SPECS[1], 7)) != encode_checkpoint(make_ckpt(SPECS[1], 8))


def test_cross_process_identical(tmp_path):
    code = ("import sys; from bnlab.architectures import ArchSpec, Network, build_plan; from bnlab.rng import Prng;"
            "from bnlab.checkpoint import Checkpoint, save_checkpoint;"
            "save_checkpoint(sys.argv[1], Checkpoint.from_network(Network(build_plan(ArchSpec('cifar_resnet', 14)),"
            " Prng(3))))")
    for i in range(2):
        subprocess.run([sys.executable, "-c", code, str(tmp_path / f"{i}.bnck")], check=True)
    assert (tmp_path / "0.bnck").read_bytes() == (tmp_path / "1.bnck").read_bytes()


def test_atomic_write_leaves_no_temp(tmp_path):
    save_checkpoint(tmp_path / "a" / "c.bnck", make_ckpt(SPECS[0]))
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["c.bnck"]
