# -*- coding: utf-8 -*-

import struct
from collections import OrderedDict

import numpy as np
import pytest

from common.checkpoint import dump_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint
from common.const import CKPT_MAGIC
from common.util import DataIOError, FormatError


@pytest.fixture
def tensors(rng):
    return OrderedDict([('w', rng.normal(size=(3, 2))), ('scalar', np.array(0.5)), ('empty', np.zeros((0, 4)))])


def test_parse_gives_back_what_was_dumped(tensors):
    loaded, meta = parse_checkpoint(dump_checkpoint(tensors, {'timestep': 1000, 'bits': [4, 4]}))
    assert list(loaded) == ['w', 'scalar', 'empty']
    for name in tensors:
        assert loaded[name].shape == tensors[name].shape
        np.testing.assert_array_equal(loaded[name], tensors[name])
    assert meta == {'timestep': 1000, 'bits': [4, 4]}


def test_dump_is_deterministic(tensors):
    assert dump_checkpoint(tensors, {'b': 1, 'a': 2}) == dump_checkpoint(OrderedDict(tensors), {'a': 2, 'b': 1})


def test_layout_starts_with_magic_and_version():
    data = dump_checkpoint({}, {})
    assert data[:4] == CKPT_MAGIC
    assert struct.unpack('<II', data[4:12]) == (1, 2)
    assert data[12:14] == b'{}'
    assert len(data) == 18


def test_bad_magic():
    with pytest.raises(FormatError) as e:
        parse_checkpoint(b'NOPE' + dump_checkpoint({})[4:])
    assert e.value.offset == 0


def test_unsupported_version():
    data = bytearray(dump_checkpoint({}))
    data[4:8] = struct.pack('<I', 7)
    with pytest.raises(FormatError) as e:
        parse_checkpoint(bytes(data))
    assert e.value.offset == 4


def test_truncated(tensors):
    data = dump_checkpoint(tensors)
    for cut in (3, 10, len(data) - 1):
        with pytest.raises(FormatError):
            parse_checkpoint(data[:cut])


def test_trailing_bytes(tensors):
    data = dump_checkpoint(tensors)
    with pytest.raises(FormatError) as e:
        parse_checkpoint(data + b'\x00')
    assert e.value.offset == len(data)


def test_bad_metadata():
    data = CKPT_MAGIC + struct.pack('<II', 1, 3) + b'{x}' + struct.pack('<I', 0)
    with pytest.raises(FormatError):
        parse_checkpoint(data)


def test_save_and_load(tensors, tmp_path):
    file_path = save_checkpoint(str(tmp_path / 'a.qart'), tensors, {'k': 'v'})
    loaded, meta = load_checkpoint(file_path)
    np.testing.assert_array_equal(loaded['w'], tensors['w'])
    assert meta == {'k': 'v'}
    with pytest.raises(DataIOError):
        load_checkpoint(str(tmp_path / 'missing.qart'))
    with pytest.raises(DataIOError):
        save_checkpoint(str(tmp_path / 'no' / 'such' / 'dir.qart'), tensors)
