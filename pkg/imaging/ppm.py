# -*- coding: utf-8 -*-
"""Binary PPM (P6) images.

The header is ``P6``, width, height and maxval, separated by whitespace
(``#`` comments allowed between fields), then exactly one whitespace byte,
then ``width · height · 3`` payload bytes. :func:`encode_ppm` writes single
``\\n`` separators, so a 1×1 image has an 11-byte header.
"""

import logging

import numpy as np

from common.tensor import DimensionError
from common.util import FormatError, DataIOError

__all__ = ['ImageFile', 'encode_ppm', 'decode_ppm', 'load_image', 'save_image']

_WHITESPACE = b' \t\n\r\x0b\x0c'


class ImageFile:
    """An 8-bit RGB image.

    :ivar numpy.ndarray pixels: ``(height, width, 3)`` ``uint8`` array.
    """

    def __init__(self, pixels):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise DimensionError('Expected an (H, W, 3) image, got shape {}'.format(pixels.shape))
        self.pixels = np.ascontiguousarray(pixels, dtype=np.uint8)

    def __repr__(self):
        return 'ImageFile({}x{})'.format(self.width, self.height)

    def __eq__(self, other):
        return isinstance(other, ImageFile) and np.array_equal(self.pixels, other.pixels)

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]

    def to_float(self):
        """Pixel values mapped to ``[0, 1]`` float64."""
        return self.pixels.astype(np.float64) / 255.

    @classmethod
    def from_float(cls, values):
        """Round ``[0, 1]`` values (clamped) to 8 bits."""
        values = np.clip(np.asarray(values, dtype=np.float64), 0., 1.)
        return cls(np.floor(values * 255. + 0.5).astype(np.uint8))


def encode_ppm(image):
    """:rtype: bytes"""
    header = 'P6\n{} {}\n255\n'.format(image.width, image.height).encode('ascii')
    return header + image.pixels.tobytes()


def _skip_space(data, pos):
    while pos < len(data):
        if data[pos:pos + 1] == b'#':
            while pos < len(data) and data[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
        elif data[pos:pos + 1] in _WHITESPACE:
            pos += 1
        else:
            break
    return pos


def _read_int(data, pos, field):
    pos = _skip_space(data, pos)
    start = pos
    while pos < len(data) and data[pos:pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise FormatError('Expected the {} in the PPM header'.format(field), start)
    return int(data[start:pos]), pos


def decode_ppm(data):
    """Parse P6 bytes.

    :rtype: ImageFile
    :raises FormatError: On a bad magic number, a malformed or out-of-range
        header field, or a payload of the wrong length. The error carries
        the byte offset.
    """
    if data[:2] != b'P6':
        raise FormatError('Not a binary PPM: magic is {!r}, expected b"P6"'.format(bytes(data[:2])), 0)
    width, pos = _read_int(data, 2, 'width')
    height, pos = _read_int(data, pos, 'height')
    maxval, pos = _read_int(data, pos, 'maxval')
    if width < 1 or height < 1:
        raise FormatError('Image size must be positive, got {}x{}'.format(width, height), pos)
    if not 1 <= maxval <= 255:
        raise FormatError('Only 8-bit PPM is supported, maxval is {}'.format(maxval), pos)
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise FormatError('Expected one whitespace byte after maxval', pos)
    pos += 1
    expected = width * height * 3
    actual = len(data) - pos
    if actual != expected:
        raise FormatError('Expected {} payload bytes, got {}'.format(expected, actual), pos)
    pixels = np.frombuffer(bytes(data[pos:]), dtype=np.uint8).reshape(height, width, 3)
    if maxval != 255:
        pixels = np.floor(pixels.astype(np.float64) * 255. / maxval + 0.5).astype(np.uint8)
    return ImageFile(pixels.copy())


def load_image(path):
    """Read a P6 file.

    :rtype: ImageFile
    :raises DataIOError: When the file can't be read.
    :raises FormatError: When it isn't a valid P6 image.
    """
    try:
        with open(path, 'rb') as fin:
            data = fin.read()
    except OSError as e:
        raise DataIOError('Could not read {}: {}'.format(path, e))
    try:
        return decode_ppm(data)
    except FormatError:
        logging.error('Malformed PPM file {}'.format(path))
        raise


def save_image(path, image):
    """Write an :class:`ImageFile` (or a ``[0, 1]`` float array) as P6.

    :return: ``path``
    :raises DataIOError: When the file can't be written.
    """
    if not isinstance(image, ImageFile):
        image = ImageFile.from_float(image)
    try:
        with open(path, 'wb') as fout:
            fout.write(encode_ppm(image))
    except OSError as e:
        raise DataIOError('Could not write {}: {}'.format(path, e))
    return path
