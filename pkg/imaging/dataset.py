# -*- coding: utf-8 -*-
"""Paired LR/HR datasets: generation, ingestion of local PPM folders, manifests.

A generated dataset directory looks like::

    <out>/data/
        manifest.csv        index, split, hr, lr, hr_sha256, lr_sha256
        holdout.csv         same columns
        hr/0000.ppm ...
        lr/0000.ppm ...

The first ``data.size`` pairs form the calibration split and are listed in
``manifest.csv``; the next ``data.holdout`` pairs form the held-out split and
are listed in ``holdout.csv``. Pair ``i`` is degraded with noise seed
``seed + i``.
"""

import csv
import logging
from glob import glob
from hashlib import sha256
from os import makedirs, path

import numpy as np

from common.log import progress_bar
from common.util import DataError, DataIOError, FormatError, MunchyMunch
from imaging.degrade import degrade
from imaging.ppm import ImageFile, load_image, save_image
from imaging.synth import synthesize

__all__ = ['PairDataset', 'build_calibration_set', 'load_dataset', 'ingest_images', 'manifest_digests', 'MANIFEST',
           'HOLDOUT_MANIFEST', 'MANIFEST_COLUMNS', 'DATA_DIR']

#: Sub-directory of the output directory holding the dataset
DATA_DIR = 'data'

#: Manifest of the calibration pairs
MANIFEST = 'manifest.csv'
#: Manifest of the held-out pairs
HOLDOUT_MANIFEST = 'holdout.csv'
MANIFEST_COLUMNS = ('index', 'split', 'hr', 'lr', 'hr_sha256', 'lr_sha256')

SPLIT_FILES = (('calib', MANIFEST), ('holdout', HOLDOUT_MANIFEST))


class PairDataset:
    """LR/HR image pairs as float arrays in ``[0, 1]``.

    :ivar numpy.ndarray lr: ``(N, h, w, 3)``
    :ivar numpy.ndarray hr: ``(N, H, W, 3)``
    """

    def __init__(self, lr, hr, names=None):
        self.lr = np.asarray(lr, dtype=np.float64)
        self.hr = np.asarray(hr, dtype=np.float64)
        if len(self.lr) != len(self.hr):
            raise DataError('{} LR images but {} HR images'.format(len(self.lr), len(self.hr)))
        self.names = list(names) if names is not None else ['{:04d}'.format(i) for i in range(len(self.lr))]

    def __len__(self):
        return len(self.lr)

    def __repr__(self):
        return 'PairDataset({} pairs, lr {})'.format(len(self), self.lr.shape[1:3] if len(self) else None)

    def subset(self, indices):
        indices = list(indices)
        return PairDataset(self.lr[indices], self.hr[indices], [self.names[i] for i in indices])

    def head(self, n):
        return self.subset(range(min(n, len(self))))

    def require(self, what='this stage'):
        """:raises DataError: When the dataset is empty."""
        if not len(self):
            raise DataError('No image pairs available for {}'.format(what))
        return self


def _file_digest(file_path):
    with open(file_path, 'rb') as fin:
        return sha256(fin.read()).hexdigest()


def _tiles(image, size):
    """Centre-crop to a multiple of ``size`` and cut into ``size × size`` tiles (row-major)."""
    h, w = image.height, image.width
    rows, cols = h // size, w // size
    top, left = (h - rows * size) // 2, (w - cols * size) // 2
    px = image.pixels
    return [ImageFile(px[top + r * size:top + (r + 1) * size, left + c * size:left + (c + 1) * size])
            for r in range(rows) for c in range(cols)]


def ingest_images(folder, size, count):
    """Cut HR tiles from the P6 images in ``folder`` (sorted by file name).

    The folder is only read. Images smaller than ``size`` are skipped.

    :return: Up to ``count`` :class:`~imaging.ppm.ImageFile` tiles.
    :rtype: list
    :raises DataIOError: When ``folder`` isn't a directory.
    """
    if not path.isdir(folder):
        raise DataIOError('Image folder does not exist: {}'.format(folder))
    tiles = []
    for file_path in sorted(glob(path.join(folder, '*.ppm'))):
        image = load_image(file_path)
        if image.height < size or image.width < size:
            logging.warning('Skipping {}: {}x{} is smaller than {}'.format(file_path, image.width, image.height, size))
            continue
        tiles.extend(_tiles(image, size))
        if len(tiles) >= count:
            break
    if len(tiles) < count:
        logging.warning('Only {} tiles of {}x{} available in {} ({} requested)'.format(
            len(tiles), size, size, folder, count))
    return tiles[:count]


@MunchyMunch
def build_calibration_set(cfg, out_dir=None, progress=False):
    """Generate (or ingest) the paired dataset and persist it with a manifest.

    :param cfg: Run configuration (``seed``, ``data.*``, ``model.scale``). A
        plain nested dict works too.
    :param str out_dir: Output directory (``cfg.out_dir`` by default); the
        dataset goes to ``<out_dir>/data``.
    :return: ``(calibration, holdout)`` datasets as saved on disk.
    :rtype: tuple(PairDataset, PairDataset)
    :raises DataIOError: When the directory can't be written.
    """
    out_dir = out_dir or cfg.out_dir
    data_dir = path.join(out_dir, DATA_DIR)
    size, holdout = int(cfg.data.size), int(cfg.data.holdout)
    total = size + holdout
    hr_size, scale = int(cfg.data.hr_size), int(cfg.model.scale)
    try:
        makedirs(path.join(data_dir, 'hr'), exist_ok=True)
        makedirs(path.join(data_dir, 'lr'), exist_ok=True)
    except OSError as e:
        raise DataIOError('Could not create {}: {}'.format(data_dir, e))

    if cfg.data.images:
        hr_files = ingest_images(cfg.data.images, hr_size, total)
        size = min(size, len(hr_files))
    else:
        hr_files = None

    rows = []
    bar = progress_bar(total, 'Dataset', progress)
    for i in range(len(hr_files) if hr_files is not None else total):
        hr = hr_files[i] if hr_files is not None else ImageFile.from_float(synthesize(i, cfg.seed, hr_size))
        lr = degrade(hr, cfg.seed + i, cfg.data.blur_sigma, cfg.data.noise_sigma, scale)
        name = '{:04d}.ppm'.format(i)
        hr_path = save_image(path.join(data_dir, 'hr', name), hr)
        lr_path = save_image(path.join(data_dir, 'lr', name), lr)
        rows.append([i, 'calib' if i < size else 'holdout', path.join('hr', name), path.join('lr', name),
                     _file_digest(hr_path), _file_digest(lr_path)])
        bar.update(i + 1)
    bar.finish()

    for split, name in SPLIT_FILES:
        manifest_path = path.join(data_dir, name)
        try:
            with open(manifest_path, 'w', newline='') as fout:
                writer = csv.writer(fout)
                writer.writerow(MANIFEST_COLUMNS)
                writer.writerows(r for r in rows if r[1] == split)
        except OSError as e:
            raise DataIOError('Could not write {}: {}'.format(manifest_path, e))
    logging.info('Wrote {} pairs ({} calibration) to {}'.format(len(rows), size, data_dir))
    return load_dataset(data_dir)


def _read_manifest(data_dir, name, split, required=True):
    """Rows of one manifest (header excluded); a missing optional manifest reads as empty."""
    manifest_path = path.join(data_dir, name)
    if not required and not path.isfile(manifest_path):
        return []
    try:
        with open(manifest_path, newline='') as fin:
            rows = list(csv.reader(fin))
    except OSError as e:
        raise DataIOError('Could not read the dataset manifest {}: {}'.format(manifest_path, e))
    if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
        raise FormatError('{} is not a dataset manifest'.format(manifest_path))
    for row in rows[1:]:
        if len(row) != len(MANIFEST_COLUMNS) or row[1] != split:
            raise FormatError('Unexpected row {} in {} (split {})'.format(row, manifest_path, split))
    return rows[1:]


def load_dataset(data_dir):
    """Read a dataset directory written by :func:`build_calibration_set`.

    :return: ``(calibration, holdout)``
    :rtype: tuple(PairDataset, PairDataset)
    :raises DataIOError: When the calibration manifest is missing.
    :raises FormatError: When a manifest header or row is wrong.
    """
    def to_dataset(rows):
        if not rows:
            return PairDataset(np.zeros((0, 1, 1, 3)), np.zeros((0, 1, 1, 3)))
        hrs = [load_image(path.join(data_dir, r[2])).to_float() for r in rows]
        lrs = [load_image(path.join(data_dir, r[3])).to_float() for r in rows]
        return PairDataset(np.stack(lrs), np.stack(hrs), [r[0] for r in rows])

    return (to_dataset(_read_manifest(data_dir, MANIFEST, 'calib')),
            to_dataset(_read_manifest(data_dir, HOLDOUT_MANIFEST, 'holdout', required=False)))


def manifest_digests(data_dir):
    """File name → SHA256 of every image listed in either manifest."""
    out = {}
    for split, name in SPLIT_FILES:
        for row in _read_manifest(data_dir, name, split, required=split == 'calib'):
            out[row[2]] = row[4]
            out[row[3]] = row[5]
    return out
