"""
On-disk formats: episode datasets and model checkpoints.

Dataset layout::

    <dir>/manifest.json
    <dir>/problems/<episode id>/img_01.pgm ... img_14.pgm

Checkpoint layout (all integers little-endian)::

    8-byte magic | uint32 version | uint64 manifest length | manifest (UTF-8 JSON) | tensor buffers

The manifest lists every tensor's name, dtype, shape and byte offset into the
buffer section, plus free-form metadata.
"""
import json
import logging
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from rest_framework import serializers as drf_serializers

from .episodes import EPISODE_SIZE, AugmentSpec, BongardEpisode
from .exceptions import ArtifactMismatchError, DatasetIntegrityError, StorageIOError
from .serializers import MANIFEST_SCHEMA_VERSION, DatasetManifestSerializer
from .utils import sha256_file

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
PROBLEMS_DIR = 'problems'

CHECKPOINT_MAGIC = b'RSNRCKPT'
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct('<8sIQ')

_DTYPES = {
    torch.float32: '<f4',
    torch.float64: '<f8',
    torch.int64: '<i8',
    torch.int32: '<i4',
    torch.bool: '|b1',
}
_TORCH_DTYPES = {name: dtype for dtype, name in _DTYPES.items()}


def image_name(number):
    return f"img_{number:02d}.pgm"


def _to_bytes(image):
    return np.rint(image * 255.0).astype(np.uint8)


def save_dataset(episodes, directory):
    """
    Write episodes as 8-bit binary graymaps plus ``manifest.json``.

    Returns:
        dict: the manifest that was written
    """
    directory = Path(directory)
    entries = []
    try:
        (directory / PROBLEMS_DIR).mkdir(parents=True, exist_ok=True)
        for episode in episodes:
            episode_dir = directory / PROBLEMS_DIR / episode.episode_id
            episode_dir.mkdir(parents=True, exist_ok=True)
            images = []
            for number in range(1, EPISODE_SIZE + 1):
                path = episode_dir / image_name(number)
                Image.fromarray(_to_bytes(episode.image(number))).save(path, format='PPM')
                images.append({'file': path.name, 'sha256': sha256_file(path)})
            entries.append({
                'id': episode.episode_id,
                'family': episode.family,
                'split': episode.split,
                'seed': episode.seed,
                'image_side': episode.image_side,
                'concept_params': episode.concept_params,
                'augment': episode.augment.as_dict() if episode.augment else None,
                'images': images,
            })
        manifest = {'schema_version': MANIFEST_SCHEMA_VERSION, 'episodes': entries}
        with open(directory / MANIFEST_NAME, 'w', encoding='utf-8') as handle:
            json.dump(manifest, handle, indent=2)
    except OSError as e:
        raise StorageIOError(getattr(e, 'filename', None) or directory, e.strerror or str(e)) from e

    logger.info(f"Saved {len(entries)} episodes to {directory}")
    return manifest


def read_manifest(directory):
    """Parse and validate ``manifest.json``; the episode list keeps file order"""
    path = Path(directory) / MANIFEST_NAME
    try:
        with open(path, 'r', encoding='utf-8') as handle:
            raw = json.load(handle)
    except OSError as e:
        raise StorageIOError(path, e.strerror or str(e)) from e
    except json.JSONDecodeError as e:
        raise StorageIOError(path, f"manifest is not valid JSON: {e}") from e

    serializer = DatasetManifestSerializer(data=raw)
    try:
        serializer.is_valid(raise_exception=True)
    except drf_serializers.ValidationError as e:
        raise StorageIOError(path, f"malformed manifest: {e.detail}") from e
    return serializer.validated_data


def _read_image(episode_id, path, side):
    try:
        with Image.open(path) as image:
            if image.format != 'PPM' or image.mode != 'L':
                raise DatasetIntegrityError(episode_id, f"{path.name}: not an 8-bit binary graymap")
            if image.size != (side, side):
                raise DatasetIntegrityError(episode_id, f"{path.name}: expected {side}x{side}, got {image.size}")
            pixels = np.asarray(image, dtype=np.uint8)
    except (UnidentifiedImageError, SyntaxError) as e:
        raise DatasetIntegrityError(episode_id, f"{path.name}: bad header ({e})") from e
    except OSError as e:
        raise StorageIOError(path, e.strerror or str(e)) from e
    return pixels.astype(np.float32) / 255.0


def _load_episode(directory, entry):
    episode_id = entry['id']
    episode_dir = directory / PROBLEMS_DIR / episode_id
    if len(entry['images']) != EPISODE_SIZE:
        raise DatasetIntegrityError(episode_id, f"expected {EPISODE_SIZE} images, found {len(entry['images'])}")
    on_disk = sorted(p.name for p in episode_dir.glob('img_*.pgm')) if episode_dir.is_dir() else []
    if len(on_disk) != EPISODE_SIZE:
        raise DatasetIntegrityError(episode_id, f"expected {EPISODE_SIZE} images on disk, found {len(on_disk)}")

    images = []
    for number, image in enumerate(entry['images'], start=1):
        if image['file'] != image_name(number):
            raise DatasetIntegrityError(episode_id, f"image {number} is listed as {image['file']}")
        path = episode_dir / image['file']
        if not path.is_file():
            raise DatasetIntegrityError(episode_id, f"missing image {image['file']}")
        if sha256_file(path) != image['sha256']:
            raise DatasetIntegrityError(episode_id, f"checksum mismatch for {image['file']}")
        images.append(_read_image(episode_id, path, entry['image_side']))

    augment = AugmentSpec.from_dict(entry['augment']) if entry.get('augment') else None
    return BongardEpisode(
        episode_id=episode_id,
        family=entry['family'],
        split=entry['split'],
        seed=entry['seed'],
        images=np.stack(images),
        concept_params=entry['concept_params'],
        augment=augment,
    )


def load_dataset(directory, split=None, workers=1):
    """
    Load the episodes of a dataset directory, optionally only one split.

    Every image is checksummed and its header checked; any defect raises
    ``DatasetIntegrityError`` naming the episode.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise StorageIOError(directory, 'dataset directory does not exist')
    manifest = read_manifest(directory)
    entries = [e for e in manifest['episodes'] if split is None or e['split'] == split]

    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(lambda entry: _load_episode(directory, entry), entries))
    else:
        episodes = [_load_episode(directory, entry) for entry in entries]

    logger.info(f"Loaded {len(episodes)} episodes from {directory} (split={split or 'all'})")
    return episodes


def save_checkpoint(path, state_dict, metadata=None):
    """Write a state dict as raw little-endian buffers behind a JSON manifest"""
    path = Path(path)
    tensors = []
    buffers = []
    offset = 0
    for name, tensor in state_dict.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise ArtifactMismatchError(f"cannot store {name}: unsupported dtype {tensor.dtype}")
        data = tensor.numpy().astype(_DTYPES[tensor.dtype], copy=False).tobytes()
        tensors.append({
            'name': name,
            'dtype': _DTYPES[tensor.dtype],
            'shape': list(tensor.shape),
            'offset': offset,
            'nbytes': len(data),
        })
        buffers.append(data)
        offset += len(data)

    manifest = json.dumps({'metadata': metadata or {}, 'tensors': tensors}, sort_keys=True).encode('utf-8')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as handle:
            handle.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest)))
            handle.write(manifest)
            for data in buffers:
                handle.write(data)
    except OSError as e:
        raise StorageIOError(path, e.strerror or str(e)) from e
    logger.debug(f"Wrote checkpoint {path} with {len(tensors)} tensors")


def load_checkpoint(path):
    """
    Read a checkpoint written by ``save_checkpoint``.

    Returns:
        tuple: (OrderedDict of tensors, metadata dict)
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise StorageIOError(path, e.strerror or str(e)) from e

    if len(blob) < _HEADER.size:
        raise ArtifactMismatchError(f"{path}: truncated checkpoint header")
    magic, version, manifest_length = _HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise ArtifactMismatchError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ArtifactMismatchError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    start = _HEADER.size + manifest_length
    try:
        manifest = json.loads(blob[_HEADER.size:start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactMismatchError(f"{path}: unreadable checkpoint manifest") from e

    if not isinstance(manifest, dict):
        raise ArtifactMismatchError(f"{path}: checkpoint manifest is not an object")
    for key, kind in (('tensors', list), ('metadata', dict)):
        if not isinstance(manifest.get(key), kind):
            raise ArtifactMismatchError(f"{path}: checkpoint manifest has no valid '{key}' entry")

    state = OrderedDict()
    for record in manifest['tensors']:
        try:
            name = record['name']
            begin = start + record['offset']
            end = begin + record['nbytes']
            if begin < start or end > len(blob) or record['dtype'] not in _TORCH_DTYPES:
                raise ArtifactMismatchError(f"{path}: tensor {name} is truncated or has an unknown dtype")
            array = np.frombuffer(blob[begin:end], dtype=record['dtype']).reshape(record['shape']).copy()
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactMismatchError(f"{path}: malformed tensor record {record!r}") from e
        state[name] = torch.from_numpy(array.astype(array.dtype.newbyteorder('=')))
    return state, manifest['metadata']
