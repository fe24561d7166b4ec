"""
Unit tests for dataset directories and checkpoints on disk
"""
import json
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from concepts.episodes import generate_dataset, generate_episode
from concepts.exceptions import ArtifactMismatchError, DatasetIntegrityError, StorageIOError
from concepts.models import DatasetSplit
from concepts.storage import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    MANIFEST_NAME,
    PROBLEMS_DIR,
    image_name,
    load_checkpoint,
    load_dataset,
    read_manifest,
    save_checkpoint,
    save_dataset,
)
from concepts.utils import sha256_file

SIDE = 24


class DatasetStorageTest(SimpleTestCase):
    """Test cases for save_dataset / load_dataset"""

    def setUp(self):
        """Set up test data"""
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name) / 'data'
        self.episodes = generate_dataset(['count-parity', 'position-relation'], 4, seed=7, image_side=SIDE)
        self.manifest = save_dataset(self.episodes, self.root)

    def episode_dir(self, index=0):
        return self.root / PROBLEMS_DIR / self.episodes[index].episode_id

    def test_layout(self):
        """Test that every episode gets 14 binary graymaps and a manifest entry"""
        self.assertTrue((self.root / MANIFEST_NAME).is_file())
        self.assertEqual(len(self.manifest['episodes']), 4)
        files = sorted(p.name for p in self.episode_dir().iterdir())
        self.assertEqual(files, [image_name(n) for n in range(1, 15)])
        self.assertTrue((self.episode_dir() / 'img_01.pgm').read_bytes().startswith(b'P5'))

    def test_reload_preserves_pixels(self):
        """Test that loaded images equal the 8-bit quantised originals"""
        loaded = load_dataset(self.root)
        self.assertEqual([e.episode_id for e in loaded], [e.episode_id for e in self.episodes])
        for original, restored in zip(self.episodes, loaded):
            expected = np.rint(original.images * 255.0) / 255.0
            np.testing.assert_allclose(restored.images, expected, atol=1e-6)
            self.assertEqual(restored.concept_params, original.concept_params)
            self.assertEqual(restored.split, original.split)

    def test_split_filter(self):
        """Test that load_dataset keeps only the requested split"""
        for split in DatasetSplit.values:
            loaded = load_dataset(self.root, split)
            expected = [e.episode_id for e in self.episodes if e.split == split]
            self.assertEqual([e.episode_id for e in loaded], expected)

    def test_parallel_load_matches_serial(self):
        """Test that threaded loading returns the same episodes in order"""
        serial = load_dataset(self.root)
        parallel = load_dataset(self.root, workers=3)
        for a, b in zip(serial, parallel):
            self.assertEqual(a.episode_id, b.episode_id)
            self.assertTrue(np.array_equal(a.images, b.images))

    def test_same_seed_same_checksums(self):
        """Test that regenerating with the same seed writes identical files"""
        other = self.root.parent / 'again'
        again = save_dataset(generate_dataset(['count-parity', 'position-relation'], 4, seed=7, image_side=SIDE), other)
        self.assertEqual(again, self.manifest)

    def test_missing_image(self):
        """Test that a deleted image names its episode"""
        (self.episode_dir() / 'img_05.pgm').unlink()
        with self.assertRaises(DatasetIntegrityError) as ctx:
            load_dataset(self.root)
        self.assertEqual(ctx.exception.episode_id, self.episodes[0].episode_id)

    def test_checksum_mismatch(self):
        """Test that a modified image fails its checksum"""
        path = self.episode_dir(1) / 'img_03.pgm'
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with self.assertRaises(DatasetIntegrityError) as ctx:
            load_dataset(self.root)
        self.assertIn('checksum', str(ctx.exception))

    def test_bad_header(self):
        """Test that a file that is not a graymap is rejected even with a matching checksum"""
        path = self.episode_dir() / 'img_02.pgm'
        path.write_bytes(b'not an image at all')
        manifest = json.loads((self.root / MANIFEST_NAME).read_text())
        manifest['episodes'][0]['images'][1]['sha256'] = sha256_file(path)
        (self.root / MANIFEST_NAME).write_text(json.dumps(manifest))
        with self.assertRaises(DatasetIntegrityError):
            load_dataset(self.root)

    def test_wrong_image_count(self):
        """Test that a manifest listing 13 images is rejected"""
        manifest = json.loads((self.root / MANIFEST_NAME).read_text())
        manifest['episodes'][0]['images'].pop()
        (self.root / MANIFEST_NAME).write_text(json.dumps(manifest))
        with self.assertRaises(DatasetIntegrityError):
            load_dataset(self.root)

    def test_missing_directory(self):
        """Test that a missing dataset directory raises StorageIOError"""
        with self.assertRaises(StorageIOError):
            load_dataset(self.root.parent / 'nowhere')

    def test_malformed_manifest(self):
        """Test that an unparseable manifest raises StorageIOError"""
        (self.root / MANIFEST_NAME).write_text('{not json')
        with self.assertRaises(StorageIOError):
            read_manifest(self.root)

    def test_wrong_schema_version(self):
        """Test that an unknown schema version is rejected"""
        manifest = json.loads((self.root / MANIFEST_NAME).read_text())
        manifest['schema_version'] = 99
        (self.root / MANIFEST_NAME).write_text(json.dumps(manifest))
        with self.assertRaises(StorageIOError):
            read_manifest(self.root)

    def test_empty_dataset(self):
        """Test that zero episodes write and load an empty manifest"""
        empty = self.root.parent / 'empty'
        manifest = save_dataset([], empty)
        self.assertEqual(manifest['episodes'], [])
        self.assertEqual(load_dataset(empty), [])

    def test_augment_recorded(self):
        """Test that an augmented episode's transform survives the manifest"""
        from concepts.episodes import augment_episode

        episode = augment_episode(generate_episode('convexity', 3, image_side=SIDE, split='train'), 5)
        target = self.root.parent / 'augmented'
        save_dataset([episode], target)
        (loaded,) = load_dataset(target)
        self.assertEqual(loaded.augment, episode.augment)


class CheckpointTest(SimpleTestCase):
    """Test cases for save_checkpoint / load_checkpoint"""

    def setUp(self):
        """Set up test data"""
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.path = Path(tmp.name) / 'checkpoints' / 'best.ckpt'
        torch.manual_seed(0)
        self.state = OrderedDict([
            ('layer.weight', torch.randn(3, 4)),
            ('layer.bias', torch.randn(3, dtype=torch.float64)),
            ('calibration.running_mean', torch.tensor(0.25)),
            ('stack.index', torch.arange(5)),
        ])

    def test_bit_exact_reload(self):
        """Test that tensors and metadata come back bit-exact"""
        save_checkpoint(self.path, self.state, {'epoch': 3, 'config': {'name': 'x'}})
        state, metadata = load_checkpoint(self.path)
        self.assertEqual(list(state), list(self.state))
        for name, tensor in self.state.items():
            self.assertEqual(state[name].dtype, tensor.dtype)
            self.assertTrue(torch.equal(state[name], tensor))
        self.assertEqual(metadata, {'epoch': 3, 'config': {'name': 'x'}})

    def test_file_starts_with_magic(self):
        """Test the header magic"""
        save_checkpoint(self.path, self.state)
        self.assertTrue(self.path.read_bytes().startswith(CHECKPOINT_MAGIC))

    def test_bad_magic(self):
        """Test that a foreign file raises ArtifactMismatchError"""
        self.path.parent.mkdir(parents=True)
        self.path.write_bytes(b'PK\x03\x04' + b'\x00' * 64)
        with self.assertRaises(ArtifactMismatchError):
            load_checkpoint(self.path)

    def test_truncated(self):
        """Test that a truncated buffer section raises ArtifactMismatchError"""
        save_checkpoint(self.path, self.state)
        data = self.path.read_bytes()
        self.path.write_bytes(data[:-8])
        with self.assertRaises(ArtifactMismatchError):
            load_checkpoint(self.path)

    def write_manifest(self, manifest, payload=b''):
        body = json.dumps(manifest).encode('utf-8')
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_bytes(struct.pack('<8sIQ', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(body)) + body + payload)

    def test_manifest_without_tensors(self):
        """Test that a manifest lacking its tensor list raises ArtifactMismatchError"""
        self.write_manifest({'metadata': {'epoch': 1}})
        with self.assertRaises(ArtifactMismatchError) as ctx:
            load_checkpoint(self.path)
        self.assertIn('tensors', str(ctx.exception))

    def test_manifest_without_metadata(self):
        """Test that a manifest lacking metadata raises ArtifactMismatchError"""
        self.write_manifest({'tensors': []})
        with self.assertRaises(ArtifactMismatchError):
            load_checkpoint(self.path)

    def test_manifest_not_an_object(self):
        """Test that a JSON list manifest raises ArtifactMismatchError"""
        self.write_manifest([1, 2, 3])
        with self.assertRaises(ArtifactMismatchError):
            load_checkpoint(self.path)

    def test_malformed_tensor_record(self):
        """Test that records with missing keys or impossible shapes raise ArtifactMismatchError"""
        for record in (
            {'name': 'w', 'dtype': '<f4', 'offset': 0},
            {'name': 'w', 'dtype': '<f4', 'shape': [3], 'offset': 0, 'nbytes': 8},
            {'name': 'w', 'dtype': '<f4', 'shape': [2], 'offset': -8, 'nbytes': 8},
        ):
            self.write_manifest({'metadata': {}, 'tensors': [record]}, payload=b'\x00' * 8)
            with self.assertRaises(ArtifactMismatchError):
                load_checkpoint(self.path)

    def test_missing_file(self):
        """Test that a missing checkpoint raises StorageIOError"""
        with self.assertRaises(StorageIOError):
            load_checkpoint(self.path)
