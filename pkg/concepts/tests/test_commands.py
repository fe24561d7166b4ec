"""
Tests for the gen, train, eval, verify and compare management commands
"""
import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest.mock import patch

import torch
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import TestCase

from concepts.exceptions import EXIT_ARTIFACT_MISMATCH, EXIT_IO, EXIT_USAGE, EXIT_VERIFY_FAILED, ContractError
from concepts.models import EvaluationRecord, RunStatus, TrainingRun
from concepts.tests.test_training import SIDE, raw_config, write_dataset


class CommandTestCase(TestCase):
    """Shared temporary workspace for command tests"""

    def setUp(self):
        """Set up test data"""
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)

    def run_command(self, name, *args, **options):
        out = StringIO()
        call_command(name, *args, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()


class GenCommandTest(CommandTestCase):
    """Test cases for the gen command"""

    def gen(self, out, **options):
        defaults = {'family': ['count-parity', 'convexity'], 'count': 4, 'seed': 9, 'image_side': SIDE}
        defaults.update(options)
        return self.run_command('gen', out=str(out), **defaults)

    def test_writes_dataset(self):
        """Test that gen writes a manifest and reports the family counts"""
        output = self.gen(self.root / 'data')
        manifest = json.loads((self.root / 'data' / 'manifest.json').read_text())
        self.assertEqual(len(manifest['episodes']), 4)
        self.assertIn('Episodes: 4', output)
        self.assertIn('count-parity: 2', output)
        self.assertIn('convexity: 2', output)

    def test_deterministic(self):
        """Test that the same seed produces the same manifest"""
        self.gen(self.root / 'a')
        self.gen(self.root / 'b')
        self.assertEqual(
            (self.root / 'a' / 'manifest.json').read_text(),
            (self.root / 'b' / 'manifest.json').read_text(),
        )

    def test_zero_count(self):
        """Test that a count of zero writes an empty dataset"""
        self.gen(self.root / 'empty', count=0)
        manifest = json.loads((self.root / 'empty' / 'manifest.json').read_text())
        self.assertEqual(manifest['episodes'], [])

    def test_fixed_split(self):
        """Test that a fixed split labels every episode with it"""
        self.gen(self.root / 'val', split='val')
        manifest = json.loads((self.root / 'val' / 'manifest.json').read_text())
        self.assertEqual({entry['split'] for entry in manifest['episodes']}, {'val'})

    def test_negative_count(self):
        """Test that a negative count is a usage error"""
        with self.assertRaises(CommandError) as ctx:
            self.gen(self.root / 'data', count=-1)
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_image_side_below_family_minimum(self):
        """Test that a canvas too small for a family is rejected before generating"""
        with self.assertRaises(CommandError) as ctx:
            self.gen(self.root / 'data', family=['count-parity'], image_side=8)
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)
        self.assertIn('at least 24', str(ctx.exception))
        self.assertFalse((self.root / 'data').exists())

    def test_image_side_minimum_is_the_largest_over_families(self):
        """Test that mixing families applies the strictest minimum"""
        self.gen(self.root / 'small', family=['convexity'], image_side=16)
        with self.assertRaises(CommandError) as ctx:
            self.gen(self.root / 'mixed', family=['convexity', 'count-parity'], image_side=16)
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_split_counts(self):
        """Test that --split-count writes exactly the requested episodes per split"""
        output = self.run_command(
            'gen',
            family=['count-parity'],
            split_count=['train=5', 'test=3'],
            seed=9,
            image_side=SIDE,
            out=str(self.root / 'data'),
        )
        manifest = json.loads((self.root / 'data' / 'manifest.json').read_text())
        splits = [entry['split'] for entry in manifest['episodes']]
        self.assertEqual(splits.count('train'), 5)
        self.assertEqual(splits.count('test'), 3)
        self.assertEqual(splits.count('val'), 0)
        self.assertIn('Episodes: 8', output)

    def test_split_count_usage_errors(self):
        """Test malformed and conflicting --split-count usages"""
        for options in (
            {'split_count': ['train']},
            {'split_count': ['holdout=3']},
            {'split_count': ['train=2', 'train=3']},
            {'split_count': ['train=2'], 'count': 4},
            {'split_count': ['train=2'], 'split': 'val'},
        ):
            options.setdefault('count', None)
            with self.assertRaises(CommandError) as ctx:
                self.gen(self.root / 'data', **options)
            self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_count_required(self):
        """Test that omitting both --count and --split-count is a usage error"""
        with self.assertRaises(CommandError) as ctx:
            self.gen(self.root / 'data', count=None)
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)


class TrainEvalCommandTest(CommandTestCase):
    """Test cases for the train and eval commands"""

    def setUp(self):
        """Set up test data"""
        super().setUp()
        self.data = self.root / 'data'
        write_dataset(self.data)

    def write_config(self, **overrides):
        path = self.root / 'run.json'
        path.write_text(json.dumps(raw_config(dataset=str(self.data), **overrides)))
        return path

    def train(self, **overrides):
        run_dir = self.root / 'runs' / 'tiny'
        output = self.run_command('train', config=str(self.write_config(**overrides)), run_dir=str(run_dir), threads=1)
        return run_dir, output

    def test_train(self):
        """Test a complete tiny training run"""
        run_dir, output = self.train()
        self.assertIn('Best epoch', output)
        self.assertIn('Held-out pairwise accuracy', output)
        self.assertTrue((run_dir / 'checkpoints' / 'best.ckpt').exists())
        self.assertEqual(TrainingRun.objects.get().status, RunStatus.COMPLETED)

    def test_seed_override(self):
        """Test that --seed replaces the config seed and suffixes the run name"""
        with self.settings(REASONER_RUNS_ROOT=str(self.root / 'runs')):
            self.run_command('train', config=str(self.write_config(epochs=1)), seed=2, threads=1)
        run_dir = self.root / 'runs' / 'tiny-seed2'
        written = json.loads((run_dir / 'config.json').read_text())
        self.assertEqual((written['seed'], written['name']), (2, 'tiny-seed2'))
        self.assertEqual(TrainingRun.objects.get().seed, 2)

    def test_missing_config(self):
        """Test that an unreadable config file is an I/O error"""
        with self.assertRaises(CommandError) as ctx:
            self.run_command('train', config=str(self.root / 'missing.json'))
        self.assertEqual(ctx.exception.returncode, EXIT_IO)

    def test_malformed_config(self):
        """Test that broken JSON is a usage error"""
        path = self.root / 'broken.json'
        path.write_text('{"name": ')
        with self.assertRaises(CommandError) as ctx:
            self.run_command('train', config=str(path))
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_invalid_config(self):
        """Test that a config failing validation is a usage error"""
        with self.assertRaises(CommandError) as ctx:
            self.run_command('train', config=str(self.write_config(model='pmoc-v3')))
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_oversized_n_perspectives(self):
        """Test that more perspectives than feature-grid cells is a usage error, not a crash"""
        encoder = {'channels': [1, 4, 8], 'image_side': SIDE, 'd': 8, 'm': 2, 'n_perspectives': 1000}
        with self.assertRaises(CommandError) as ctx:
            self.run_command('train', config=str(self.write_config(encoder=encoder)), run_dir=str(self.root / 'x'))
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)
        self.assertIn('n_perspectives', str(ctx.exception))
        self.assertFalse(TrainingRun.objects.exists())

    def test_config_contract_error_maps_to_exit_code(self):
        """Test that a ReasonerError raised while building the config is mapped, not re-raised"""
        with patch('concepts.management.commands.train.load_run_config', side_effect=ContractError('bad config')):
            with self.assertRaises(CommandError) as ctx:
                self.run_command('train', config=str(self.write_config()))
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_eval_records_report(self):
        """Test that eval prints, writes and records the report"""
        run_dir, _ = self.train()
        report_path = self.root / 'report.json'
        output = self.run_command(
            'eval',
            checkpoint=str(run_dir / 'checkpoints' / 'best.ckpt'),
            data=str(self.data),
            split='test',
            batch_size=4,
            out=str(report_path),
        )
        report = json.loads(report_path.read_text())
        self.assertEqual(report['episodes'], 2)
        self.assertEqual(report['split'], 'test')
        self.assertEqual(report['model'], 'pmoc-v2')
        self.assertIn('Pairwise accuracy', output)

        record = EvaluationRecord.objects.get()
        self.assertEqual(record.run, TrainingRun.objects.get())
        self.assertEqual(record.split, 'test')
        self.assertEqual(record.pairwise_accuracy, report['pairwise'])

    def test_untrained_model_is_at_chance(self):
        """Test that an untrained checkpoint scores pairwise accuracy near 0.5 over 500 balanced episodes"""
        data = self.root / 'balanced'
        self.run_command(
            'gen', family=['count-parity'], split_count=['test=500'], seed=17, image_side=SIDE, out=str(data)
        )
        path = self.root / 'untrained.json'
        path.write_text(json.dumps(raw_config(dataset=str(data), epochs=0, name='untrained')))
        run_dir = self.root / 'runs' / 'untrained'
        self.run_command('train', config=str(path), run_dir=str(run_dir), threads=1)

        report_path = self.root / 'untrained-report.json'
        self.run_command(
            'eval',
            checkpoint=str(run_dir / 'checkpoints' / 'best.ckpt'),
            data=str(data),
            split='test',
            out=str(report_path),
        )
        report = json.loads(report_path.read_text())
        self.assertEqual(report['episodes'], 500)
        self.assertGreaterEqual(report['pairwise'], 0.4)
        self.assertLessEqual(report['pairwise'], 0.6)

    def test_eval_rejects_non_checkpoint(self):
        """Test that a file without the checkpoint header is an artifact mismatch"""
        bogus = self.root / 'bogus.ckpt'
        bogus.write_bytes(b'not a checkpoint at all, just bytes')
        with self.assertRaises(CommandError) as ctx:
            self.run_command('eval', checkpoint=str(bogus), data=str(self.data))
        self.assertEqual(ctx.exception.returncode, EXIT_ARTIFACT_MISMATCH)
        self.assertFalse(EvaluationRecord.objects.exists())

    def test_eval_missing_checkpoint(self):
        """Test that a missing checkpoint is an I/O error"""
        with self.assertRaises(CommandError) as ctx:
            self.run_command('eval', checkpoint=str(self.root / 'nope.ckpt'), data=str(self.data))
        self.assertEqual(ctx.exception.returncode, EXIT_IO)


class VerifyCommandTest(CommandTestCase):
    """Test cases for the verify command"""

    def test_params_suite(self):
        """Test the parameter-count suite output"""
        output = self.run_command('verify', suite='params')
        self.assertIn('full=200704, straw=28672, ratio=7', output)
        self.assertIn('All properties hold', output)

    def test_failure_exit_code(self):
        """Test that a broken squash makes verify fail with exit code 1"""
        def broken_squash(v, dim=-1):
            return v * torch.linalg.vector_norm(v, dim=dim, keepdim=True)

        with patch('concepts.pose.squash', broken_squash):
            with self.assertRaises(CommandError) as ctx:
                self.run_command('verify', suite='equivalence')
        self.assertEqual(ctx.exception.returncode, EXIT_VERIFY_FAILED)
        self.assertIn('equivalence.squash_closed_form', str(ctx.exception))


class CompareCommandTest(CommandTestCase):
    """Test cases for the compare command"""

    def write_configs(self, entries):
        path = self.root / 'stacks.json'
        path.write_text(json.dumps(entries))
        return str(path)

    def test_table_and_csv(self):
        """Test the printed table and CSV file for small stacks"""
        entries = [
            {'variant': variant, 'n': 4, 'd': 8, 'm': 2, 'N': 2, 'batch': 2, 'steps': 1}
            for variant in ('vanilla', 'pose', 'straw')
        ]
        csv_path = self.root / 'compare.csv'
        output = self.run_command('compare', configs=[self.write_configs(entries)], csv=str(csv_path), no_isolate=True)
        self.assertIn('variant | n | d | m | N | batch', output)
        self.assertIn('straw | 4 | 8 | 2 | 2 | 2 | 256 | 256', output)
        self.assertEqual(len(csv_path.read_text().strip().splitlines()), 4)

    def test_mismatched_dims(self):
        """Test that configs with different d are a usage error"""
        entries = [{'variant': 'pose', 'd': 8, 'm': 2}, {'variant': 'straw', 'd': 16, 'm': 2}]
        with self.assertRaises(CommandError) as ctx:
            self.run_command('compare', configs=[self.write_configs(entries)], no_isolate=True)
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_indivisible_heads(self):
        """Test that d not divisible by m fails validation"""
        with self.assertRaises(CommandError) as ctx:
            self.run_command('compare', configs=[self.write_configs({'variant': 'pose', 'd': 10, 'm': 4})])
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)

    def test_non_positive_steps(self):
        """Test that --steps 0 is a usage error"""
        with self.assertRaises(CommandError) as ctx:
            self.run_command('compare', steps=0)
        self.assertEqual(ctx.exception.returncode, EXIT_USAGE)
