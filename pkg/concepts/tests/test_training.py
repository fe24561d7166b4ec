"""
Tests for run configuration, models, the training loop and evaluation
"""
import json
import tempfile
from pathlib import Path
from unittest.mock import patch

import torch
from django.test import SimpleTestCase, TestCase, override_settings
from rest_framework import serializers

from concepts.episodes import generate_dataset
from concepts.exceptions import ArtifactMismatchError, NumericDivergenceError
from concepts.models import RunStatus, TrainingRun
from concepts.pmoc import HeadVersion
from concepts.pose import StackVariant
from concepts.serializers import load_run_config
from concepts.storage import load_checkpoint, load_dataset, save_dataset
from concepts.training import (
    DEFAULT_BATCH,
    STRAW_BATCH,
    PMoCModel,
    SBSDModel,
    Trainer,
    build_model,
    check_compatible,
    episodes_to_tensor,
    evaluate,
    restore_model,
)

SIDE = 32


def raw_config(**overrides):
    """Small run config over a 32-pixel dataset"""
    raw = {
        'schema_version': 1,
        'name': 'tiny',
        'model': 'pmoc-v2',
        'seed': 3,
        'epochs': 2,
        'dataset': 'unused',
        'augment': True,
        'encoder': {'channels': [1, 4, 8], 'image_side': SIDE, 'd': 8, 'm': 2, 'n_perspectives': 4},
        'head': {'N': 2},
        'optimizer': {'step_size': 0.003, 'batch_size': 4},
        'sinkhorn': {'epsilon': 0.1, 'max_iters': 50},
    }
    raw.update(overrides)
    return raw


def write_dataset(root):
    """Count-parity dataset with 6 train, 2 val and 2 test episodes"""
    episodes = []
    for split, count in (('train', 6), ('val', 2), ('test', 2)):
        episodes += generate_dataset(['count-parity'], count, seed=11, split=split, image_side=SIDE)
    save_dataset(episodes, root)
    return episodes


class RunConfigTest(SimpleTestCase):
    """Test cases for run-config validation and defaults"""

    def test_defaults(self):
        """Test the resolved optimizer and head defaults"""
        cfg = load_run_config({'schema_version': 1, 'name': 'x', 'model': 'pmoc-v2', 'seed': 0, 'dataset': 'd'})
        self.assertEqual(cfg.epochs, 50)
        self.assertEqual(cfg.optimizer.step_size, 1e-3)
        self.assertEqual(cfg.optimizer.decay, 0.995)
        self.assertEqual(cfg.optimizer.weight_decay, 1e-4)
        self.assertEqual(cfg.optimizer.batch_size, DEFAULT_BATCH)
        self.assertEqual(cfg.head.variant, StackVariant.VANILLA)
        self.assertEqual((cfg.head.d, cfg.head.m), (cfg.encoder.d, cfg.encoder.m))
        self.assertEqual(cfg.head_version, HeadVersion.DIRECT)
        self.assertTrue(cfg.augment)

    def test_straw_defaults(self):
        """Test that the straw model selects the straw stack and a batch of 20"""
        cfg = load_run_config(raw_config(model='pmoc-v2-straw', optimizer={}))
        self.assertEqual(cfg.head.variant, StackVariant.STRAW)
        self.assertEqual(cfg.optimizer.batch_size, STRAW_BATCH)

    @override_settings(SINKHORN_EPSILON=0.3, SINKHORN_MAX_ITERS=7, SINKHORN_TOL=1e-4)
    def test_sinkhorn_defaults_from_settings(self):
        """Test that missing Sinkhorn fields come from settings"""
        cfg = load_run_config(raw_config(sinkhorn={'epsilon': 0.2}))
        self.assertEqual(cfg.sinkhorn.epsilon, 0.2)
        self.assertEqual(cfg.sinkhorn.max_iters, 7)
        self.assertEqual(cfg.sinkhorn.tol, 1e-4)

    def test_raw_is_kept_verbatim(self):
        """Test that the config carries the JSON object exactly as read"""
        raw = raw_config()
        self.assertEqual(load_run_config(raw).raw, raw)

    def test_invalid_configs(self):
        """Test that contradictory or malformed configs fail validation"""
        bad = [
            raw_config(schema_version=2),
            raw_config(model='pmoc-v3'),
            raw_config(model='pmoc-v2-straw', head={'variant': 'pose'}),
            raw_config(model='sbsd', warm_start='runs/x/checkpoints/best.ckpt'),
            raw_config(encoder={'channels': [3, 8]}),
            raw_config(encoder={'d': 10, 'm': 4}),
            raw_config(encoder={'channels': [1, 4, 8], 'image_side': SIDE, 'n_perspectives': 65}),
            raw_config(optimizer={'step_size': 0}),
            raw_config(epochs=-1),
        ]
        for raw in bad:
            with self.assertRaises(serializers.ValidationError):
                load_run_config(raw)


class ModelTest(SimpleTestCase):
    """Test cases for the model factory and scoring"""

    def setUp(self):
        """Set up test data"""
        torch.manual_seed(0)
        self.images = torch.rand(2, 14, 1, SIDE, SIDE)

    def test_factory(self):
        """Test that each model kind builds the matching model"""
        self.assertIsInstance(build_model(load_run_config(raw_config(model='sbsd'))), SBSDModel)
        v1 = build_model(load_run_config(raw_config(model='pmoc-v1')))
        self.assertIsInstance(v1, PMoCModel)
        self.assertIsNotNone(v1.calibration)
        straw = build_model(load_run_config(raw_config(model='pmoc-v2-straw')))
        self.assertIsNone(straw.calibration)
        self.assertIsNotNone(straw.head.stack.global_token)

    def test_scores_and_losses(self):
        """Test score shapes and finite losses for every model kind"""
        for kind in ('sbsd', 'pmoc-v1', 'pmoc-v2', 'pmoc-v2-straw'):
            model = build_model(load_run_config(raw_config(model=kind)))
            loss, scores = model.training_step(self.images, step_seed=5)
            self.assertEqual(loss.dim(), 0)
            self.assertTrue(torch.isfinite(loss))
            self.assertEqual(tuple(scores.shape), (2, 8))
            self.assertFalse(scores.requires_grad)
            with torch.no_grad():
                model.eval()
                evaluated = model.score(self.images)
            self.assertTrue(torch.all((evaluated >= 0) & (evaluated <= 1)))

    def test_overfits_a_fixed_batch(self):
        """Test that repeated steps on one batch move the loss well below its starting value"""
        torch.manual_seed(5)
        episodes = generate_dataset(['count-parity'], 4, seed=2, split='train', image_side=SIDE)
        images = episodes_to_tensor(episodes)
        model = build_model(load_run_config(raw_config()))
        optimizer = torch.optim.Adam(model.parameters(), lr=0.01)
        losses = []
        for step in range(60):
            loss, _ = model.training_step(images, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        self.assertLess(sum(losses[-5:]) / 5, 0.8 * losses[0])

    def test_check_compatible(self):
        """Test that an image-side mismatch raises ArtifactMismatchError"""
        model = build_model(load_run_config(raw_config()))
        episodes = generate_dataset(['convexity'], 1, seed=0, image_side=SIDE + 8)
        with self.assertRaises(ArtifactMismatchError):
            check_compatible(model, episodes, 'data')

    def test_evaluate_report(self):
        """Test that evaluate reports both rules overall and per family"""
        episodes = generate_dataset(['count-parity', 'convexity'], 4, seed=1, image_side=SIDE)
        model = build_model(load_run_config(raw_config()))
        report = evaluate(model, episodes, batch_size=3)
        self.assertEqual(report['episodes'], 4)
        self.assertEqual(set(report['per_family']), {'count-parity', 'convexity'})
        for key in ('per_image', 'pairwise'):
            self.assertGreaterEqual(report[key], 0.0)
            self.assertLessEqual(report[key], 1.0)
        self.assertTrue(model.training)


class TrainerTest(TestCase):
    """Test cases for Trainer runs"""

    def setUp(self):
        """Set up test data"""
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        self.root = Path(tmp.name)
        self.data = self.root / 'data'
        write_dataset(self.data)

    def train(self, run_name='run', **overrides):
        raw = raw_config(dataset=str(self.data), **overrides)
        run_dir = self.root / run_name
        summary = Trainer(load_run_config(raw), run_dir, json.dumps(raw, indent=2), threads=1).run()
        return run_dir, summary

    def test_run_directory(self):
        """Test the files written by a completed run"""
        run_dir, summary = self.train()
        self.assertTrue((run_dir / 'checkpoints' / 'best.ckpt').is_file())
        self.assertTrue((run_dir / 'checkpoints' / 'last.ckpt').is_file())
        self.assertEqual(
            json.loads((run_dir / 'config.json').read_text()),
            raw_config(dataset=str(self.data)),
        )
        lines = (run_dir / 'metrics.jsonl').read_text().splitlines()
        self.assertEqual([json.loads(line)['epoch'] for line in lines], [1, 2])
        self.assertEqual(len((run_dir / 'timing.jsonl').read_text().splitlines()), 2)
        self.assertEqual(json.loads((run_dir / 'summary.json').read_text())['best_epoch'], summary['best_epoch'])
        self.assertEqual(summary['test']['episodes'], 2)

    def test_run_recorded(self):
        """Test that the run is registered and completed"""
        run_dir, _ = self.train()
        record = TrainingRun.objects.get(run_dir=str(run_dir))
        self.assertEqual(record.status, RunStatus.COMPLETED)
        self.assertEqual(record.epochs_completed, 2)
        self.assertEqual(record.model_kind, 'pmoc-v2')
        self.assertIsNotNone(record.test_pairwise)
        self.assertTrue(record.code_version)

    def test_reproducible_metrics(self):
        """Test that the same config and seed write identical metrics"""
        first, _ = self.train('first')
        second, _ = self.train('second')
        self.assertEqual((first / 'metrics.jsonl').read_text(), (second / 'metrics.jsonl').read_text())

    def test_loss_decreases_over_epochs(self):
        """Test that the epoch loss of a multi-epoch run ends below where it started"""
        run_dir, _ = self.train(
            'descent', epochs=8, augment=False, optimizer={'step_size': 0.01, 'batch_size': 3, 'decay': 1.0}
        )
        losses = [json.loads(line)['loss'] for line in (run_dir / 'metrics.jsonl').read_text().splitlines()]
        self.assertEqual(len(losses), 8)
        self.assertLess(losses[-1], losses[0])

    def test_zero_epochs(self):
        """Test that epochs=0 writes an untrained best checkpoint"""
        run_dir, summary = self.train(epochs=0)
        self.assertEqual(summary['best_epoch'], 0)
        self.assertEqual((run_dir / 'metrics.jsonl').read_text(), '')
        _, metadata = load_checkpoint(run_dir / 'checkpoints' / 'best.ckpt')
        self.assertEqual(metadata['epoch'], 0)

    def test_restore_is_bit_exact(self):
        """Test that a restored checkpoint reproduces the trained model's report"""
        run_dir, summary = self.train()
        model, metadata = restore_model(run_dir / 'checkpoints' / 'best.ckpt')
        self.assertEqual(metadata['model'], 'pmoc-v2')
        report = evaluate(model, load_dataset(self.data, 'test'), batch_size=4)
        again = evaluate(model, load_dataset(self.data, 'test'), batch_size=4)
        self.assertEqual(report, again)
        self.assertEqual(report['pairwise'], summary['test']['pairwise'])

    def test_nan_loss_aborts(self):
        """Test that a non-finite loss stops the run as diverged"""
        with patch('concepts.training.pmoc_loss', return_value=torch.tensor(float('nan'))):
            with self.assertRaises(NumericDivergenceError) as ctx:
                self.train()
        self.assertEqual(ctx.exception.step, 1)
        record = TrainingRun.objects.get()
        self.assertEqual(record.status, RunStatus.DIVERGED)
        self.assertIn('step 1', record.error)

    def test_sbsd_run(self):
        """Test a short SBSD run"""
        _, summary = self.train(model='sbsd', epochs=1)
        self.assertEqual(summary['model'], 'sbsd')

    def test_warm_start(self):
        """Test that PMoC copies conv weights from an SBSD checkpoint"""
        sbsd_dir, _ = self.train('sbsd', model='sbsd', epochs=0)
        source = sbsd_dir / 'checkpoints' / 'best.ckpt'
        cfg = load_run_config(raw_config(dataset=str(self.data), warm_start=str(source)))
        model = build_model(cfg)
        state, _ = load_checkpoint(source)
        torch.testing.assert_close(model.encoder.convs[0].weight, state['encoder.convs.0.weight'])

    def test_warm_start_needs_sbsd(self):
        """Test that warm starting from a PMoC checkpoint is refused"""
        pmoc_dir, _ = self.train('pmoc', epochs=0)
        cfg = load_run_config(raw_config(warm_start=str(pmoc_dir / 'checkpoints' / 'best.ckpt')))
        with self.assertRaises(ArtifactMismatchError):
            build_model(cfg)
