"""
Train one model from a JSON run configuration
"""
import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from concepts.exceptions import EXIT_IO, EXIT_USAGE, ReasonerError, exit_code
from concepts.serializers import load_run_config
from concepts.training import Trainer


class Command(BaseCommand):
    help = 'Train an SBSD or PMoC model and write a run directory'

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            required=True,
            help='Path to the JSON run configuration',
        )
        parser.add_argument(
            '--run-dir',
            type=str,
            help='Run directory (default: REASONER_RUNS_ROOT/<config name>)',
        )
        parser.add_argument(
            '--seed',
            type=int,
            help='Override the config seed; the run name gets a -seed<N> suffix',
        )
        parser.add_argument(
            '--threads',
            type=int,
            help='Worker thread count; 1 is deterministic (default: REASONER_THREADS)',
        )

    def handle(self, *args, **options):
        config_path = Path(options['config'])
        try:
            config_text = config_path.read_text(encoding='utf-8')
        except OSError as e:
            raise CommandError(f'{config_path}: {e.strerror or e}', returncode=EXIT_IO) from e

        try:
            raw = json.loads(config_text)
            if options.get('seed') is not None and isinstance(raw, dict):
                raw['seed'] = options['seed']
                raw['name'] = f"{raw.get('name')}-seed{options['seed']}"
                config_text = json.dumps(raw, indent=2)
            cfg = load_run_config(raw)
        except json.JSONDecodeError as e:
            raise CommandError(f'{config_path}: not valid JSON ({e})', returncode=EXIT_USAGE) from e
        except serializers.ValidationError as e:
            raise CommandError(f'{config_path}: invalid run config {e.detail}', returncode=EXIT_USAGE) from e
        except ReasonerError as e:
            raise CommandError(f'{config_path}: {e}', returncode=exit_code(e)) from e

        run_dir = Path(options['run_dir']) if options.get('run_dir') else Path(settings.REASONER_RUNS_ROOT) / cfg.name
        self.stdout.write(f'Training {cfg.model} "{cfg.name}" for {cfg.epochs} epochs into {run_dir}...')

        try:
            summary = Trainer(cfg, run_dir, config_text, threads=options.get('threads')).run()
        except ReasonerError as e:
            raise CommandError(str(e), returncode=exit_code(e)) from e
        except OSError as e:
            raise CommandError(f'{getattr(e, "filename", None) or run_dir}: {e.strerror or e}', returncode=EXIT_IO) from e

        self.stdout.write(f"  Best epoch: {summary['best_epoch']}")
        report = summary['test']
        if report:
            self.stdout.write(f"  Held-out per-image accuracy: {report['per_image']:.4f}")
            self.stdout.write(f"  Held-out pairwise accuracy: {report['pairwise']:.4f}")
        else:
            self.stdout.write(self.style.WARNING('  No held-out episodes to report on'))
        self.stdout.write(self.style.SUCCESS(f'Run complete: {run_dir}'))
