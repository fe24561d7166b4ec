"""
Evaluate a checkpoint on a dataset directory
"""
import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from concepts.exceptions import EXIT_IO, ReasonerError, exit_code
from concepts.models import DatasetSplit, EvaluationRecord, TrainingRun
from concepts.storage import load_dataset
from concepts.training import DEFAULT_BATCH, check_compatible, evaluate, restore_model
from concepts.utils import configure_threads


class Command(BaseCommand):
    help = 'Report per-image and pairwise accuracy of a checkpoint on a dataset'

    def add_arguments(self, parser):
        parser.add_argument(
            '--checkpoint',
            type=str,
            required=True,
            help='Checkpoint file written by train',
        )
        parser.add_argument(
            '--data',
            type=str,
            required=True,
            help='Dataset directory written by gen',
        )
        parser.add_argument(
            '--split',
            type=str,
            choices=[choice[0] for choice in DatasetSplit.choices],
            help='Only evaluate one split (default: every episode)',
        )
        parser.add_argument(
            '--batch-size',
            type=int,
            default=DEFAULT_BATCH,
            help=f'Episodes per forward pass (default: {DEFAULT_BATCH})',
        )
        parser.add_argument(
            '--out',
            type=str,
            help='Also write the JSON report to this path',
        )
        parser.add_argument(
            '--threads',
            type=int,
            help='Worker thread count (default: REASONER_THREADS)',
        )

    def handle(self, *args, **options):
        checkpoint = Path(options['checkpoint'])
        data = Path(options['data'])
        split = options.get('split')
        threads = configure_threads(options.get('threads'))

        try:
            model, metadata = restore_model(checkpoint)
            episodes = load_dataset(data, split, workers=threads)
            check_compatible(model, episodes, data)
            report = evaluate(model, episodes, max(1, options['batch_size']))
        except ReasonerError as e:
            raise CommandError(str(e), returncode=exit_code(e)) from e

        report['checkpoint'] = str(checkpoint)
        report['data'] = str(data)
        report['split'] = split or 'all'
        report['model'] = metadata.get('model')

        self.stdout.write(f"Checkpoint: {checkpoint} ({report['model']}, epoch {metadata.get('epoch')})")
        self.stdout.write(f"Episodes: {report['episodes']} (split: {report['split']})")
        self.stdout.write(f"Per-image accuracy: {report['per_image']:.4f}")
        self.stdout.write(f"Pairwise accuracy: {report['pairwise']:.4f}")
        for family, family_report in report['per_family'].items():
            self.stdout.write(
                f"  {family}: per-image {family_report['per_image']:.4f}, "
                f"pairwise {family_report['pairwise']:.4f} ({family_report['episodes']} episodes)"
            )
        rendered = json.dumps(report, indent=2, sort_keys=True)
        self.stdout.write(rendered)

        if options.get('out'):
            try:
                Path(options['out']).write_text(rendered + '\n', encoding='utf-8')
            except OSError as e:
                raise CommandError(f"{options['out']}: {e.strerror or e}", returncode=EXIT_IO) from e

        EvaluationRecord.objects.create(
            run=TrainingRun.objects.filter(run_dir=str(checkpoint.parent.parent)).first(),
            checkpoint_path=str(checkpoint),
            data_path=str(data),
            split=split or '',
            episodes=report['episodes'],
            per_image_accuracy=report['per_image'],
            pairwise_accuracy=report['pairwise'],
            per_family=report['per_family'],
        )
        self.stdout.write(self.style.SUCCESS('Evaluation recorded'))
