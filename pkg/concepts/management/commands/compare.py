"""
Compare parameter counts, step time and peak memory of the head stacks
"""
import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from concepts.comparison import CSV_COLUMNS, compare_heads, default_configs, write_csv
from concepts.exceptions import EXIT_IO, EXIT_USAGE, ReasonerError, exit_code
from concepts.serializers import HeadComparisonSerializer


class Command(BaseCommand):
    help = 'Measure vanilla, pose and straw-pose attention stacks side by side'

    def add_arguments(self, parser):
        parser.add_argument(
            '--configs',
            nargs='*',
            default=[],
            help='JSON files, each holding one stack entry or a list of them (default: all three variants)',
        )
        parser.add_argument(
            '--csv',
            type=str,
            help='Also write the table to this CSV file',
        )
        parser.add_argument(
            '--steps',
            type=int,
            default=5,
            help='Timed steps per variant when no configs are given (default: 5)',
        )
        parser.add_argument(
            '--batch',
            type=int,
            default=40,
            help='Batch size when no configs are given (default: 40)',
        )
        parser.add_argument(
            '--no-isolate',
            action='store_true',
            help='Measure every variant in this process (peak memory is then shared)',
        )

    def load_configs(self, paths):
        """Read and validate every stack entry from the given files"""
        configs = []
        for path in map(Path, paths):
            try:
                raw = json.loads(path.read_text(encoding='utf-8'))
            except OSError as e:
                raise CommandError(f'{path}: {e.strerror or e}', returncode=EXIT_IO) from e
            except json.JSONDecodeError as e:
                raise CommandError(f'{path}: not valid JSON ({e})', returncode=EXIT_USAGE) from e
            serializer = HeadComparisonSerializer(data=raw if isinstance(raw, list) else [raw], many=True)
            try:
                serializer.is_valid(raise_exception=True)
            except serializers.ValidationError as e:
                raise CommandError(f'{path}: invalid stack entry {e.detail}', returncode=EXIT_USAGE) from e
            configs.extend(serializer.save())
        return configs

    def handle(self, *args, **options):
        if options['steps'] < 1 or options['batch'] < 1:
            raise CommandError('--steps and --batch must be positive', returncode=EXIT_USAGE)
        if options['configs']:
            configs = self.load_configs(options['configs'])
        else:
            configs = default_configs(batch=options['batch'], steps=options['steps'])

        try:
            rows = compare_heads(configs, isolate=not options['no_isolate'])
        except ReasonerError as e:
            raise CommandError(str(e), returncode=exit_code(e)) from e

        self.stdout.write(' | '.join(CSV_COLUMNS))
        for row in rows:
            values = row.as_dict()
            self.stdout.write(' | '.join(
                f'{values[column]:.4f}' if isinstance(values[column], float) else str(values[column])
                for column in CSV_COLUMNS
            ))

        if options.get('csv'):
            try:
                write_csv(rows, options['csv'])
            except OSError as e:
                raise CommandError(f"{options['csv']}: {e.strerror or e}", returncode=EXIT_IO) from e
            self.stdout.write(self.style.SUCCESS(f"Wrote {len(rows)} rows to {options['csv']}"))
