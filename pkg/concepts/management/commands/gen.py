"""
Generate a synthetic concept-learning dataset on disk
"""
from collections import Counter
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from concepts.episodes import DEFAULT_SIDE, generate_dataset, min_image_side
from concepts.exceptions import EXIT_USAGE, ReasonerError, exit_code
from concepts.models import ConceptFamily, DatasetSplit
from concepts.storage import save_dataset


def parse_split_counts(values):
    """['train=300', 'test=200'] -> {'train': 300, 'test': 200}"""
    counts = {}
    for value in values:
        split, _, number = value.partition('=')
        if split not in DatasetSplit.values or not number.isdigit():
            raise CommandError(
                f'--split-count expects SPLIT=N with SPLIT in {DatasetSplit.values}, got {value!r}',
                returncode=EXIT_USAGE,
            )
        if split in counts:
            raise CommandError(f'--split-count names {split} twice', returncode=EXIT_USAGE)
        counts[split] = int(number)
    return counts


class Command(BaseCommand):
    help = 'Generate Bongard-style episodes and write them as a dataset directory'

    def add_arguments(self, parser):
        parser.add_argument(
            '--family',
            nargs='+',
            required=True,
            choices=[choice[0] for choice in ConceptFamily.choices],
            help='Concept families to draw from, cycled in order',
        )
        parser.add_argument(
            '--count',
            type=int,
            help='Number of episodes to generate',
        )
        parser.add_argument(
            '--split-count',
            nargs='+',
            metavar='SPLIT=N',
            help='Exact episode count per split, e.g. train=300 test=200 (replaces --count and --split)',
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=0,
            help='Dataset seed (default: 0)',
        )
        parser.add_argument(
            '--out',
            type=str,
            required=True,
            help='Output dataset directory',
        )
        parser.add_argument(
            '--split',
            type=str,
            choices=['auto'] + [choice[0] for choice in DatasetSplit.choices],
            default='auto',
            help='auto assigns splits by hash partition; a fixed split keeps only seeds hashed into it',
        )
        parser.add_argument(
            '--image-side',
            type=int,
            default=DEFAULT_SIDE,
            help=f'Image side in pixels (default: {DEFAULT_SIDE})',
        )

    def handle(self, *args, **options):
        count = options.get('count')
        out = Path(options['out'])
        families = options['family']

        if options.get('split_count'):
            if count is not None or options['split'] != 'auto':
                raise CommandError('--split-count cannot be combined with --count or --split', returncode=EXIT_USAGE)
            plan = parse_split_counts(options['split_count'])
        elif count is None:
            raise CommandError('one of --count or --split-count is required', returncode=EXIT_USAGE)
        elif count < 0:
            raise CommandError(f'--count must be non-negative, got {count}', returncode=EXIT_USAGE)
        else:
            plan = {options['split']: count}

        side = options['image_side']
        minimum = min_image_side(families)
        if side < minimum:
            raise CommandError(
                f"--image-side must be at least {minimum} for {', '.join(families)}, got {side}",
                returncode=EXIT_USAGE,
            )

        total = sum(plan.values())
        self.stdout.write(f"Generating {total} episodes ({', '.join(families)}) from seed {options['seed']}...")
        try:
            episodes = []
            for split, split_count in plan.items():
                episodes += generate_dataset(families, split_count, options['seed'], split=split, image_side=side)
            manifest = save_dataset(episodes, out)
        except ReasonerError as e:
            raise CommandError(str(e), returncode=exit_code(e)) from e

        entries = manifest['episodes']
        splits = Counter(entry['split'] for entry in entries)
        family_counts = Counter(entry['family'] for entry in entries)
        self.stdout.write(f'Dataset: {out}')
        self.stdout.write(f'  Episodes: {len(entries)}')
        for split in DatasetSplit.values:
            self.stdout.write(f'  {split}: {splits.get(split, 0)}')
        for family, family_total in sorted(family_counts.items()):
            self.stdout.write(f'  {family}: {family_total}')
        self.stdout.write(self.style.SUCCESS(f'Wrote {len(entries)} episodes to {out}'))
