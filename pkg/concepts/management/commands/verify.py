"""
Run the property suites and print a pass/fail table
"""
from django.core.management.base import BaseCommand, CommandError

from concepts.exceptions import EXIT_VERIFY_FAILED
from concepts.utils import configure_threads
from concepts.verification import SUITES, run_suite


class Command(BaseCommand):
    help = 'Check gradients, equivalences, Sinkhorn fidelity, parameter counts and spectral norms'

    def add_arguments(self, parser):
        parser.add_argument(
            '--suite',
            type=str,
            choices=list(SUITES) + ['all'],
            default='all',
            help='Suite to run (default: all)',
        )

    def handle(self, *args, **options):
        suite = options['suite']
        configure_threads(1)
        self.stdout.write(self.style.SUCCESS(f'\n=== Verify: {suite} ===\n'))

        results = run_suite(suite)
        width = max((len(f'{r.suite}.{r.name}') for r in results), default=0)
        for result in results:
            label = f'{result.suite}.{result.name}'.ljust(width)
            line = f'{label}  {result.detail}'
            if result.passed:
                self.stdout.write(self.style.SUCCESS('PASS ') + line)
            else:
                self.stdout.write(self.style.ERROR('FAIL ') + line)

        failed = [f'{r.suite}.{r.name}' for r in results if not r.passed]
        self.stdout.write('')
        self.stdout.write(f'{len(results) - len(failed)}/{len(results)} properties passed')
        if failed:
            raise CommandError(f"Failing properties: {', '.join(failed)}", returncode=EXIT_VERIFY_FAILED)
        self.stdout.write(self.style.SUCCESS('All properties hold'))
